"""Image I/O, intensity normalisation and the synthetic two-modality data.

Images are plain ``H×W`` float64 arrays with intensities in ``[0, 1]``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .maskgen import PatchMask, load_mask, pool_to_patchgrid, save_mask
from .tensor import Tensor

SPLITS = ("train", "val", "test")
DOMAINS = ("X", "Y")


class PGMError(ValueError):
    pass


# -- PGM ------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        if pos >= len(buf):
            raise PGMError("truncated PGM header")
        c = buf[pos : pos + 1]
        if c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise PGMError("truncated PGM header")
            pos = nl + 1
        elif c.isspace():
            pos += 1
        else:
            end = pos
            while end < len(buf) and buf[end : end + 1].isdigit():
                end += 1
            if end == pos:
                raise PGMError(f"malformed PGM header near byte {pos}")
            tokens.append(int(buf[pos:end]))
            pos = end
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise PGMError("malformed PGM header")
    return tokens, pos + 1


def decode_pgm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P5":
        raise PGMError(f"unsupported PGM magic {buf[:2]!r}")
    (w, h, maxval), off = _pgm_tokens(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PGMError(f"invalid PGM header {w}×{h} maxval {maxval}")
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = w * h * dt.itemsize
    if len(buf) - off < need:
        raise PGMError(f"truncated PGM payload: need {need} bytes, have {len(buf) - off}")
    px = np.frombuffer(buf, dtype=dt, count=w * h, offset=off).astype(np.float64)
    return np.clip(px.reshape(h, w) / maxval, 0.0, 1.0)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise PGMError(f"PGM images are 2-D, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > 1):
        raise PGMError("intensities must lie in [0, 1]")
    px = np.rint(img * 255.0).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def save_pgm(img: np.ndarray, path) -> None:
    data = encode_pgm(img)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


# -- normalisation --------------------------------------------------------


def normalize_for_model(img) -> Tensor:
    """Map ``[0,1]`` intensities affinely onto ``[-1,1]``."""
    return Tensor(np.asarray(img, dtype=np.float64) * 2.0 - 1.0)


def denormalize(t) -> np.ndarray:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return np.clip((arr + 1.0) * 0.5, 0.0, 1.0)


# -- synthetic anatomy ----------------------------------------------------

X_BODY, X_CAVITY = 0.45, 0.9
Y_BODY_TOP, Y_BODY_BOTTOM, Y_CAVITY = 0.3, 0.8, 0.2
AXIS_RANGE = (0.27, 0.42)  # body semi-axes as fractions of the side


@dataclass(frozen=True)
class Anatomy:
    """Ellipse body with cavity ellipses given in body-normalised coordinates."""

    cy: float
    cx: float
    a: float
    b: float
    angle: float
    cavities: tuple[tuple[float, float, float, float, float], ...]


def sample_anatomy(rng: np.random.Generator, side: int) -> Anatomy:
    a, b = rng.uniform(*AXIS_RANGE, size=2) * side
    angle = rng.uniform(0.0, math.pi)
    reach = max(a, b) + 1.0
    cy, cx = rng.uniform(reach, side - reach, size=2)
    cavities = []
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(0.0, 0.45)
        phi = rng.uniform(0.0, 2 * math.pi)
        ra, rb = rng.uniform(0.12, 0.3, size=2)
        cavities.append((r * math.cos(phi), r * math.sin(phi), ra, rb, rng.uniform(0.0, math.pi)))
    return Anatomy(cy, cx, a, b, angle, tuple(cavities))


def _body_coords(anat: Anatomy, side: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(side) + 0.5
    dy = c[:, None] - anat.cy
    dx = c[None, :] - anat.cx
    ca, sa = math.cos(anat.angle), math.sin(anat.angle)
    u = (dy * ca + dx * sa) / anat.a
    v = (-dy * sa + dx * ca) / anat.b
    return u, v


def anatomy_masks(anat: Anatomy, side: int) -> tuple[np.ndarray, np.ndarray]:
    """(body, cavity) pixel masks."""
    u, v = _body_coords(anat, side)
    body = u * u + v * v <= 1.0
    cav = np.zeros_like(body)
    for cu, cv, ra, rb, phi in anat.cavities:
        cp, sp = math.cos(phi), math.sin(phi)
        du, dv = u - cu, v - cv
        p = (du * cp + dv * sp) / ra
        q = (-du * sp + dv * cp) / rb
        cav |= p * p + q * q <= 1.0
    return body, cav & body


def render(anat: Anatomy, side: int, domain: str) -> np.ndarray:
    """Domain X: mid body, bright cavities.  Domain Y: graded body, dark cavities."""
    body, cav = anatomy_masks(anat, side)
    img = np.zeros((side, side))
    if domain == "X":
        img[body] = X_BODY
        img[cav] = X_CAVITY
    elif domain == "Y":
        u, _ = _body_coords(anat, side)
        ramp = Y_BODY_TOP + (Y_BODY_BOTTOM - Y_BODY_TOP) * np.clip((u + 1.0) * 0.5, 0.0, 1.0)
        img[body] = ramp[body]
        img[cav] = Y_CAVITY
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return img


# -- datasets -------------------------------------------------------------


@dataclass
class DomainSplit:
    images: list[np.ndarray] = field(default_factory=list)
    masks: list[PatchMask] = field(default_factory=list)
    anatomies: list[Anatomy] | None = None

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class UnpairedDataset:
    """Per-split, per-domain image lists; X and Y indices are never paired."""

    side: int
    patch_size: int
    domains: dict[str, dict[str, DomainSplit]]

    def get(self, split: str, domain: str) -> DomainSplit:
        return self.domains[domain][split]

    def split_sizes(self, domain: str = "X") -> tuple[int, ...]:
        return tuple(len(self.domains[domain][s]) for s in SPLITS)

    def eval_pairs(self, split: str, direction: str) -> list[tuple[np.ndarray, np.ndarray]]:
        """(source, target) pairs obtained by re-rendering each source anatomy
        in the target domain.  Only available for synthetic data."""
        src, dst = direction[0], direction[-1]
        part = self.get(split, src)
        if part.anatomies is None:
            raise ValueError("evaluation pairs need synthetic anatomies to replay")
        return [(img, render(an, self.side, dst)) for img, an in zip(part.images, part.anatomies)]


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = n * 8 // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def synth_dataset(n_per_domain: int, side: int, seed: int, patch_size: int = 8) -> UnpairedDataset:
    if side % patch_size:
        raise ValueError(f"side {side} not divisible by patch size {patch_size}")
    if n_per_domain < 10:
        raise ValueError("n_per_domain must be at least 10")
    counts = split_counts(n_per_domain)
    domains: dict[str, dict[str, DomainSplit]] = {}
    for k, dom in enumerate(DOMAINS):
        gen = rngmod.stream(seed, "data", k)
        anats = [sample_anatomy(gen, side) for _ in range(n_per_domain)]
        parts, start = {}, 0
        for split, c in zip(SPLITS, counts):
            chunk = anats[start : start + c]
            start += c
            parts[split] = DomainSplit(
                [render(a, side, dom) for a in chunk],
                [pool_to_patchgrid(anatomy_masks(a, side)[0], patch_size) for a in chunk],
                list(chunk),
            )
        domains[dom] = parts
    return UnpairedDataset(side, patch_size, domains)


# -- manifest -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    domain: str
    image_path: str
    mask_path: str


def write_manifest(entries, path) -> None:
    lines = [f"{e.split}\t{e.domain}\t{e.image_path}\t{e.mask_path}\n" for e in entries]
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 3:
                parts.append("")
            if len(parts) != 4 or parts[0] not in SPLITS or parts[1] not in DOMAINS:
                raise ValueError(f"{path}:{lineno}: malformed manifest line")
            out.append(ManifestEntry(*parts))
    return out


def export_dataset(ds: UnpairedDataset, out_dir) -> str:
    """Write PGM images, UNTF masks and ``manifest.tsv``; returns the manifest path."""
    entries = []
    for dom in DOMAINS:
        for split in SPLITS:
            part = ds.get(split, dom)
            for i, (img, m) in enumerate(zip(part.images, part.masks)):
                rel_img = os.path.join("images", split, dom, f"{i:04d}.pgm")
                rel_mask = os.path.join("masks", split, dom, f"{i:04d}.untf")
                save_pgm(img, os.path.join(out_dir, rel_img))
                save_mask(m, os.path.join(out_dir, rel_mask))
                entries.append(ManifestEntry(split, dom, rel_img, rel_mask))
    path = os.path.join(out_dir, "manifest.tsv")
    write_manifest(entries, path)
    return path


def load_manifest_dataset(path, patch_size: int) -> UnpairedDataset:
    """Dataset from externally prepared slices; every entry needs a mask file."""
    base = os.path.dirname(os.path.abspath(path))
    domains = {d: {s: DomainSplit() for s in SPLITS} for d in DOMAINS}
    side = None
    for e in read_manifest(path):
        img = load_pgm(os.path.join(base, e.image_path))
        if img.shape[0] != img.shape[1] or img.shape[0] % patch_size:
            raise ValueError(f"{e.image_path}: image {img.shape} incompatible with patch {patch_size}")
        if side is None:
            side = img.shape[0]
        elif img.shape[0] != side:
            raise ValueError(f"{e.image_path}: all images must share one size")
        if not e.mask_path:
            raise ValueError(f"{e.image_path}: no mask listed; run the masks command first")
        part = domains[e.domain][e.split]
        part.images.append(img)
        part.masks.append(load_mask(os.path.join(base, e.mask_path)))
    return UnpairedDataset(side or 0, patch_size, domains)

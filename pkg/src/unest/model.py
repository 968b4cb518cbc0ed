"""The UNest generator: patch embedding, patch classifier, ST-block trunk and
a convolutional decoder fed by a conv-stem skip pyramid."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from . import untf
from .attention import MODES, AttentionParams, ScopeTable, block_forward
from .maskgen import PatchMask
from .tensor import Tensor

SCOPE_SOURCES = ("predicted", "ground_truth", "all_foreground")


@dataclass
class UNestConfig:
    image_side: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    window: int = 3
    sigma: float = 0.5
    mode: str = "FG-S+BG-L"
    stem_channels: int = 16
    mlp_ratio: int = 4
    scope_source: str = "predicted"
    conv_init: str = "he"

    def __post_init__(self):
        p = self.patch_size
        if p < 2 or p & (p - 1):
            raise ValueError(f"patch size must be a power of two >= 2, got {p}")
        if self.image_side % p:
            raise ValueError(f"image side {self.image_side} not divisible by patch size {p}")
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed dim {self.embed_dim} not divisible by {self.n_heads} heads")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd, got {self.window}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scope_source not in SCOPE_SOURCES:
            raise ValueError(f"unknown scope source {self.scope_source!r}")
        if self.conv_init not in ("he", "normal"):
            raise ValueError(f"unknown conv init {self.conv_init!r}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.patch_size))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNestConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            kind = kinds[k]
            out[k] = int(v) if kind == "int" else float(v) if kind == "float" else str(v)
        return cls(**out)


def _normal(rng, std, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_params(cfg: UNestConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    """Normal(0, std) token weights, zero biases, unit layer-norm gains.

    Convolutions have no normalisation layer to restore activation scale,
    so by default (``conv_init="he"``) they are drawn with fan-in scaling.
    """
    K, c, P = cfg.embed_dim, cfg.stem_channels, cfg.patch_size**2

    def conv(fan_in, gain, *shape):
        s = math.sqrt(gain / fan_in) if cfg.conv_init == "he" else std
        return _normal(rng, s, *shape)

    params: dict[str, Tensor] = {
        "embed.theta": _normal(rng, std, P, K),
        "embed.pos": _normal(rng, std, cfg.n_tokens, K),
        "cls.w": _normal(rng, std, K, 1),
        "cls.b": _zeros(1),
    }
    for t in range(cfg.depth):
        blk = AttentionParams.init(rng, K, cfg.n_heads, cfg.mlp_ratio, std)
        params.update({f"block{t}.{k}": v for k, v in blk.named().items()})
    for lvl in range(cfg.n_stages):
        cin = 1 if lvl == 0 else c
        params[f"stem{lvl}.w"] = conv(cin * 9, 2.0, c, cin, 3, 3)
        params[f"stem{lvl}.b"] = _zeros(c)
    for s in range(cfg.n_stages):
        cin = K if s == 0 else c
        params[f"dec{s}.up_w"] = conv(cin, 1.0, cin, c, 2, 2)
        params[f"dec{s}.up_b"] = _zeros(c)
        params[f"dec{s}.conv_w"] = conv(2 * c * 9, 2.0, c, 2 * c, 3, 3)
        params[f"dec{s}.conv_b"] = _zeros(c)
    params["head.w"] = conv(c, 1.0, 1, c, 1, 1)
    params["head.b"] = _zeros(1)
    return params


def block_params(params: dict[str, Tensor], t: int, n_heads: int) -> AttentionParams:
    pre = f"block{t}."
    return AttentionParams.from_named(
        {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}, n_heads
    )


def _batched(x: Tensor) -> Tensor:
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape)
    if x.ndim == 3:
        return x.reshape(x.shape[0], 1, *x.shape[1:]) if x.shape[0] != 1 else x.reshape(1, *x.shape)
    return x


def patchify_embed(x: Tensor, params: dict[str, Tensor], cfg: UNestConfig) -> Tensor:
    """``[B,1,H,W]`` → ``[B, N, K]`` tokens: flattened patches × theta + position."""
    x = _batched(x)
    B, C, H, W = x.shape
    if C != 1 or H != cfg.image_side or W != cfg.image_side:
        raise ValueError(f"input shape {x.shape} does not match image side {cfg.image_side}")
    p, g = cfg.patch_size, cfg.grid
    patches = x.reshape(B, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(B, g * g, p * p)
    return patches @ params["embed.theta"] + params["embed.pos"]


def classify_patches(f0: Tensor, params: dict[str, Tensor], cfg: UNestConfig) -> Tensor:
    """Foreground probabilities ``[B, H', W']`` from a 1×1 conv + sigmoid."""
    B = f0.shape[0]
    logits = f0 @ params["cls.w"] + params["cls.b"]
    return T.sigmoid(logits).reshape(B, cfg.grid, cfg.grid)


def masks_from_probs(probs: Tensor, sigma: float) -> list[PatchMask]:
    # thresholding is a step in the parameters
    T.note_kink(probs.data, sigma)
    return [PatchMask(p, sigma) for p in probs.data]


def select_masks(probs: Tensor, cfg: UNestConfig, scope_source: str | None = None, gt_masks=None) -> list[PatchMask]:
    source = scope_source or cfg.scope_source
    B = probs.shape[0]
    if source == "predicted":
        return masks_from_probs(probs, cfg.sigma)
    if source == "ground_truth":
        if gt_masks is None:
            raise ValueError("ground_truth scope source needs gt masks")
        gt = [gt_masks] if isinstance(gt_masks, PatchMask) else list(gt_masks)
        if len(gt) != B:
            raise ValueError(f"{len(gt)} gt masks for a batch of {B}")
        return [PatchMask(m.probs, cfg.sigma) for m in gt]
    if source == "all_foreground":
        return [PatchMask.full(cfg.grid, cfg.grid, 1.0, cfg.sigma) for _ in range(B)]
    raise ValueError(f"unknown scope source {source!r}")


def encode(f0: Tensor, masks: list[PatchMask], params, cfg: UNestConfig, keep=None) -> Tensor:
    # one mask prediction drives every block
    table = ScopeTable.from_masks(masks, cfg.window, cfg.mode)
    f = f0
    for t in range(cfg.depth):
        f = block_forward(f, table, block_params(params, t, cfg.n_heads), keep)
    return f


def stem(x: Tensor, params, cfg: UNestConfig) -> list[Tensor]:
    """Skip features at resolutions H, H/2, ..., 2H/p."""
    feats = []
    h = x
    for lvl in range(cfg.n_stages):
        stride = 1 if lvl == 0 else 2
        h = T.relu(T.conv2d(h, params[f"stem{lvl}.w"], params[f"stem{lvl}.b"], stride=stride, pad=1))
        feats.append(h)
    return feats


def decode(tokens: Tensor, skips: list[Tensor], params, cfg: UNestConfig) -> Tensor:
    B, N, K = tokens.shape
    h = tokens.transpose(0, 2, 1).reshape(B, K, cfg.grid, cfg.grid)
    for s in range(cfg.n_stages):
        h = T.deconv2d(h, params[f"dec{s}.up_w"], params[f"dec{s}.up_b"])
        h = T.concat([h, skips[cfg.n_stages - 1 - s]], axis=1)
        h = T.relu(T.conv2d(h, params[f"dec{s}.conv_w"], params[f"dec{s}.conv_b"], stride=1, pad=1))
    return T.tanh(T.conv2d(h, params["head.w"], params["head.b"]))


@dataclass
class ForwardResult:
    image: Tensor  # [B,1,H,W] in (-1, 1)
    probs: Tensor  # [B,H',W'] classifier output, differentiable
    masks: list[PatchMask]  # masks that built the scopes
    tokens: Tensor  # trunk output [B,N,K]


def forward(x: Tensor, params, cfg: UNestConfig, scope_source: str | None = None, gt_masks=None, keep=None) -> ForwardResult:
    x = _batched(x)
    f0 = patchify_embed(x, params, cfg)
    probs = classify_patches(f0, params, cfg)
    masks = select_masks(probs, cfg, scope_source, gt_masks)
    tokens = encode(f0, masks, params, cfg, keep)
    y = decode(tokens, stem(x, params, cfg), params, cfg)
    return ForwardResult(y, probs, masks, tokens)


def classifier_keys() -> tuple[str, str]:
    return ("cls.w", "cls.b")


# -- checkpoints ----------------------------------------------------------


def write_kv(path, d: dict) -> None:
    with open(path, "w") as fh:
        for k in sorted(d):
            fh.write(f"{k}={d[k]}\n")


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_tensors(tensors: dict[str, np.ndarray], out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, arr in tensors.items():
        untf.save(os.path.join(out_dir, f"{name}.untf"), arr, version=2)


def load_tensors(in_dir, names) -> dict[str, np.ndarray]:
    return {n: untf.load(os.path.join(in_dir, f"{n}.untf")) for n in names}


def save_generator(params: dict[str, Tensor], cfg: UNestConfig, out_dir) -> None:
    save_tensors({k: v.data for k, v in params.items()}, out_dir)
    write_kv(os.path.join(out_dir, "config.txt"), cfg.to_dict())


def load_generator(in_dir) -> tuple[dict[str, Tensor], UNestConfig]:
    cfg = UNestConfig.from_dict(read_kv(os.path.join(in_dir, "config.txt")))
    shapes = init_params(cfg, np.random.default_rng(0))
    arrays = load_tensors(in_dir, shapes)
    params = {}
    for k, ref in shapes.items():
        if arrays[k].shape != ref.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {arrays[k].shape}, expected {ref.shape}")
        params[k] = Tensor(arrays[k], requires_grad=True)
    return params, cfg

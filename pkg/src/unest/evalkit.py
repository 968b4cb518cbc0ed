"""MAE / PSNR / SSIM, the paired t-test, and map export."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import untf
from .imgdata import UnpairedDataset, denormalize, save_pgm
from .tensor import Tensor

PSNR_CAP = 99.0
T_CAP = 1e12


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    """Mean absolute error on [0,1] images, reported ×100."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b))) * 100.0


def psnr(a, b, max_val: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    views = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.tensordot(views, win, axes=([2, 3], [0, 1]))


def ssim_map(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, L: float = 1.0, sigma: float = 1.5) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}×{window} SSIM window")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a * mu_a
    sbb = _filter_valid(b * b, w) - mu_b * mu_b
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid positions, reported ×100."""
    return float(np.mean(ssim_map(a, b, window, k1, k2, L))) * 100.0


# -- paired t-test --------------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: int) -> float:
    return betainc_reg(dof / 2.0, 0.5, dof / (dof + t * t))


def paired_t_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Student t-test on ``a - b``."""
    a, b = np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and equally long")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        return math.copysign(T_CAP, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, n - 1)


# -- split evaluation -----------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    psnr: float
    ssim: float
    per_image: dict[str, list[float]] = field(default_factory=dict)
    n_images: int = 0

    @property
    def mae_raw(self) -> float:
        return self.mae / 100.0

    @property
    def ssim_raw(self) -> float:
        return self.ssim / 100.0

    def to_csv(self) -> str:
        keys = ("mae", "psnr", "ssim")
        lines = ["image,mae,psnr,ssim,mae_raw,ssim_raw"]
        for i in range(self.n_images):
            v = [self.per_image[k][i] for k in keys]
            lines.append(f"{i},{v[0]!r},{v[1]!r},{v[2]!r},{v[0] / 100.0!r},{v[2] / 100.0!r}")
        lines.append(f"mean,{self.mae!r},{self.psnr!r},{self.ssim!r},{self.mae_raw!r},{self.ssim_raw!r}")
        return "\n".join(lines) + "\n"


def _metrics(pair) -> tuple[float, float, float]:
    pred, target = pair
    return mae(pred, target), psnr(pred, target), ssim(pred, target)


def score(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray], threads: int = 1) -> MetricReport:
    """Per-image metrics; the pool only parallelises, aggregation is index-ordered."""
    if not preds:
        raise ValueError("nothing to evaluate")
    pairs = list(zip(preds, targets))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_metrics, pairs))
    else:
        rows = [_metrics(p) for p in pairs]
    per = {k: [r[i] for r in rows] for i, k in enumerate(("mae", "psnr", "ssim"))}
    return MetricReport(
        float(np.mean(per["mae"])), float(np.mean(per["psnr"])), float(np.mean(per["ssim"])), per, len(rows)
    )


def generator_fn(params, cfg: M.UNestConfig, scope_source: str | None = None, batch: int = 8) -> Callable:
    """Wrap generator weights as ``list of [0,1] images -> list of [0,1] images``."""
    frozen = {k: Tensor(v.data) for k, v in params.items()}

    def translate(images: Sequence[np.ndarray]) -> list[np.ndarray]:
        out = []
        for s in range(0, len(images), batch):
            x = np.stack(images[s : s + batch])[:, None] * 2.0 - 1.0
            y = M.forward(Tensor(x), frozen, cfg, scope_source=scope_source).image
            out.extend(denormalize(y.data[:, 0]))
        return out

    return translate


def identity_fn(images):
    return [np.asarray(im, dtype=np.float64) for im in images]


def env_threads(default: int = 1) -> int:
    raw = os.environ.get("UNEST_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        raise ValueError(f"UNEST_THREADS must be an integer, got {raw!r}") from None


def evaluate_split(generator, dataset: UnpairedDataset, split: str = "test", direction: str = "XY", cfg: M.UNestConfig | None = None, threads: int | None = None) -> MetricReport:
    """Score a generator on the replayed pairs of one split.

    ``generator`` is either a translate callable or a parameter dict, in
    which case ``cfg`` is required.
    """
    if not callable(generator):
        if cfg is None:
            raise ValueError("parameter dicts need a model config")
        generator = generator_fn(generator, cfg)
    pairs = dataset.eval_pairs(split, direction)
    if not pairs:
        raise ValueError(f"split {split!r} is empty")
    preds = generator([s for s, _ in pairs])
    return score(preds, [t for _, t in pairs], env_threads() if threads is None else threads)


def aggregate_runs(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample std over runs for each metric."""
    out = {}
    for k in ("mae", "psnr", "ssim"):
        v = np.array([getattr(r, k) for r in reports])
        out[k] = (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0)
    return out


def format_runs(agg: dict[str, tuple[float, float]]) -> str:
    return " ".join(f"{k.upper()} {m:.2f}±{s:.2f}" for k, (m, s) in agg.items())


# -- maps -----------------------------------------------------------------


def _render(arr: np.ndarray, side: int | None = None) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    top = a.max()
    a = a / top if top > 0 else np.zeros_like(a)
    if side is not None and a.shape[0] != side:
        rep = side // a.shape[0]
        a = np.kron(a, np.ones((rep, rep)))
    return np.clip(a, 0.0, 1.0)


def export_maps(params, cfg: M.UNestConfig, image: np.ndarray, out_dir, queries=(), target=None, scope_source=None) -> list[str]:
    """Write predicted mask, attention rows for ``queries`` and the error map.

    Every map is written as UNTF and rendered as PGM.
    """
    frozen = {k: Tensor(v.data) for k, v in params.items()}
    keep: list[np.ndarray] = []
    x = Tensor(np.asarray(image)[None, None] * 2.0 - 1.0)
    res = M.forward(x, frozen, cfg, scope_source=scope_source, keep=keep)
    g = cfg.grid
    written = []

    def put(name, arr, render_side=None):
        p_untf = os.path.join(out_dir, f"{name}.untf")
        untf.save(p_untf, arr)
        save_pgm(_render(arr, render_side), os.path.join(out_dir, f"{name}.pgm"))
        written.extend([p_untf, p_untf[:-5] + ".pgm"])

    os.makedirs(out_dir, exist_ok=True)
    mask = res.masks[0]
    put("mask_probs", mask.probs, cfg.image_side)
    put("mask_binary", mask.binary.astype(np.float64), cfg.image_side)
    fg = mask.binary.reshape(-1)
    for layer, weights in enumerate(keep):
        for head in range(weights.shape[1]):
            for qi, qj in queries:
                row = weights[0, head, qi * g + qj]
                if abs(row.sum() - 1.0) > 1e-9:
                    raise AssertionError(f"attention row for query {(qi, qj)} sums to {row.sum()}")
                if cfg.mode == "FG-S+BG-L" and fg[qi * g + qj] and fg.any() and np.any(row[~fg] != 0.0):
                    raise AssertionError(f"foreground query {(qi, qj)} attends to background tokens")
                put(f"attn_l{layer}_h{head}_q{qi}_{qj}", row.reshape(g, g), cfg.image_side)
    pred = denormalize(res.image.data[0, 0])
    save_pgm(pred, os.path.join(out_dir, "prediction.pgm"))
    written.append(os.path.join(out_dir, "prediction.pgm"))
    if target is not None:
        put("error_map", np.abs(pred - np.asarray(target)))
    return written

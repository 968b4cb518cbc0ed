"""Foreground masks: largest-component extraction and patch-grid pooling.

Stands in for a promptable segmenter.  Masks are computed once, offline,
and persisted as UNTF files next to the images they describe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import untf

SIGMA = 0.5
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class EmptyForegroundError(ValueError):
    pass


class MalformedMaskError(ValueError):
    pass


@dataclass
class PatchMask:
    """Per-token foreground probabilities on the H'×W' token grid."""

    probs: np.ndarray
    sigma: float = SIGMA

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"PatchMask needs a 2-D grid, got shape {self.probs.shape}")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ValueError("PatchMask probabilities must lie in [0, 1]")

    @property
    def grid_h(self) -> int:
        return self.probs.shape[0]

    @property
    def grid_w(self) -> int:
        return self.probs.shape[1]

    @property
    def binary(self) -> np.ndarray:
        # strict: ties at sigma are background
        return self.probs > self.sigma

    @classmethod
    def full(cls, grid_h: int, grid_w: int, value: float = 1.0, sigma: float = SIGMA) -> "PatchMask":
        return cls(np.full((grid_h, grid_w), float(value)), sigma)


def extract_foreground(img: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Largest 4-connected component of ``img > tau`` as a boolean mask."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    cand = np.asarray(img) > tau
    if not cand.any():
        raise EmptyForegroundError(f"no pixel exceeds tau={tau}")
    labels, n = ndimage.label(cand, structure=FOUR_CONNECTED)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    areas[0] = 0
    # argmax picks the first (raster-order) label among equal areas
    return labels == int(np.argmax(areas))


def pool_to_patchgrid(pixel_mask: np.ndarray, p: int, rho: float = 0.5, sigma: float = SIGMA) -> PatchMask:
    """Patch is foreground iff at least a ``rho`` fraction of its pixels are."""
    m = np.asarray(pixel_mask, dtype=bool)
    H, W = m.shape
    if H % p or W % p:
        raise ValueError(f"mask {H}×{W} not divisible by patch size {p}")
    counts = m.reshape(H // p, p, W // p, p).sum(axis=(1, 3))
    return PatchMask((counts >= rho * p * p).astype(np.float64), sigma)


def oracle_mask(img: np.ndarray, p: int, tau: float = 0.1, rho: float = 0.5) -> PatchMask:
    return pool_to_patchgrid(extract_foreground(img, tau), p, rho)


def save_mask(m: PatchMask, path) -> None:
    untf.save(path, m.probs, version=1)


def load_mask(path, sigma: float = SIGMA) -> PatchMask:
    try:
        arr = untf.load(path)
    except untf.UNTFError as exc:
        raise MalformedMaskError(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise MalformedMaskError(f"{path}: expected a rank-2 mask, got rank {arr.ndim}")
    try:
        return PatchMask(arr, sigma)
    except ValueError as exc:
        raise MalformedMaskError(f"{path}: {exc}") from exc

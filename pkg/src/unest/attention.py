"""Attention scopes and the dual-attention Structural Transformer block.

A scope is the explicit set of token-grid positions a query may read.
Foreground queries share the structural scope (every token whose mask
probability exceeds sigma); background queries read an m×m window on the
full token grid, or, in the FG-S+BG-S ablation, the shared background set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from . import tensor as T
from .maskgen import PatchMask
from .tensor import Tensor

MODES = ("FG-S+BG-L", "FG-S+BG-S")


class ScopeError(ValueError):
    pass


@dataclass(frozen=True)
class Scope:
    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ScopeError("scope entries must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def flat(self, grid_w: int) -> np.ndarray:
        return np.array([i * grid_w + j for i, j in self.entries], dtype=np.intp)


def scope_global(grid_h: int, grid_w: int) -> Scope:
    if grid_h < 1 or grid_w < 1:
        raise ScopeError(f"grid extents must be >= 1, got {grid_h}×{grid_w}")
    return Scope(tuple((i, j) for i in range(grid_h) for j in range(grid_w)))


def scope_local(q_idx, m: int, grid_h: int, grid_w: int) -> Scope:
    """m×m token window around ``q_idx``, clipped at the grid border."""
    if m < 1 or m % 2 == 0:
        raise ScopeError(f"window size must be odd and >= 1, got {m}")
    return _local(int(q_idx[0]), int(q_idx[1]), int(m), int(grid_h), int(grid_w))


@lru_cache(maxsize=65536)
def _local(iq: int, jq: int, m: int, grid_h: int, grid_w: int) -> Scope:
    r = m // 2
    return Scope(
        tuple(
            (i, j)
            for i in range(max(0, iq - r), min(grid_h, iq + r + 1))
            for j in range(max(0, jq - r), min(grid_w, jq + r + 1))
        )
    )


def scope_structural(mask: PatchMask) -> Scope:
    """Foreground tokens, ``M > sigma``, row-major."""
    ii, jj = np.nonzero(mask.binary)
    return Scope(tuple(zip(ii.tolist(), jj.tolist())))


def scope_background(mask: PatchMask) -> Scope:
    """Background tokens, ``M <= sigma``, row-major."""
    ii, jj = np.nonzero(~mask.binary)
    return Scope(tuple(zip(ii.tolist(), jj.tolist())))


def block_scopes(mask: PatchMask, window: int, mode: str = "FG-S+BG-L") -> list[Scope]:
    """Per-query scopes (row-major query order) for one ST block.

    Without foreground every query is background and goes local (or global
    under FG-S+BG-S); without background the structural scope is global.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    gh, gw = mask.grid_h, mask.grid_w
    fg = mask.binary
    s_fg = scope_structural(mask)
    s_bg = scope_background(mask) if mode == "FG-S+BG-S" else None
    out = []
    for i in range(gh):
        for j in range(gw):
            if fg[i, j]:
                out.append(s_fg)
            elif s_bg is not None:
                out.append(s_bg)
            else:
                out.append(scope_local((i, j), window, gh, gw))
    return out


@dataclass
class ScopeTable:
    """Padded per-query key indices, ``[B, N, T]``, with a validity mask."""

    index: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_scopes(cls, scopes_per_image: list[list[Scope]], grid_w: int) -> "ScopeTable":
        B = len(scopes_per_image)
        N = len(scopes_per_image[0])
        width = max(len(s) for scopes in scopes_per_image for s in scopes)
        index = np.zeros((B, N, width), dtype=np.intp)
        valid = np.zeros((B, N, width), dtype=bool)
        flat: dict[int, np.ndarray] = {}  # scopes are shared between queries
        for b, scopes in enumerate(scopes_per_image):
            if len(scopes) != N:
                raise ScopeError("every image needs one scope per query")
            for q, s in enumerate(scopes):
                if len(s) == 0:
                    raise ScopeError(f"empty scope for query {q}")
                idx = flat.get(id(s))
                if idx is None:
                    idx = flat[id(s)] = s.flat(grid_w)
                index[b, q, : len(idx)] = idx
                valid[b, q, : len(idx)] = True
        return cls(index, valid)

    @classmethod
    def from_masks(cls, masks: list[PatchMask], window: int, mode: str) -> "ScopeTable":
        return cls.from_scopes([block_scopes(m, window, mode) for m in masks], masks[0].grid_w)

    def allowance(self, n_keys: int) -> np.ndarray:
        """Dense boolean ``[B, N, n_keys]`` view of the table."""
        B, N, _ = self.index.shape
        out = np.zeros((B, N, n_keys), dtype=bool)
        b, q, t = np.nonzero(self.valid)
        out[b, q, self.index[b, q, t]] = True
        return out


# -- parameters -----------------------------------------------------------


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    n_heads: int = 4

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "n_heads"}

    @classmethod
    def from_named(cls, d: dict[str, Tensor], n_heads: int) -> "AttentionParams":
        return cls(**d, n_heads=n_heads)

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, n_heads: int, mlp_ratio: int = 4, std: float = 0.02):
        if dim % n_heads:
            raise ValueError(f"embed dim {dim} not divisible by {n_heads} heads")
        hid = dim * mlp_ratio

        def w(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(n, v):
            return Tensor(np.full(n, float(v)), requires_grad=True)

        return cls(
            w(dim, dim), w(dim, dim), w(dim, dim), w(dim, dim), const(dim, 0),
            const(dim, 1), const(dim, 0), const(dim, 1), const(dim, 0),
            w(dim, hid), const(hid, 0), w(hid, dim), const(dim, 0),
            n_heads=n_heads,
        )


# -- attention ------------------------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, N, K = x.shape
    return x.reshape(B, N, n_heads, K // n_heads).transpose(0, 2, 1, 3)


def attend_table(tokens: Tensor, table: ScopeTable, params: AttentionParams, keep: list | None = None) -> Tensor:
    """Scope-restricted multi-head attention on ``[B, N, K]`` tokens.

    Logits are gathered at each query's scope indices, normalised over the
    scope only, and scattered back to a dense weight matrix that is zero
    outside the scope.  ``keep`` collects those ``[B, h, N, N]`` weights.
    """
    B, N, K = tokens.shape
    h = params.n_heads
    d = K // h
    q = _split_heads(tokens @ params.w_q, h)
    k = _split_heads(tokens @ params.w_k, h)
    v = _split_heads(tokens @ params.w_v, h)
    logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    idx = table.index[:, None]
    scoped = T.gather_last(logits, idx)
    w = T.softmax(scoped, axis=-1, where=table.valid[:, None])
    dense = T.scatter_last(w, idx, N)
    if keep is not None:
        keep.append(dense.data)
    out = (dense @ v).transpose(0, 2, 1, 3).reshape(B, N, K)
    return out @ params.w_o + params.b_o


def attend(tokens: Tensor, per_query_scopes, params: AttentionParams, grid_w: int | None = None, keep=None) -> Tensor:
    """``tokens``: ``N×K`` with a list of N scopes, or ``B×N×K`` with B such lists."""
    single = tokens.ndim == 2
    scopes = [per_query_scopes] if single else per_query_scopes
    if grid_w is None:
        grid_w = int(math.isqrt(tokens.shape[-2]))
    table = ScopeTable.from_scopes(scopes, grid_w)
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    out = attend_table(x, table, params, keep)
    return out.reshape(out.shape[1:]) if single else out


def mlp(x: Tensor, params: AttentionParams) -> Tensor:
    return T.gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def block_forward(tokens: Tensor, table: ScopeTable, params: AttentionParams, keep=None) -> Tensor:
    """Pre-norm transformer block with scope-restricted attention.

    Both the foreground and background paths share the block weights, so the
    table (one scope per query position) carries the whole FG/BG split and
    each output position is written exactly once.
    """
    a = attend_table(T.layer_norm(tokens, params.ln1_g, params.ln1_b), table, params, keep)
    f1 = tokens + a
    return f1 + mlp(T.layer_norm(f1, params.ln2_g, params.ln2_b), params)


def _as_mask_list(masks) -> list[PatchMask]:
    return [masks] if isinstance(masks, PatchMask) else list(masks)


def st_block(tokens: Tensor, masks, params: AttentionParams, window: int = 3, mode: str = "FG-S+BG-L", keep=None) -> Tensor:
    """Structural Transformer block: structural attention on foreground
    tokens, local attention (window measured in tokens) on background."""
    single = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if single else tokens
    table = ScopeTable.from_masks(_as_mask_list(masks), window, mode)
    out = block_forward(x, table, params, keep)
    return out.reshape(out.shape[1:]) if single else out


def st_block_ablation(tokens: Tensor, masks, params: AttentionParams, window: int = 3, mode: str = "FG-S+BG-L", keep=None) -> Tensor:
    return st_block(tokens, masks, params, window, mode, keep)


def global_block(tokens: Tensor, params: AttentionParams, grid_h: int, grid_w: int) -> Tensor:
    """Plain transformer block where every query sees the whole grid."""
    return st_block(tokens, PatchMask.full(grid_h, grid_w), params, 1, "FG-S+BG-L")

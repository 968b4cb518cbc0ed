"""Fast invariant suite behind the ``selftest`` command.

Every check returns ``(ok, detail)``; details carry no timings so reports
are byte-stable across runs.
"""

from __future__ import annotations

import math

import numpy as np

from . import attention as A
from . import cyclegan as C
from . import evalkit as E
from . import rng as rngmod
from . import tensor as T
from . import untf
from .imgdata import decode_pgm, encode_pgm
from .maskgen import PatchMask
from .tensor import Tensor


def _primitive_grads(rng) -> tuple[bool, str]:
    x = Tensor(rng.normal(size=(3, 4)))
    w = rng.normal(size=(4, 2))
    cases = {
        "matmul": lambda t: T.tsum(t @ Tensor(w)),
        "sigmoid": lambda t: T.tsum(T.sigmoid(t) * t),
        "gelu": lambda t: T.tsum(T.gelu(t)),
        "tanh": lambda t: T.tsum(T.tanh(t) * t),
        "softmax": lambda t: T.tsum(T.softmax(t, -1) * Tensor(np.arange(4.0))),
        "layer_norm": lambda t: T.tsum(T.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))) * Tensor(w.T[0])),
        "exp_log": lambda t: T.tsum(T.log(T.exp(t) + 1.0)),
    }
    worst = {k: T.grad_check(f, x) for k, f in cases.items()}
    img = Tensor(rng.normal(size=(1, 2, 5, 5)))
    kw = Tensor(rng.normal(size=(3, 2, 3, 3)))
    worst["conv2d"] = T.grad_check(lambda t: T.tsum(T.tanh(T.conv2d(t, kw, stride=2, pad=1))), img)
    dw = Tensor(rng.normal(size=(2, 3, 2, 2)))
    worst["deconv2d"] = T.grad_check(lambda t: T.tsum(T.tanh(T.deconv2d(t, dw))), img)
    m = max(worst.values())
    return m < 1e-5, f"max rel error {m:.1e}"


def _dense_reference(tokens, mask, params, window, mode):
    """Additive -inf mask over full logits; independent of the scope table."""
    B, N, K = tokens.shape
    allowed = np.zeros((B, N, N), dtype=bool)
    for b, m in enumerate(mask):
        for q, s in enumerate(A.block_scopes(m, window, mode)):
            allowed[b, q, s.flat(m.grid_w)] = True
    ln = T.layer_norm(tokens, params.ln1_g, params.ln1_b).data
    h, d = params.n_heads, K // params.n_heads

    def split(a):
        return a.reshape(B, N, h, d).transpose(0, 2, 1, 3)

    q, k, v = (split(ln @ w.data) for w in (params.w_q, params.w_k, params.w_v))
    logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d)
    logits = np.where(allowed[:, None], logits, -np.inf)
    logits -= logits.max(-1, keepdims=True)
    wts = np.exp(logits)
    wts /= wts.sum(-1, keepdims=True)
    a = (wts @ v).transpose(0, 2, 1, 3).reshape(B, N, K) @ params.w_o.data + params.b_o.data
    f1 = tokens.data + a
    ln2 = T.layer_norm(Tensor(f1), params.ln2_g, params.ln2_b)
    return f1 + A.mlp(ln2, params).data


def _attention(rng) -> tuple[bool, str]:
    worst, leaks = 0.0, 0
    for mode in A.MODES:
        for _ in range(10):
            g = int(rng.integers(2, 7))
            params = A.AttentionParams.init(rng, 8, 2, 2, 0.3)
            masks = [PatchMask(rng.uniform(size=(g, g))) for _ in range(2)]
            tokens = Tensor(rng.normal(size=(2, g * g, 8)))
            keep: list = []
            out = A.st_block(tokens, masks, params, 3, mode, keep)
            worst = max(worst, float(np.max(np.abs(out.data - _dense_reference(tokens, masks, params, 3, mode)))))
            allowed = A.ScopeTable.from_masks(masks, 3, mode).allowance(g * g)[:, None]
            w = keep[0]
            leaks += int(np.count_nonzero(w[~np.broadcast_to(allowed, w.shape)]))
            worst = max(worst, float(np.max(np.abs(w.sum(-1) - 1.0))))
    return worst < 1e-10 and leaks == 0, f"max deviation {worst:.1e}, leaked weights {leaks}"


def _closed_forms() -> tuple[bool, str]:
    half = Tensor(np.full((4, 4), 0.5))
    bce = C.loss_mask(half, PatchMask(np.ones((4, 4)))).item()
    zero = Tensor(np.zeros((1, 1, 3, 3)))
    d_loss, _ = C.loss_adversarial(zero, zero, "bce")
    x = Tensor(np.linspace(-1, 1, 16).reshape(1, 1, 4, 4))
    cyc = C.loss_cycle(x, x, x, x).item()
    checks = [
        abs(bce - math.log(2)) <= 1e-12,
        abs(d_loss.item() - 2 * math.log(2)) <= 1e-12,
        cyc == 0.0,
        C.lr_schedule(75, 100, 1e-4) == 5e-5,
    ]
    return all(checks), f"bce {bce:.15f} d {d_loss.item():.15f} cycle {cyc} lr75 {C.lr_schedule(75):g}"


def _metrics(rng) -> tuple[bool, str]:
    a = rng.uniform(size=(16, 16))
    checks = [
        E.mae(a, a) == 0.0,
        E.psnr(a, a) == E.PSNR_CAP,
        abs(E.psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) - 20.0) < 1e-12,
        abs(E.ssim(a, a) - 100.0) < 1e-9,
        E.paired_t_test([1, 2], [1, 2]) == (0.0, 1.0),
    ]
    t, p = E.paired_t_test([1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5)
    checks.append(abs(t - 3 * math.sqrt(5) / math.sqrt(2.5)) < 1e-12 and abs(p - 0.0132) < 1e-4)
    return all(checks), f"t {t:.4f} p {p:.4f}"


def _formats(rng) -> tuple[bool, str]:
    arr = rng.normal(size=(3, 5)).astype(np.float32)
    ok = np.array_equal(untf.decode(untf.encode(arr)), arr)
    img = np.round(rng.uniform(size=(6, 7)) * 255) / 255
    ok &= np.array_equal(decode_pgm(encode_pgm(img)), img)
    return bool(ok), "UNTF and PGM round trips"


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    checks = [
        ("primitive gradients", lambda: _primitive_grads(rngmod.stream(seed, "eval", 1))),
        ("attention scopes and dense oracle", lambda: _attention(rngmod.stream(seed, "eval", 2))),
        ("closed-form losses and schedule", _closed_forms),
        ("metrics", lambda: _metrics(rngmod.stream(seed, "eval", 3))),
        ("file formats", lambda: _formats(rngmod.stream(seed, "eval", 4))),
    ]
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # reported, not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out


def report(results) -> str:
    return "".join(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n" for name, ok, detail in results)

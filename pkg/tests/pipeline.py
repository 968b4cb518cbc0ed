"""Small end-to-end CLI pipeline used by the CLI and acceptance tests."""

from __future__ import annotations

import contextlib
import io
import os
from pathlib import Path

from unest import cli

TRAIN_FLAGS = [
    "--epochs", "2", "--batch", "4", "--patch", "4", "--embed-dim", "8", "--depth", "1",
    "--heads", "2", "--stem-channels", "2", "--ndf", "4", "--lr", "1e-3",
]


def unest(*argv) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.run([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(root: Path, threads: int | None = None, seed: int = 0) -> dict[str, dict[str, bytes]]:
    """selftest, synth-data, train (2 epochs) and eval; returns each output tree."""
    old = os.environ.get("UNEST_THREADS")
    if threads is not None:
        os.environ["UNEST_THREADS"] = str(threads)
    try:
        steps = {
            "selftest": ["selftest", "--seed", seed, "--out", root / "selftest"],
            "data": ["synth-data", "--n", 20, "--side", 16, "--patch", 4, "--seed", seed, "--out", root / "data"],
            "train": ["train", "--data", root / "data", "--seed", seed, "--out", root / "train", *TRAIN_FLAGS],
            "eval": ["eval", "--checkpoint", root / "train", "--data", root / "data", "--out", root / "eval"],
        }
        for name, argv in steps.items():
            code, _, err = unest(*argv)
            if code != 0:
                raise RuntimeError(f"{name} exited {code}: {err}")
    finally:
        if threads is not None:
            if old is None:
                os.environ.pop("UNEST_THREADS", None)
            else:
                os.environ["UNEST_THREADS"] = old
    return {name: snapshot(root / name) for name in ("selftest", "data", "train", "eval")}

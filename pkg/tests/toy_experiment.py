"""Desk-scale comparison of the full model against its two ablations.

Runnable directly (``python tests/toy_experiment.py``) or imported by the
acceptance suite.
"""

from __future__ import annotations

import sys
import time

import numpy as np

from unest import cyclegan as C
from unest import evalkit as E
from unest.imgdata import synth_dataset
from unest.model import UNestConfig

# desk-scale trunk; see the README for the reasoning
TOY_MODEL = dict(image_side=64, patch_size=8, embed_dim=32, depth=2, n_heads=4, window=3, stem_channels=8)
TOY_TRAIN = dict(epochs=20, batch_size=4, base_lr=1e-3)
N_PER_DOMAIN = 200
SEEDS = (0, 1, 2)

VARIANTS = {
    "full": dict(mode="FG-S+BG-L", scope_source="predicted", lambda_mask=1.0),
    "global": dict(mode="FG-S+BG-L", scope_source="all_foreground", lambda_mask=0.0),
    "bg_s": dict(mode="FG-S+BG-S", scope_source="predicted", lambda_mask=1.0),
}


def run_variant(name: str, seed: int, dataset=None, epochs: int | None = None, **train_overrides) -> dict:
    v = VARIANTS[name]
    mcfg = UNestConfig(**TOY_MODEL, mode=v["mode"], scope_source=v["scope_source"])
    tcfg = C.TrainConfig(**{**TOY_TRAIN, "epochs": epochs or TOY_TRAIN["epochs"], **train_overrides}, lambda_mask=v["lambda_mask"], seed=seed)
    ds = dataset if dataset is not None else synth_dataset(N_PER_DOMAIN, mcfg.image_side, seed, mcfg.patch_size)
    t0 = time.process_time()
    state = C.train(ds, C.init_state(mcfg, tcfg))
    mae = {}
    for direction, gen in (("XY", state.gen_xy), ("YX", state.gen_yx)):
        mae[direction] = E.evaluate_split(gen, ds, "test", direction, cfg=mcfg).mae
    return {
        "variant": name,
        "seed": seed,
        "mae_xy": mae["XY"],
        "mae_yx": mae["YX"],
        "mae": (mae["XY"] + mae["YX"]) / 2,
        "cpu_s": time.process_time() - t0,
        "curves": state.curves,
    }


def compare(seeds=SEEDS, log=print) -> dict[str, list[dict]]:
    results: dict[str, list[dict]] = {k: [] for k in VARIANTS}
    for seed in seeds:
        ds = synth_dataset(N_PER_DOMAIN, TOY_MODEL["image_side"], seed, TOY_MODEL["patch_size"])
        for name in VARIANTS:
            r = run_variant(name, seed, ds)
            results[name].append(r)
            log(f"{name:7s} seed {seed}: MAE X→Y {r['mae_xy']:.3f} Y→X {r['mae_yx']:.3f} mean {r['mae']:.3f} ({r['cpu_s']:.0f}s)")
    return results


def summary(results: dict[str, list[dict]]) -> dict[str, float]:
    return {k: float(np.mean([r["mae"] for r in rs])) for k, rs in results.items()}


if __name__ == "__main__":
    seeds = tuple(int(s) for s in sys.argv[1:]) or SEEDS
    res = compare(seeds, log=lambda s: print(s, flush=True))
    print(summary(res))

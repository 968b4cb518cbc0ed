"""``unest`` command line: data synthesis through evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Option values
resolve as built-in default < ``--config`` file < explicit flag, and every
run writes the resolved values to ``<out>/run_config.txt`` so the file can
be fed back through ``--config``.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys

import numpy as np

from . import cyclegan as C
from . import evalkit as E
from . import model as M
from . import selftest as S
from .imgdata import (
    DOMAINS,
    ManifestEntry,
    export_dataset,
    load_manifest_dataset,
    load_pgm,
    read_manifest,
    save_pgm,
    synth_dataset,
    write_manifest,
)
from .maskgen import load_mask, oracle_mask, save_mask

RUN_CONFIG = "run_config.txt"
DATASET_INFO = "dataset.txt"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# name -> (type, default, help); None default means required
COMMANDS: dict[str, dict[str, tuple]] = {
    "synth-data": {
        "n": (int, 100, "images per domain"),
        "side": (int, 64, "image side in pixels"),
        "patch": (int, 8, "patch size for ground-truth masks"),
    },
    "masks": {
        "manifest": (str, None, "input manifest.tsv"),
        "patch": (int, 8, "patch size"),
        "tau": (float, 0.1, "intensity threshold"),
        "rho": (float, 0.5, "min foreground fraction per patch"),
    },
    "train": {
        "data": (str, None, "dataset directory holding manifest.tsv"),
        "epochs": (int, 100, ""),
        "batch": (int, 16, ""),
        "lr": (float, 1e-4, "base learning rate"),
        "w_adv": (float, 1.0, ""),
        "w_cyc": (float, 10.0, ""),
        "lambda_mask": (float, 1.0, "mask loss weight"),
        "gan_loss": (str, "bce", "bce or lsgan"),
        "ndf": (int, 8, "discriminator width"),
        "patch": (int, 8, ""),
        "embed_dim": (int, 64, ""),
        "depth": (int, 4, ""),
        "heads": (int, 4, ""),
        "window": (int, 3, "local window in tokens"),
        "sigma": (float, 0.5, "foreground threshold"),
        "mode": (str, "FG-S+BG-L", "FG-S+BG-L or FG-S+BG-S"),
        "scope_source": (str, "predicted", "predicted, ground_truth or all_foreground"),
        "stem_channels": (int, 16, ""),
        "mlp_ratio": (int, 4, ""),
        "checkpoint_every": (int, 0, "epochs between checkpoints, 0 for final only"),
        "resume": (str, "", "checkpoint directory to resume from"),
    },
    "generate": {
        "checkpoint": (str, None, "training output or checkpoint directory"),
        "data": (str, None, "dataset directory"),
        "split": (str, "test", ""),
        "direction": (str, "XY", "XY or YX"),
    },
    "eval": {
        "checkpoint": (str, None, ""),
        "data": (str, None, "synthetic dataset directory"),
        "split": (str, "test", ""),
        "direction": (str, "both", "XY, YX or both"),
    },
    "maps": {
        "checkpoint": (str, None, ""),
        "data": (str, None, ""),
        "split": (str, "test", ""),
        "direction": (str, "XY", ""),
        "index": (int, 0, "image index within the split"),
        "queries": (str, "", "token positions as 'i,j;i,j' (default: grid centre)"),
    },
    "gradcheck": {
        "side": (int, 16, ""),
        "patch": (int, 4, ""),
        "depth": (int, 2, ""),
        "embed_dim": (int, 8, ""),
        "heads": (int, 2, ""),
        "stem_channels": (int, 2, ""),
        "coords": (int, 4, "sampled coordinates per tensor"),
    },
    "selftest": {},
}
NEEDS_OUT = {"synth-data", "masks", "train", "generate", "eval", "maps", "selftest"}


def build_parser() -> Parser:
    parser = Parser(prog="unest", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        for key, (kind, default, text) in opts.items():
            hint = f"{text} (default {default})" if default is not None else f"{text} (required)"
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, help=hint)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one typed dict."""
    opts = {**COMMANDS[command], "seed": (int, 0, "")}
    values = {k: d for k, (_, d, _) in opts.items()}
    if ns.config:
        try:
            raw = M.read_kv(ns.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key == "command":
                continue
            if key not in opts:
                raise UsageError(f"unknown config key {k!r} for {command}")
            try:
                values[key] = opts[key][0](v)
            except ValueError:
                raise UsageError(f"bad value {v!r} for config key {k!r}") from None
    for k in opts:
        v = getattr(ns, k, None)
        if v is not None:
            values[k] = v
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    if values["seed"] < 0:
        raise UsageError("seed must be non-negative")
    return values


def write_run_config(out: str, command: str, values: dict) -> None:
    os.makedirs(out, exist_ok=True)
    M.write_kv(os.path.join(out, RUN_CONFIG), {"command": command, **values})


# -- subcommands ----------------------------------------------------------


def cmd_synth_data(v: dict, out: str) -> None:
    ds = synth_dataset(v["n"], v["side"], v["seed"], v["patch"])
    export_dataset(ds, out)
    M.write_kv(os.path.join(out, DATASET_INFO), {"n": v["n"], "side": v["side"], "seed": v["seed"], "patch": v["patch"]})
    sizes = "/".join(str(s) for s in ds.split_sizes("X"))
    print(f"wrote {2 * v['n']} images to {out} (train/val/test per domain {sizes})")


def cmd_masks(v: dict, out: str) -> None:
    src_dir = os.path.dirname(os.path.abspath(v["manifest"]))
    entries, agree, total = [], 0, 0
    for e in read_manifest(v["manifest"]):
        img = load_pgm(os.path.join(src_dir, e.image_path))
        m = oracle_mask(img, v["patch"], v["tau"], v["rho"])
        stem = os.path.splitext(e.image_path)[0].replace("images" + os.sep, "", 1)
        rel_mask = os.path.join("masks", stem + ".untf")
        save_mask(m, os.path.join(out, rel_mask))
        if e.mask_path:
            ref = load_mask(os.path.join(src_dir, e.mask_path))
            if ref.probs.shape == m.probs.shape:
                agree += int(np.sum(ref.binary == m.binary))
                total += m.probs.size
        rel_img = os.path.relpath(os.path.join(src_dir, e.image_path), os.path.abspath(out))
        entries.append(ManifestEntry(e.split, e.domain, rel_img, rel_mask))
    write_manifest(entries, os.path.join(out, "manifest.tsv"))
    info = os.path.join(src_dir, DATASET_INFO)
    if os.path.exists(info):
        shutil.copyfile(info, os.path.join(out, DATASET_INFO))
    msg = f"wrote {len(entries)} masks"
    if total:
        msg += f"; patch agreement with the listed masks {agree / total:.4f}"
    print(msg)


def _manifest_path(data: str) -> str:
    return data if data.endswith(".tsv") else os.path.join(data, "manifest.tsv")


def cmd_train(v: dict, out: str) -> None:
    if v["resume"]:
        state = C.load_checkpoint(v["resume"])
        state.train_cfg.epochs = v["epochs"]
        ds = load_manifest_dataset(_manifest_path(v["data"]), state.model_cfg.patch_size)
    else:
        ds = load_manifest_dataset(_manifest_path(v["data"]), v["patch"])
        mcfg = M.UNestConfig(
            image_side=ds.side, patch_size=v["patch"], embed_dim=v["embed_dim"], depth=v["depth"],
            n_heads=v["heads"], window=v["window"], sigma=v["sigma"], mode=v["mode"],
            stem_channels=v["stem_channels"], mlp_ratio=v["mlp_ratio"], scope_source=v["scope_source"],
        )
        tcfg = C.TrainConfig(
            epochs=v["epochs"], batch_size=v["batch"], base_lr=v["lr"], w_adv=v["w_adv"], w_cyc=v["w_cyc"],
            lambda_mask=v["lambda_mask"], gan_loss=v["gan_loss"], ndf=v["ndf"],
            checkpoint_every=v["checkpoint_every"], seed=v["seed"],
        )
        state = C.init_state(mcfg, tcfg)
    state = C.train(ds, state, out)
    last = state.curves[-1] if state.curves else {}
    print(f"trained to epoch {state.epoch} ({state.step} steps); last total loss {last.get('total', float('nan')):.4f}")


def _generator_dir(checkpoint: str, direction: str) -> str:
    net = {"XY": "gen_xy", "YX": "gen_yx"}.get(direction)
    if net is None:
        raise UsageError(f"direction must be XY or YX, got {direction!r}")
    for base in (checkpoint, os.path.join(checkpoint, "final")):
        if os.path.isdir(os.path.join(base, net)):
            return os.path.join(base, net)
    raise FileNotFoundError(f"no {net} generator under {checkpoint}")


def _eval_dataset(data: str):
    """Synthetic datasets are regenerated so evaluation pairs can be replayed."""
    info = os.path.join(data, DATASET_INFO)
    if not os.path.exists(info):
        raise ValueError(f"{data}: evaluation pairs need a synthetic dataset ({DATASET_INFO} missing)")
    d = M.read_kv(info)
    return synth_dataset(int(d["n"]), int(d["side"]), int(d["seed"]), int(d["patch"]))


def cmd_generate(v: dict, out: str) -> None:
    params, cfg = M.load_generator(_generator_dir(v["checkpoint"], v["direction"]))
    ds = load_manifest_dataset(_manifest_path(v["data"]), cfg.patch_size)
    part = ds.get(v["split"], v["direction"][0])
    preds = E.generator_fn(params, cfg)(part.images)
    for i, img in enumerate(preds):
        save_pgm(img, os.path.join(out, f"{v['split']}_{v['direction']}", f"{i:04d}.pgm"))
    print(f"wrote {len(preds)} {v['direction']} translations")


def cmd_eval(v: dict, out: str) -> None:
    ds = _eval_dataset(v["data"])
    directions = ("XY", "YX") if v["direction"] == "both" else (v["direction"],)
    lines = []
    for d in directions:
        params, cfg = M.load_generator(_generator_dir(v["checkpoint"], d))
        rep = E.evaluate_split(params, ds, v["split"], d, cfg=cfg)
        with open(os.path.join(out, f"metrics_{v['split']}_{d}.csv"), "w") as fh:
            fh.write(rep.to_csv())
        lines.append(f"{d} {v['split']} n={rep.n_images} MAE {rep.mae:.4f} PSNR {rep.psnr:.4f} SSIM {rep.ssim:.4f}")
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))


def _parse_queries(text: str, grid: int) -> list[tuple[int, int]]:
    if not text:
        return [(grid // 2, grid // 2)]
    out = []
    for part in text.split(";"):
        try:
            i, j = (int(s) for s in part.split(","))
        except ValueError:
            raise UsageError(f"bad query {part!r}; expected i,j") from None
        if not (0 <= i < grid and 0 <= j < grid):
            raise UsageError(f"query {(i, j)} outside the {grid}×{grid} token grid")
        out.append((i, j))
    return out


def cmd_maps(v: dict, out: str) -> None:
    params, cfg = M.load_generator(_generator_dir(v["checkpoint"], v["direction"]))
    queries = _parse_queries(v["queries"], cfg.grid)
    target = None
    try:
        pairs = _eval_dataset(v["data"]).eval_pairs(v["split"], v["direction"])
        image, target = pairs[v["index"]]
    except ValueError:
        ds = load_manifest_dataset(_manifest_path(v["data"]), cfg.patch_size)
        image = ds.get(v["split"], v["direction"][0]).images[v["index"]]
    files = E.export_maps(params, cfg, image, out, queries, target)
    print(f"wrote {len(files)} map files")


def cmd_gradcheck(v: dict, out: str | None) -> int:
    cfg = M.UNestConfig(
        image_side=v["side"], patch_size=v["patch"], depth=v["depth"], embed_dim=v["embed_dim"],
        n_heads=v["heads"], stem_channels=v["stem_channels"],
    )
    errs = C.objective_gradcheck(cfg, v["seed"], v["coords"])
    worst_key = max(errs, key=errs.get)
    worst = errs[worst_key]
    if out:
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            fh.writelines(f"{k}\t{float(e)!r}\n" for k, e in errs.items())
    print(f"max rel error {worst:.3e} ({worst_key}, {len(errs)} tensors)")
    return 0 if worst < 1e-4 else 2


def cmd_selftest(v: dict, out: str) -> int:
    results = S.run(v["seed"])
    text = S.report(results)
    with open(os.path.join(out, "selftest_report.txt"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0 if all(ok for _, ok, _ in results) else 2


HANDLERS = {
    "synth-data": cmd_synth_data,
    "masks": cmd_masks,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "maps": cmd_maps,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage())
        values = resolve(ns.command, ns)
        out = ns.out
        if ns.command in NEEDS_OUT and not out:
            raise UsageError(f"{ns.command}: --out is required")
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    try:
        if out:
            write_run_config(out, ns.command, values)
        code = HANDLERS[ns.command](values, out)
        return code or 0
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except (C.NonFiniteError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"unest {ns.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=os.environ.get("UNEST_LOGLEVEL", "WARNING"), stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()

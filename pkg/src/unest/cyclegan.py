"""CycleGAN training with two UNest generators and two PatchGAN critics."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model as M
from . import rng as rngmod
from . import tensor as T
from .imgdata import UnpairedDataset
from .maskgen import PatchMask
from .model import UNestConfig
from .optim import AdamState, adam_step
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
CURVE_FIELDS = ("epoch", "step", "d_x", "d_y", "g_adv", "g_cyc", "g_mask", "total")


class NonFiniteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 1e-4
    w_adv: float = 1.0
    w_cyc: float = 10.0
    lambda_mask: float = 1.0
    gan_loss: str = "bce"
    ndf: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.gan_loss not in ("bce", "lsgan"):
            raise ValueError(f"unknown gan loss {self.gan_loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k in kinds:
                kind = kinds[k]
                out[k] = int(v) if kind == "int" else float(v) if kind == "float" else str(v)
        return cls(**out)


# -- discriminator --------------------------------------------------------


def disc_downsamples(side: int) -> int:
    return max(1, min(3, int(math.log2(side)) - 3))


def init_discriminator(side: int, ndf: int, rng: np.random.Generator, std: float = 0.02) -> dict[str, Tensor]:
    """PatchGAN: 4×4 stride-2 convs then a 4×4 stride-1 one-channel head."""
    params = {}
    cin = 1
    for lvl in range(disc_downsamples(side)):
        cout = ndf * 2**lvl
        params[f"d{lvl}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, 4, 4)), requires_grad=True)
        params[f"d{lvl}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout
    params["head.w"] = Tensor(rng.normal(0.0, std, (1, cin, 4, 4)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def discriminate(x: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Pre-sigmoid score map ``[B, 1, h, w]``."""
    h = x
    lvl = 0
    while f"d{lvl}.w" in params:
        h = T.leaky_relu(T.conv2d(h, params[f"d{lvl}.w"], params[f"d{lvl}.b"], stride=2, pad=1), 0.2)
        lvl += 1
    return T.conv2d(h, params["head.w"], params["head.b"], stride=1, pad=1)


def receptive_field(side: int) -> int:
    r = 4
    for _ in range(disc_downsamples(side)):
        r = r * 2 + 2
    return r


# -- losses ---------------------------------------------------------------


def _log_sigmoid(s: Tensor) -> Tensor:
    return T.log(T.clip(T.sigmoid(s), LOG_CLAMP, 1.0))


def _log_one_minus_sigmoid(s: Tensor) -> Tensor:
    return T.log(T.clip(1.0 - T.sigmoid(s), LOG_CLAMP, 1.0))


def loss_adversarial(d_real: Tensor, d_fake: Tensor, kind: str = "bce") -> tuple[Tensor, Tensor]:
    """(critic loss, non-saturating generator loss) from pre-sigmoid scores."""
    d_real, d_fake = T.as_tensor(d_real), T.as_tensor(d_fake)
    if kind == "lsgan":
        d_loss = T.mean((d_real - 1.0) * (d_real - 1.0)) + T.mean(d_fake * d_fake)
        return d_loss, T.mean((d_fake - 1.0) * (d_fake - 1.0))
    d_loss = -T.mean(_log_sigmoid(d_real)) - T.mean(_log_one_minus_sigmoid(d_fake))
    return d_loss, -T.mean(_log_sigmoid(d_fake))


def critic_loss(d_real: Tensor, d_fake: Tensor, kind: str = "bce") -> Tensor:
    return loss_adversarial(d_real, d_fake, kind)[0]


def generator_adv_loss(d_fake: Tensor, kind: str = "bce") -> Tensor:
    if kind == "lsgan":
        return T.mean((d_fake - 1.0) * (d_fake - 1.0))
    return -T.mean(_log_sigmoid(d_fake))


def loss_cycle(x, x_rec, y, y_rec) -> Tensor:
    x, x_rec, y, y_rec = (T.as_tensor(t) for t in (x, x_rec, y, y_rec))
    if x.shape != x_rec.shape or y.shape != y_rec.shape:
        raise T.ShapeError(f"cycle shapes differ: {x.shape}/{x_rec.shape}, {y.shape}/{y_rec.shape}")
    return T.abs_mean(x - x_rec) + T.abs_mean(y - y_rec)


def loss_mask(pred, gt) -> Tensor:
    """Binary cross-entropy averaged over the token grid (and batch)."""
    probs = T.as_tensor(pred.probs if isinstance(pred, PatchMask) else pred)
    if isinstance(gt, PatchMask):
        target = gt.probs
    elif isinstance(gt, (list, tuple)):
        target = np.stack([m.probs if isinstance(m, PatchMask) else np.asarray(m) for m in gt])
    else:
        target = np.asarray(gt, dtype=np.float64)
    if probs.shape != target.shape:
        raise T.ShapeError(f"mask grids differ: {probs.shape} vs {target.shape}")
    p = T.clip(probs, LOG_CLAMP, 1.0 - LOG_CLAMP)
    ll = T.log(p) * target + T.log(1.0 - p) * (1.0 - target)
    return -T.mean(ll)


def loss_generator_total(parts: dict, w_adv: float = 1.0, w_cyc: float = 10.0, lam: float = 1.0):
    """``w_adv * adv + w_cyc * cycle + lam * mask``; parts may be floats or tensors."""
    return w_adv * parts["adv"] + w_cyc * parts["cycle"] + lam * parts["mask"]


def lr_schedule(epoch: int, total: int = 100, base: float = 1e-4) -> float:
    """Constant for the first half, then linear decay to zero at ``total``."""
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    half = total // 2
    if epoch < half:
        return base
    return base * (total - epoch) / (total - half)


# -- state ----------------------------------------------------------------


NETS = ("gen_xy", "gen_yx", "disc_x", "disc_y")


@dataclass
class TrainState:
    model_cfg: UNestConfig
    train_cfg: TrainConfig
    nets: dict[str, dict[str, Tensor]]
    adam: dict[str, AdamState]
    epoch: int = 0
    step: int = 0
    curves: list[dict] = field(default_factory=list)

    @property
    def gen_xy(self):
        return self.nets["gen_xy"]

    @property
    def gen_yx(self):
        return self.nets["gen_yx"]

    @property
    def disc_x(self):
        return self.nets["disc_x"]

    @property
    def disc_y(self):
        return self.nets["disc_y"]


def init_state(model_cfg: UNestConfig, train_cfg: TrainConfig) -> TrainState:
    nets = {}
    for k, name in enumerate(NETS):
        rng = rngmod.stream(train_cfg.seed, "init", k)
        if name.startswith("gen"):
            nets[name] = M.init_params(model_cfg, rng)
        else:
            nets[name] = init_discriminator(model_cfg.image_side, train_cfg.ndf, rng)
    adam = {
        name: AdamState.for_params(nets[name].values(), beta1=train_cfg.beta1, beta2=train_cfg.beta2)
        for name in NETS
    }
    return TrainState(model_cfg, train_cfg, nets, adam)


def _zero(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _first_nonfinite(named: dict[str, np.ndarray]) -> str | None:
    for k, v in named.items():
        if not np.all(np.isfinite(v)):
            return k
    return None


def _guard(state: TrainState, report: dict, extra: dict[str, np.ndarray]) -> None:
    bad = [k for k, v in report.items() if isinstance(v, float) and not math.isfinite(v)]
    if bad:
        first = _first_nonfinite(extra) or _first_nonfinite(
            {f"{n}/{k}": p.data for n in NETS for k, p in state.nets[n].items()}
        )
        raise NonFiniteError(f"non-finite loss {bad} at step {state.step}; first non-finite tensor: {first}")
    for n in NETS:
        for k, p in state.nets[n].items():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteError(f"parameter {n}/{k} became non-finite at step {state.step}")


def _finite(t: Tensor, name: str, state: TrainState) -> Tensor:
    # stop before a NaN translation is fed to the other generator
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"first non-finite tensor: {name} at step {state.step}")
    return t


def generator_losses(state: TrainState, x: Tensor, y: Tensor, masks_x, masks_y) -> tuple[Tensor, dict, dict]:
    """Both cycles and the weighted generator objective."""
    mc, tc = state.model_cfg, state.train_cfg
    fx = M.forward(x, state.gen_xy, mc, gt_masks=masks_x)
    fake_y = _finite(fx.image, "fake_y", state)
    rec_x = _finite(M.forward(fake_y, state.gen_yx, mc).image, "rec_x", state)
    fy = M.forward(y, state.gen_yx, mc, gt_masks=masks_y)
    fake_x = _finite(fy.image, "fake_x", state)
    rec_y = _finite(M.forward(fake_x, state.gen_xy, mc).image, "rec_y", state)

    adv_xy = generator_adv_loss(discriminate(fake_y, state.disc_y), tc.gan_loss)
    adv_yx = generator_adv_loss(discriminate(fake_x, state.disc_x), tc.gan_loss)
    cyc = loss_cycle(x, rec_x, y, rec_y)
    mask = loss_mask(fx.probs, masks_x) + loss_mask(fy.probs, masks_y)
    parts = {"adv": adv_xy + adv_yx, "cycle": cyc, "mask": mask}
    total = loss_generator_total(parts, tc.w_adv, tc.w_cyc, tc.lambda_mask)
    return total, parts, {"fake_x": fake_x, "fake_y": fake_y, "rec_x": rec_x, "rec_y": rec_y}


def _params(state, name):
    return list(state.nets[name].values())


def train_step(batch_x: np.ndarray, batch_y: np.ndarray, masks_x, masks_y, state: TrainState, lr: float) -> dict:
    """One generator update followed by one critic update on detached fakes."""
    tc = state.train_cfg
    x, y = Tensor(batch_x), Tensor(batch_y)
    for n in NETS:
        _zero(state.nets[n])
    # critics are constants for the generator update; skip their weight grads
    critic = [p for n in ("disc_x", "disc_y") for p in state.nets[n].values()]
    for p in critic:
        p.requires_grad = False
    try:
        total, parts, outs = generator_losses(state, x, y, masks_x, masks_y)
        report = {
            "g_adv": parts["adv"].item(),
            "g_cyc": parts["cycle"].item(),
            "g_mask": parts["mask"].item(),
            "total": total.item(),
        }
        _guard(state, report, {k: v.data for k, v in outs.items()})
        T.backward(total)
    finally:
        for p in critic:
            p.requires_grad = True
    for n in ("gen_xy", "gen_yx"):
        ps = _params(state, n)
        adam_step(ps, [p.grad for p in ps], state.adam[n], lr)

    for n in NETS:
        _zero(state.nets[n])
    fake_y, fake_x = outs["fake_y"].detach(), outs["fake_x"].detach()
    d_y = critic_loss(discriminate(y, state.disc_y), discriminate(fake_y, state.disc_y), tc.gan_loss)
    d_x = critic_loss(discriminate(x, state.disc_x), discriminate(fake_x, state.disc_x), tc.gan_loss)
    report = {"d_x": d_x.item(), "d_y": d_y.item(), **report}
    _guard(state, report, {})
    T.backward(d_x + d_y)
    for n in ("disc_x", "disc_y"):
        ps = _params(state, n)
        adam_step(ps, [p.grad for p in ps], state.adam[n], lr)
    _guard(state, report, {})
    state.step += 1
    return report


# -- loop -----------------------------------------------------------------


def epoch_batches(n_x: int, n_y: int, batch: int, seed: int, epoch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Independent shuffles of the two domains; incomplete batches dropped."""
    px = rngmod.stream(seed, "shuffle", epoch, 0).permutation(n_x)
    py = rngmod.stream(seed, "shuffle", epoch, 1).permutation(n_y)
    steps = min(n_x, n_y) // batch
    return [(px[i * batch : (i + 1) * batch], py[i * batch : (i + 1) * batch]) for i in range(steps)]


def _stack(images, idx) -> np.ndarray:
    return np.stack([images[i] for i in idx])[:, None] * 2.0 - 1.0


def train(dataset: UnpairedDataset, state: TrainState, out_dir=None, progress=None) -> TrainState:
    """Run epochs ``state.epoch .. epochs-1``; resumable from any checkpoint."""
    tc = state.train_cfg
    tx, ty = dataset.get("train", "X"), dataset.get("train", "Y")
    if len(tx) < tc.batch_size or len(ty) < tc.batch_size:
        raise ValueError("train split smaller than one batch")
    while state.epoch < tc.epochs:
        ep = state.epoch
        lr = lr_schedule(ep, tc.epochs, tc.base_lr)
        for ix, iy in epoch_batches(len(tx), len(ty), tc.batch_size, tc.seed, ep):
            rep = train_step(
                _stack(tx.images, ix), _stack(ty.images, iy),
                [tx.masks[i] for i in ix], [ty.masks[i] for i in iy], state, lr,
            )
            state.curves.append({"epoch": ep, "step": state.step, **rep})
            if progress is not None:
                progress(state, rep)
        state.epoch += 1
        logger.info("epoch %d done, last total %.4f", ep, state.curves[-1]["total"])
        if out_dir is not None and tc.checkpoint_every and state.epoch % tc.checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out_dir, f"ckpt_epoch{state.epoch:03d}"))
    if out_dir is not None:
        save_checkpoint(state, os.path.join(out_dir, "final"))
        write_curves(state.curves, os.path.join(out_dir, "loss_curves.csv"))
    return state


def curves_csv(curves: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for row in curves:
        w.writerow([row["epoch"], row["step"]] + [repr(float(row[k])) for k in CURVE_FIELDS[2:]])
    return buf.getvalue()


def write_curves(curves: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write(curves_csv(curves))


def read_curves(path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [
        {k: (int(r[k]) if k in ("epoch", "step") else float(r[k])) for k in CURVE_FIELDS} for r in rows
    ]


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(state: TrainState, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for n in NETS:
        M.save_tensors({k: v.data for k, v in state.nets[n].items()}, os.path.join(out_dir, n))
        ad = state.adam[n]
        names = list(state.nets[n])
        M.save_tensors({f"m.{k}": a for k, a in zip(names, ad.first_moment)}, os.path.join(out_dir, "adam", n))
        M.save_tensors({f"v.{k}": a for k, a in zip(names, ad.second_moment)}, os.path.join(out_dir, "adam", n))
    meta = {"epoch": state.epoch, "step": state.step}
    meta.update({f"adam_steps.{n}": state.adam[n].step_count for n in NETS})
    M.write_kv(os.path.join(out_dir, "state.txt"), meta)
    M.write_kv(os.path.join(out_dir, "config.txt"), {**state.model_cfg.to_dict(), **state.train_cfg.to_dict()})
    M.write_kv(os.path.join(out_dir, "gen_xy", "config.txt"), state.model_cfg.to_dict())
    M.write_kv(os.path.join(out_dir, "gen_yx", "config.txt"), state.model_cfg.to_dict())
    write_curves(state.curves, os.path.join(out_dir, "loss_curves.csv"))


def load_checkpoint(in_dir) -> TrainState:
    cfg = M.read_kv(os.path.join(in_dir, "config.txt"))
    state = init_state(UNestConfig.from_dict(cfg), TrainConfig.from_dict(cfg))
    meta = M.read_kv(os.path.join(in_dir, "state.txt"))
    for n in NETS:
        names = list(state.nets[n])
        arrays = M.load_tensors(os.path.join(in_dir, n), names)
        for k in names:
            if arrays[k].shape != state.nets[n][k].shape:
                raise ValueError(f"checkpoint tensor {n}/{k} has the wrong shape")
            state.nets[n][k].data = arrays[k]
        ad = state.adam[n]
        m = M.load_tensors(os.path.join(in_dir, "adam", n), [f"m.{k}" for k in names])
        v = M.load_tensors(os.path.join(in_dir, "adam", n), [f"v.{k}" for k in names])
        ad.first_moment = [m[f"m.{k}"] for k in names]
        ad.second_moment = [v[f"v.{k}"] for k in names]
        ad.step_count = int(meta[f"adam_steps.{n}"])
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state.curves = read_curves(os.path.join(in_dir, "loss_curves.csv"))
    return state


# -- gradient check of the full objective --------------------------------


def objective_gradcheck(model_cfg: UNestConfig, seed: int = 0, coords_per_tensor: int = 4, std: float = 0.3, h: float = 1e-5,
                        kink_clearance: float = 10.0, max_redraws: int = 50) -> dict[str, float]:
    """Finite-difference check of the generator objective.

    Perturbs sampled coordinates of the input image and of every generator
    parameter.  Weights are drawn wider than the training init so that no
    gradient sits near the float64 noise floor of the central difference,
    and redrawn until every piecewise op is at least ``kink_clearance * h``
    from its breakpoint for the unperturbed point.
    Returns the max relative error per checked tensor.
    """
    from .imgdata import anatomy_masks, render, sample_anatomy
    from .maskgen import pool_to_patchgrid

    data_rng = rngmod.stream(seed, "data", 0)
    side, p = model_cfg.image_side, model_cfg.patch_size
    ax, ay = sample_anatomy(data_rng, side), sample_anatomy(data_rng, side)
    x = render(ax, side, "X")[None, None] * 2 - 1
    y = Tensor(render(ay, side, "Y")[None, None] * 2 - 1)
    mx = [pool_to_patchgrid(anatomy_masks(ax, side)[0], p)]
    my = [pool_to_patchgrid(anatomy_masks(ay, side)[0], p)]

    tc = TrainConfig(epochs=1, batch_size=1, ndf=4, seed=seed)
    state = init_state(model_cfg, tc)
    # redraw until no relu, |.| or mask threshold lies within reach of the step
    for attempt in range(max_redraws):
        for k, name in enumerate(NETS):
            rng = rngmod.stream(seed, "init", k, attempt)
            if name.startswith("gen"):
                state.nets[name] = M.init_params(model_cfg, rng, std=std)
            else:
                state.nets[name] = init_discriminator(model_cfg.image_side, tc.ndf, rng, std=std)
            # random biases too: zero biases put relus exactly on their kink
            for prm in state.nets[name].values():
                prm.data = prm.data + rng.normal(0.0, 0.1, size=prm.shape)
        with T.KinkMargin() as margin:
            generator_losses(state, Tensor(x), y, mx, my)
        if margin.value > kink_clearance * h:
            break
    else:
        raise RuntimeError(f"no kink-free point found in {max_redraws} draws")
    logger.info("gradcheck point after %d redraw(s), kink margin %.3g", attempt, margin.value)

    def objective(xt: Tensor) -> Tensor:
        return generator_losses(state, xt, y, mx, my)[0]

    pick = rngmod.stream(seed, "eval", 0)
    out = {"input": T.grad_check(objective, Tensor(x), h, pick.choice(x.size, coords_per_tensor, replace=False))}
    for net in ("gen_xy", "gen_yx"):
        for key, param in list(state.nets[net].items()):

            def f(probe: Tensor, net=net, key=key, orig=param) -> Tensor:
                state.nets[net][key] = probe
                try:
                    return objective(Tensor(x))
                finally:
                    state.nets[net][key] = orig

            n = min(coords_per_tensor, param.data.size)
            out[f"{net}/{key}"] = T.grad_check(f, param, h, pick.choice(param.data.size, n, replace=False))
    return out

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unest import evalkit as E
from unest import model as M
from unest import untf
from unest.imgdata import load_pgm, synth_dataset

from oracles import ssim_brute, t_p_oracle

# -- metrics --------------------------------------------------------------


def test_mae_examples():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    assert E.mae(x, x) == 0.0
    assert E.mae(np.zeros((4, 4)), np.ones((4, 4))) == 100.0
    assert E.mae(np.zeros((4, 4)), np.full((4, 4), 0.0788)) == pytest.approx(7.88, abs=1e-12)
    with pytest.raises(ValueError):
        E.mae(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_closed_forms():
    a = np.zeros((10, 10))
    assert E.psnr(a, np.full((10, 10), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert E.psnr(a, np.full((10, 10), 0.01)) == pytest.approx(40.0, abs=1e-12)
    assert E.psnr(a, a) == E.PSNR_CAP == 99.0
    b = np.zeros((10, 10))
    b[0, :] = 1.0  # MSE 0.1
    assert E.psnr(a, b) == pytest.approx(10.0, abs=1e-12)


def test_ssim_examples():
    x = np.random.default_rng(1).uniform(size=(16, 16))
    assert E.ssim(x, x) == pytest.approx(100.0, abs=1e-12)
    half = np.zeros((16, 16))
    half[:, 8:] = 1.0
    assert E.ssim(half, 1 - half) < E.ssim(half, half)
    assert E.ssim(np.full((16, 16), 0.3), np.full((16, 16), 0.3)) == pytest.approx(100.0, abs=1e-12)
    a, b = np.full((16, 16), 0.3), np.full((16, 16), 0.6)
    assert abs(E.ssim(a, b) - ssim_brute(a, b)) <= 1e-9
    with pytest.raises(ValueError):
        E.ssim(np.zeros((10, 16)), np.zeros((10, 16)))


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1) if seed % 2 else rng.uniform(size=(16, 16))
    assert abs(E.ssim(a, b) - ssim_brute(a, b)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_metric_symmetry_and_ranges(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    assert E.mae(a, b) == E.mae(b, a) >= 0
    assert E.psnr(a, b) == E.psnr(b, a) >= 0
    assert abs(E.ssim(a, b) - E.ssim(b, a)) <= 1e-12
    assert -100 <= E.ssim(a, b) <= 100


# -- t-test ---------------------------------------------------------------


def test_t_test_examples():
    assert E.paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    t, p = E.paired_t_test([2, 2, 2, 2], [1, 1, 1, 1])
    assert t == E.T_CAP and p == 0.0
    t, p = E.paired_t_test([1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5)
    assert t == pytest.approx(math.sqrt(5) * 3 / math.sqrt(2.5), abs=1e-12)
    assert p == pytest.approx(0.0132, abs=5e-5)
    assert abs(p - t_p_oracle(t, 4)) <= 1e-6
    with pytest.raises(ValueError):
        E.paired_t_test([1.0], [2.0])
    with pytest.raises(ValueError):
        E.paired_t_test([1.0, 2.0], [2.0])


def test_t_test_matches_quadrature_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in range(2, 31):
        for _ in range(3):
            a = rng.normal(size=n)
            b = a + rng.normal(rng.uniform(-1, 1), rng.uniform(0.2, 2), size=n)
            t, p = E.paired_t_test(a, b)
            worst = max(worst, abs(p - t_p_oracle(t, n - 1)))
    assert worst <= 1e-6


def test_betainc_edges():
    assert E.betainc_reg(2.0, 3.0, 0.0) == 0.0
    assert E.betainc_reg(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x and the symmetry I_x(a, b) = 1 - I_{1-x}(b, a)
    assert E.betainc_reg(1.0, 1.0, 0.37) == pytest.approx(0.37, abs=1e-14)
    assert E.betainc_reg(2.5, 0.5, 0.3) == pytest.approx(1 - E.betainc_reg(0.5, 2.5, 0.7), abs=1e-14)


# -- split evaluation -----------------------------------------------------


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(20, 16, 3, 4)


def test_identity_generator_scores_perfectly(ds):
    for split in ("train", "val", "test"):
        r = E.evaluate_split(E.identity_fn, ds, split, "XX")
        assert (r.mae, r.psnr, r.ssim) == (0.0, 99.0, pytest.approx(100.0, abs=1e-12))


def test_report_means_and_csv(ds):
    r = E.evaluate_split(E.identity_fn, ds, "train", "XY")
    assert r.n_images == 16
    for k in ("mae", "psnr", "ssim"):
        assert getattr(r, k) == float(np.mean(r.per_image[k]))
    rows = r.to_csv().strip().splitlines()
    assert len(rows) == 18 and rows[-1].startswith("mean,")
    assert float(rows[-1].split(",")[4]) == r.mae / 100


def test_threads_do_not_change_results(ds):
    a = E.evaluate_split(E.identity_fn, ds, "train", "XY", threads=1)
    b = E.evaluate_split(E.identity_fn, ds, "train", "XY", threads=4)
    assert a.to_csv() == b.to_csv()


def test_empty_split_and_missing_cfg(ds):
    with pytest.raises(ValueError):
        E.evaluate_split({"w": None}, ds, "test", "XY")
    with pytest.raises(ValueError):
        E.score([], [])


def test_generator_params_are_deterministic(ds):
    cfg = M.UNestConfig(image_side=16, patch_size=4, embed_dim=8, depth=1, n_heads=2, stem_channels=2)
    params = M.init_params(cfg, np.random.default_rng(0))
    a = E.evaluate_split(params, ds, "test", "XY", cfg=cfg)
    b = E.evaluate_split(params, ds, "test", "XY", cfg=cfg)
    assert a.to_csv() == b.to_csv()


def test_aggregate_runs():
    reps = [E.MetricReport(m, 30.0, 80.0) for m in (6.0, 7.0, 8.0)]
    agg = E.aggregate_runs(reps)
    assert agg["mae"] == (7.0, 1.0) and agg["psnr"] == (30.0, 0.0)
    assert E.format_runs(agg).startswith("MAE 7.00±1.00")


# -- maps -----------------------------------------------------------------


def test_export_maps(ds, tmp_path):
    cfg = M.UNestConfig(image_side=16, patch_size=4, embed_dim=8, depth=2, n_heads=2, stem_channels=2)
    params = M.init_params(cfg, np.random.default_rng(1), std=0.3)
    part = ds.get("test", "X")
    img = part.images[0]
    fg = np.argwhere(part.masks[0].binary)[0]
    queries = [tuple(fg), (0, 0)]
    files = E.export_maps(params, cfg, img, tmp_path, queries, target=img)
    names = {p.split("/")[-1] for p in files}
    assert {"mask_probs.untf", "mask_binary.pgm", "prediction.pgm", "error_map.untf"} <= names
    assert sum(n.startswith("attn_") and n.endswith(".untf") for n in names) == 2 * 2 * 2
    probs = untf.load(tmp_path / "mask_probs.untf")
    binary = probs > cfg.sigma
    for n in names:
        if n.startswith("attn_l") and n.endswith(".untf"):
            row = untf.load(tmp_path / n)
            assert abs(row.sum() - 1.0) <= 1e-6  # stored as float32
            qi, qj = map(int, n[:-5].split("_q")[1].split("_"))
            if binary[qi, qj] and binary.any():
                assert not row[~binary].any()
    pred = load_pgm(tmp_path / "prediction.pgm")
    assert pred.shape == (16, 16)


def test_error_map_against_own_output_is_zero(tmp_path):
    cfg = M.UNestConfig(image_side=16, patch_size=4, embed_dim=8, depth=1, n_heads=2, stem_channels=2)
    params = M.init_params(cfg, np.random.default_rng(2))
    img = np.random.default_rng(3).uniform(0.1, 0.9, (16, 16))
    pred = E.generator_fn(params, cfg)([img])[0]
    E.export_maps(params, cfg, img, tmp_path, target=pred)
    assert not untf.load(tmp_path / "error_map.untf").any()
    E.export_maps(params, cfg, img, tmp_path / "self")
    assert not (tmp_path / "self" / "error_map.untf").exists()

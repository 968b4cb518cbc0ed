import numpy as np
import pytest

from unest import model as M
from unest import tensor as T
from unest.attention import block_forward, ScopeTable
from unest.maskgen import PatchMask
from unest.tensor import Tensor


def small(**kw):
    base = dict(image_side=16, patch_size=4, embed_dim=8, depth=2, n_heads=2, stem_channels=2)
    return M.UNestConfig(**{**base, **kw})


def image(seed, side=16, batch=1):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, size=(batch, 1, side, side)))


def test_config_validation():
    with pytest.raises(ValueError):
        M.UNestConfig(image_side=30, patch_size=8)
    with pytest.raises(ValueError):
        M.UNestConfig(patch_size=6, image_side=36)
    with pytest.raises(ValueError):
        M.UNestConfig(embed_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        M.UNestConfig(mode="FG-L")
    cfg = M.UNestConfig()
    assert M.UNestConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg


def test_patchify_examples():
    cfg = M.UNestConfig(image_side=8, patch_size=4, embed_dim=8, n_heads=2)
    params = M.init_params(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8, 8)))
    assert M.patchify_embed(x, params, cfg).shape == (1, 4, 8)
    zeroed = {**params, "embed.theta": Tensor(np.zeros((16, 8))), "embed.pos": Tensor(np.zeros((4, 8)))}
    assert not M.patchify_embed(x, zeroed, cfg).data.any()
    flat = {**params, "embed.pos": Tensor(np.zeros((4, 8)))}
    toks = M.patchify_embed(Tensor(np.full((1, 1, 8, 8), 0.3)), flat, cfg).data[0]
    assert np.all(toks == toks[0])


def test_patchify_is_row_major_flatten():
    cfg = M.UNestConfig(image_side=8, patch_size=4, embed_dim=16, n_heads=2)
    params = {"embed.theta": Tensor(np.eye(16)), "embed.pos": Tensor(np.zeros((4, 16)))}
    x = np.arange(64.0).reshape(1, 1, 8, 8)
    toks = M.patchify_embed(Tensor(x), params, cfg).data[0]
    np.testing.assert_array_equal(toks[1], x[0, 0, 0:4, 4:8].ravel())
    np.testing.assert_array_equal(toks[2], x[0, 0, 4:8, 0:4].ravel())


def test_classifier_examples():
    cfg = small()
    params = M.init_params(cfg, np.random.default_rng(0))
    f0 = M.patchify_embed(image(1), params, cfg)
    zero = {**params, "cls.w": Tensor(np.zeros((8, 1))), "cls.b": Tensor(np.zeros(1))}
    probs = M.classify_patches(f0, zero, cfg)
    assert np.all(probs.data == 0.5)
    assert not M.masks_from_probs(probs, 0.5)[0].binary.any()
    big = {**zero, "cls.b": Tensor(np.array([50.0]))}
    assert M.masks_from_probs(M.classify_patches(f0, big, cfg), 0.5)[0].binary.all()
    p = M.classify_patches(f0, params, cfg).data
    assert np.all((p > 0) & (p < 1))


@pytest.mark.parametrize("side,p", [(16, 4), (32, 4), (32, 8), (64, 8), (16, 8)])
def test_forward_shape_and_range(side, p):
    cfg = M.UNestConfig(image_side=side, patch_size=p, embed_dim=8, depth=1, n_heads=2, stem_channels=2)
    params = M.init_params(cfg, np.random.default_rng(0))
    params["head.b"].data[:] = 0.3
    res = M.forward(image(2, side, 2), params, cfg)
    assert res.image.shape == (2, 1, side, side)
    assert np.all(np.abs(res.image.data) < 1)
    assert res.probs.shape == (2, side // p, side // p)


def test_forward_is_deterministic():
    cfg = small()
    params = M.init_params(cfg, np.random.default_rng(0))
    a = M.forward(image(3), params, cfg).image.data
    b = M.forward(image(3), params, cfg).image.data
    assert a.tobytes() == b.tobytes()


def test_all_foreground_trunk_equals_plain_encoder():
    cfg = small(depth=3)
    rng = np.random.default_rng(4)
    params = M.init_params(cfg, rng, std=0.3)
    x = image(5)
    gt = [PatchMask(np.ones((4, 4)))]
    res = M.forward(x, params, cfg, scope_source="ground_truth", gt_masks=gt)
    # reference: every query sees every token in every block
    f = M.patchify_embed(x, params, cfg)
    full = ScopeTable(np.tile(np.arange(16), (1, 16, 1)), np.ones((1, 16, 16), bool))
    for t in range(cfg.depth):
        f = block_forward(f, full, M.block_params(params, t, cfg.n_heads))
    assert np.max(np.abs(res.tokens.data - f.data)) <= 1e-10


def test_scope_sources_share_parameter_shapes():
    cfg = small()
    params = M.init_params(cfg, np.random.default_rng(0))
    x = image(6)
    gt = [PatchMask((np.random.default_rng(7).uniform(size=(4, 4)) > 0.5).astype(float))]
    outs = {
        s: M.forward(x, params, cfg, scope_source=s, gt_masks=gt)
        for s in ("predicted", "ground_truth", "all_foreground")
    }
    np.testing.assert_array_equal(outs["ground_truth"].masks[0].binary, gt[0].binary)
    assert outs["all_foreground"].masks[0].binary.all()
    with pytest.raises(ValueError):
        M.forward(x, params, cfg, scope_source="ground_truth")


def test_classifier_receives_no_gradient_through_scopes():
    cfg = small()
    params = M.init_params(cfg, np.random.default_rng(0), std=0.3)
    res = M.forward(image(8), params, cfg)
    T.backward(T.tsum(res.image * res.image))
    for k in M.classifier_keys():
        assert params[k].grad is None or not np.any(params[k].grad)


def test_full_forward_gradients():
    cfg = small()
    rng = np.random.default_rng(9)
    params = M.init_params(cfg, rng, std=0.3)
    for p in params.values():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    x = image(10)
    w = Tensor(rng.normal(size=(1, 1, 16, 16)))
    assert T.grad_check(lambda t: T.tsum(M.forward(t, params, cfg).image * w), x, coords=range(0, 256, 9)) < 1e-4
    for key in ("embed.theta", "block1.w_k", "stem1.w", "dec0.up_w", "dec1.conv_w", "head.w"):
        def f(t, key=key):
            return T.tsum(M.forward(x, {**params, key: t}, cfg).image * w)

        assert T.grad_check(f, params[key], coords=range(0, params[key].data.size, 7)) < 1e-4, key


def test_generator_checkpoint_round_trip(tmp_path):
    cfg = small(mode="FG-S+BG-S")
    params = M.init_params(cfg, np.random.default_rng(11))
    M.save_generator(params, cfg, tmp_path)
    back, cfg2 = M.load_generator(tmp_path)
    assert cfg2 == cfg
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()


def test_checkpoint_shape_mismatch(tmp_path):
    cfg = small()
    params = M.init_params(cfg, np.random.default_rng(0))
    M.save_generator(params, cfg, tmp_path)
    M.write_kv(tmp_path / "config.txt", small(embed_dim=16).to_dict())
    with pytest.raises(ValueError):
        M.load_generator(tmp_path)

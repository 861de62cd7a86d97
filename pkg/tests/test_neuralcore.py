import numpy as np
import pytest

from pivot import neuralcore as nc
from pivot.neuralcore import (
    AdamState,
    Batch,
    ModelConfig,
    ModelError,
    adam_step,
    backward,
    forward_losses,
    grad_check,
    init_params,
    load_checkpoint,
    make_tiny_batch,
    positional_encoding,
    save_checkpoint,
)


def tiny_config(**overrides):
    base = dict(dim=8, heads=2, ff_dim=16, num_steps=5, level_sizes=(2, 3),
                max_seq_len=16)
    base.update(overrides)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(dim=10, heads=4).validate()
    with pytest.raises(ModelError):
        ModelConfig(pool="cls").validate()
    with pytest.raises(ModelError):
        ModelConfig(num_steps=0).validate()
    tiny_config().validate()


def test_param_shapes_cover_heads_and_layers():
    cfg = tiny_config(pool="tfenc")
    shapes = nc.param_shapes(cfg)
    assert "enc1.Wq" in shapes and "enc2.Wq" in shapes
    assert shapes["step.W2"] == (8, 5)
    assert shapes["path1.W2"] == (8, 2)
    assert shapes["path2.W2"] == (8, 3)
    mean_shapes = nc.param_shapes(tiny_config())
    assert "enc2.Wq" not in mean_shapes


def test_init_params_conventions():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0))
    assert np.array_equal(params["enc1.ln1_g"], np.ones(8))
    assert np.array_equal(params["enc1.bq"], np.zeros(8))
    assert params["enc1.Wq"].std() < 1.0


def test_positional_encoding_structure():
    pe = positional_encoding(10, 8)
    assert pe.shape == (10, 8)
    assert np.allclose(pe[0, 0::2], 0.0)  # sin(0)
    assert np.allclose(pe[0, 1::2], 1.0)  # cos(0)
    assert not np.allclose(pe[1], pe[2])


def test_layer_norm_forward_normalizes():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5, 8)) * 4 + 2
    y, _ = nc._layer_norm_forward(x, np.ones(8), np.zeros(8))
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    assert np.allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_padding_positions_do_not_affect_valid_outputs():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 8))
    valid = np.array([[True, True, True, False]])
    h1a, va, _ = nc.encoder_forward(params, cfg, x, valid)
    x2 = x.copy()
    x2[0, 3] = rng.standard_normal(8) * 10  # scramble the padded clip
    h1b, vb, _ = nc.encoder_forward(params, cfg, x2, valid)
    assert np.allclose(h1a[0, :3], h1b[0, :3])
    assert np.allclose(va, vb)


def test_mean_pool_is_masked_mean():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(1))
    x = np.random.default_rng(3).standard_normal((2, 3, 8))
    valid = np.array([[True, True, False], [True, True, True]])
    h1, v, _ = nc.encoder_forward(params, cfg, x, valid)
    assert np.allclose(v[0], h1[0, :2].mean(axis=0))
    assert np.allclose(v[1], h1[1].mean(axis=0))


def test_tfenc_pool_uses_first_position_of_second_layer():
    cfg = tiny_config(pool="tfenc")
    params = init_params(cfg, np.random.default_rng(1))
    x = np.random.default_rng(3).standard_normal((2, 3, 8))
    valid = np.ones((2, 3), dtype=bool)
    h1, v, cache = nc.encoder_forward(params, cfg, x, valid)
    h2, _ = nc.encoder_layer_forward(params, "enc2.", cfg, h1, valid)
    assert np.allclose(v, h2[:, 0, :])


def test_joint_loss_is_sum_of_parts():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(5))
    batch = make_tiny_batch(cfg, np.random.default_rng(6))
    ls, lp, lj, logits, _ = forward_losses(params, cfg, batch)
    assert lj == ls + lp  # bitwise, not approx
    assert logits["step"].shape == (2, 3, cfg.num_steps)
    assert len(logits["path"]) == len(cfg.level_sizes)


def test_loss_against_manual_single_clip():
    """One video, one clip, no path heads: BCE computed by hand."""
    cfg = tiny_config(level_sizes=())
    params = init_params(cfg, np.random.default_rng(7))
    x = np.random.default_rng(8).standard_normal((1, 1, 8))
    y = np.zeros((1, 1, 5)); y[0, 0, 2] = 1.0
    batch = Batch(x=x, valid=np.ones((1, 1), bool), step_targets=y)
    ls, lp, lj, logits, _ = forward_losses(params, cfg, batch)
    z = logits["step"][0, 0]
    manual = float(np.sum(np.logaddexp(0.0, z) - z * y[0, 0]))
    assert ls == pytest.approx(manual, rel=1e-12)
    assert lp == 0.0


def test_batch_validation_errors():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0))
    bad_dim = Batch(x=np.zeros((1, 2, 4)), valid=np.ones((1, 2), bool))
    with pytest.raises(ModelError):
        forward_losses(params, cfg, bad_dim)
    too_long = Batch(x=np.zeros((1, 99, 8)), valid=np.ones((1, 99), bool))
    with pytest.raises(ModelError, match="max_seq_len"):
        forward_losses(params, cfg, too_long)
    all_pad = Batch(x=np.zeros((1, 2, 8)), valid=np.zeros((1, 2), bool))
    with pytest.raises(ModelError):
        forward_losses(params, cfg, all_pad)


@pytest.mark.parametrize("pool", ["mean", "tfenc"])
def test_grad_check_both_pools(pool):
    cfg = tiny_config(pool=pool, level_sizes=(2, 3))
    err = grad_check(cfg, seed=11)
    assert err < 1e-4


def test_grad_check_detects_corruption():
    """A deliberately wrong gradient must trip the checker."""
    cfg = tiny_config(level_sizes=())
    rng = np.random.default_rng([13, 0])
    params = init_params(cfg, rng)
    batch = make_tiny_batch(cfg, rng)
    _, _, _, _, cache = forward_losses(params, cfg, batch)
    grads, _ = backward(params, cfg, batch, cache)
    names = sorted(params)
    analytic = nc._flatten(grads, names)
    corrupted = analytic.copy()
    corrupted[np.argmax(np.abs(analytic))] *= 1.5
    scale = max(np.abs(analytic).max(), 1e-8)
    assert np.max(np.abs(corrupted - analytic)) / scale > 1e-2


def test_backward_input_gradient_matches_fd():
    cfg = tiny_config()
    rng = np.random.default_rng([21, 0])
    params = init_params(cfg, rng)
    batch = make_tiny_batch(cfg, rng)
    _, _, _, _, cache = forward_losses(params, cfg, batch)
    _, dx = backward(params, cfg, batch, cache)
    eps = 1e-5
    i = (0, 1, 3)
    up = Batch(batch.x.copy(), batch.valid, batch.step_targets, batch.path_targets)
    up.x[i] += eps
    dn = Batch(batch.x.copy(), batch.valid, batch.step_targets, batch.path_targets)
    dn.x[i] -= eps
    fd = (forward_losses(params, cfg, up)[2] - forward_losses(params, cfg, dn)[2]) / (2 * eps)
    assert dx[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_adam_matches_reference_scalar():
    """Single scalar parameter against a hand-rolled Adam implementation."""
    params = {"w": np.array([1.0])}
    state = AdamState.zeros_like(params)
    g = np.array([0.3])
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    m = v = 0.0
    w_ref = 1.0
    for t in range(1, 6):
        adam_step(params, {"w": g}, state, lr)
        m = b1 * m + (1 - b1) * 0.3
        v = b2 * v + (1 - b2) * 0.09
        w_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert params["w"][0] == pytest.approx(w_ref, rel=1e-12)


def test_adam_weight_decay_variants():
    params = {"w": np.array([2.0])}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([0.0])}, state, lr=0.1, weight_decay=0.5)
    # coupled decay: grad becomes 0.5 * 2.0 = 1.0, step is lr after bias correction
    assert params["w"][0] < 2.0
    params2 = {"w": np.array([2.0])}
    state2 = AdamState.zeros_like(params2)
    adam_step(params2, {"w": np.array([0.0])}, state2, lr=0.1, weight_decay=0.5,
              decoupled=True)
    assert params2["w"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


def test_adam_rejects_nonfinite_gradient():
    params = {"w": np.array([1.0])}
    state = AdamState.zeros_like(params)
    with pytest.raises(ModelError, match="'w'"):
        adam_step(params, {"w": np.array([np.nan])}, state, lr=0.1)


def test_training_reduces_loss():
    cfg = tiny_config()
    rng = np.random.default_rng(31)
    params = init_params(cfg, rng)
    batch = make_tiny_batch(cfg, rng)
    state = AdamState.zeros_like(params)
    first = forward_losses(params, cfg, batch)[2]
    for _ in range(50):
        *_, cache = forward_losses(params, cfg, batch)
        grads, _ = backward(params, cfg, batch, cache)
        adam_step(params, grads, state, lr=1e-2)
    last = forward_losses(params, cfg, batch)[2]
    assert last < first


@pytest.mark.parametrize("with_adam", [False, True])
def test_checkpoint_roundtrip(tmp_path, with_adam):
    cfg = tiny_config(pool="tfenc")
    params = init_params(cfg, np.random.default_rng(9))
    adam = None
    if with_adam:
        adam = AdamState.zeros_like(params)
        batch = make_tiny_batch(cfg, np.random.default_rng(10))
        *_, cache = forward_losses(params, cfg, batch)
        grads, _ = backward(params, cfg, batch, cache)
        adam_step(params, grads, adam, lr=1e-3)
    path = tmp_path / "model.pivt"
    save_checkpoint(path, cfg, params, adam)
    cfg2, params2, adam2 = load_checkpoint(path)
    assert cfg2 == cfg
    for name in params:
        assert np.array_equal(params2[name], params[name].astype(np.float32))
    if with_adam:
        assert adam2.t == adam.t
        assert np.array_equal(adam2.m["enc1.Wq"], adam.m["enc1.Wq"].astype(np.float32))
    else:
        assert adam2 is None


def test_checkpoint_detects_corruption(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(9))
    path = tmp_path / "model.pivt"
    save_checkpoint(path, cfg, params)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ModelError, match="checksum"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.pivt"
    path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(ModelError, match="magic"):
        load_checkpoint(path)


def test_dropout_zero_is_identity_and_scaling_preserves_mean():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 40))
    out, keep = nc._dropout_forward(x, 0.0, rng)
    assert out is x and keep is None
    out, keep = nc._dropout_forward(np.ones((400, 400)), 0.3, rng)
    assert abs(out.mean() - 1.0) < 0.01

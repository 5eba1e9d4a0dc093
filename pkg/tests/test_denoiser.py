import numpy as np
import pytest

from dood.denoiser import (
    DenoiserConfig,
    DenoiserParams,
    backward,
    default_groupnorm_groups,
    forward,
    groupnorm,
    init_params,
    param_names,
)


@pytest.mark.parametrize(
    "hidden,expected",
    [(768, 32), (256, 32), (64, 16), (32, 8), (24, 6), (16, 4), (12, 3), (8, 2),
     (4, 1), (3, 1), (2, 1), (1, 1)],
)
def test_default_groups(hidden, expected):
    g = default_groupnorm_groups(hidden)
    assert g == expected
    assert hidden % g == 0


def test_config_validation():
    with pytest.raises(ValueError, match="equal block counts"):
        DenoiserConfig(input_dim=4, n_input_blocks=2, n_output_blocks=3)
    with pytest.raises(ValueError, match="does not divide"):
        DenoiserConfig(input_dim=4, groupnorm_groups=3)
    cfg = DenoiserConfig(input_dim=6)
    assert cfg.hidden_dim == 6


def _tiny_cfg(c=4, h=4, blocks=1):
    return DenoiserConfig(c, h, blocks, blocks)


def test_init_zero_network_and_determinism(rng):
    cfg = _tiny_cfg()
    p1 = init_params(cfg, np.random.default_rng(3))
    p2 = init_params(cfg, np.random.default_rng(3))
    for k in p1.tensors:
        np.testing.assert_array_equal(p1.tensors[k], p2.tensors[k])
    x = rng.standard_normal((7, 4)).astype(np.float32)
    out = forward(p1, x, 42)
    assert np.all(out == 0.0)
    # non-final weights are drawn, not zero
    assert np.any(p1["input_proj_w"] != 0)
    assert np.any(p1["in0_lin1_w"] != 0)
    # final linears start the residual stream at identity
    assert np.all(p1["in0_lin2_w"] == 0)
    assert np.all(p1["output_proj_w"] == 0)


def _random_params(cfg, seed, scale=0.4):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng).astype(np.float64)
    for k, v in params.tensors.items():
        params.tensors[k] = (
            rng.uniform(0.2, 1.0, v.shape)
            * np.where(rng.random(v.shape) < 0.5, -1.0, 1.0)
            * scale
        )
    return params


def test_param_names_match_init():
    cfg = DenoiserConfig(input_dim=3, hidden_dim=6, n_input_blocks=2, n_output_blocks=2)
    p = init_params(cfg, np.random.default_rng(0))
    assert list(p.tensors.keys()) == param_names(cfg)
    shapes = {k: v.shape for k, v in p.tensors.items()}
    assert shapes["input_proj_w"] == (3, 6)
    assert shapes["in0_lin1_w"] == (6, 6)
    assert shapes["out0_lin1_w"] == (12, 6)  # concatenated skip doubles fan-in
    assert shapes["output_proj_w"] == (6, 3)


def test_batched_forward_equals_rowwise(rng):
    params = _random_params(_tiny_cfg(), 11)
    x = rng.standard_normal((6, 4))
    t = 9
    batched = forward(params, x, t)
    # no coupling across the batch: each row equals its independent forward
    # (up to BLAS accumulation-order ulps, which differ by matmul shape)
    for i in range(6):
        np.testing.assert_allclose(batched[i], forward(params, x[i], t), rtol=1e-12)


def test_permutation_equivariance(rng):
    params = _random_params(_tiny_cfg(), 12)
    x = rng.standard_normal((8, 4))
    perm = rng.permutation(8)
    np.testing.assert_array_equal(forward(params, x, 3)[perm], forward(params, x[perm], 3))


def test_forward_determinism_and_shapes(rng):
    params = _random_params(_tiny_cfg(), 13)
    x = rng.standard_normal((5, 4))
    np.testing.assert_array_equal(forward(params, x, 7), forward(params, x, 7))
    with pytest.raises(ValueError):
        forward(params, np.zeros((5, 3)), 7)
    with pytest.raises(ValueError):
        forward(params, x, 0)
    with pytest.raises(ValueError):
        forward(params, x, np.array([1, 2]))


def test_groupnorm_statistics_and_scale_invariance(rng):
    x = rng.standard_normal((10, 8)) * 3.0 + 1.0
    scale = np.ones(8)
    shift = np.zeros(8)
    out, _ = groupnorm(x, scale, shift, groups=2)
    grouped = out.reshape(10, 2, 4)
    np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(grouped.var(axis=2), 1.0, rtol=1e-4)
    # positive rescaling of the input leaves normalized activations unchanged
    # (up to the eps regularizer in the denominator, worth ~eps/var relative)
    out2, _ = groupnorm(37.5 * x, scale, shift, groups=2)
    np.testing.assert_allclose(out, out2, atol=1e-4)


def test_group_of_one_is_degenerate_constant():
    # why the default group rule avoids size-1 groups
    x = np.random.default_rng(0).standard_normal((4, 4))
    out, _ = groupnorm(x, np.ones(4), np.zeros(4), groups=4)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_scalar_timestep_cancels_in_groupnorm(rng):
    # broadcast-adding the raw timestep before normalization means the
    # network output does not depend on t; pin that consequence down
    params = _random_params(_tiny_cfg(), 14)
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(forward(params, x, 1), forward(params, x, 997), rtol=1e-9)


def test_hand_computed_single_block_reference():
    # straight-line float64 re-implementation, independent of the module
    cfg = DenoiserConfig(input_dim=2, hidden_dim=2, n_input_blocks=1, n_output_blocks=1)
    assert cfg.groupnorm_groups == 1
    vals = {
        "input_proj_w": [[0.3, -0.2], [0.1, 0.4]],
        "input_proj_b": [0.05, -0.1],
        "in0_norm1_scale": [1.1, 0.9],
        "in0_norm1_shift": [0.02, -0.03],
        "in0_lin1_w": [[0.25, -0.15], [0.05, 0.35]],
        "in0_lin1_b": [0.01, 0.02],
        "in0_norm2_scale": [0.95, 1.05],
        "in0_norm2_shift": [-0.01, 0.04],
        "in0_lin2_w": [[0.2, 0.1], [-0.3, 0.15]],
        "in0_lin2_b": [0.03, -0.02],
        "out0_norm1_scale": [1.0, 1.2],
        "out0_norm1_shift": [0.0, 0.01],
        "out0_lin1_w": [[0.12, -0.08], [0.22, 0.18], [-0.05, 0.3], [0.07, -0.25]],
        "out0_lin1_b": [0.02, -0.01],
        "out0_norm2_scale": [1.05, 0.9],
        "out0_norm2_shift": [0.03, 0.0],
        "out0_lin2_w": [[0.15, -0.1], [0.05, 0.25]],
        "out0_lin2_b": [-0.02, 0.01],
        "output_proj_w": [[0.4, 0.2], [-0.1, 0.3]],
        "output_proj_b": [0.05, -0.05],
    }
    params = DenoiserParams(cfg, {k: np.array(v, dtype=np.float64) for k, v in vals.items()})
    x = np.array([0.7, -0.4], dtype=np.float64)
    t = 3.0
    eps_gn = 1e-5

    def gn(v, scale, shift):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + eps_gn) * scale + shift

    def sl(v):
        return v / (1.0 + np.exp(-v))

    w = {k: np.array(v, dtype=np.float64) for k, v in vals.items()}
    h0 = x @ w["input_proj_w"] + w["input_proj_b"]
    a1 = sl(gn(h0, w["in0_norm1_scale"], w["in0_norm1_shift"]))
    z = a1 @ w["in0_lin1_w"] + w["in0_lin1_b"] + t
    a2 = sl(gn(z, w["in0_norm2_scale"], w["in0_norm2_shift"]))
    h1 = h0 + a2 @ w["in0_lin2_w"] + w["in0_lin2_b"]
    # output block: skip (= h1, the last input-block output) is concatenated
    # onto the activated stream right before the widened linear
    b1 = sl(gn(h1, w["out0_norm1_scale"], w["out0_norm1_shift"]))
    zcat = np.concatenate([b1, h1]) @ w["out0_lin1_w"] + w["out0_lin1_b"] + t
    b2 = sl(gn(zcat, w["out0_norm2_scale"], w["out0_norm2_shift"]))
    h2 = h1 + b2 @ w["out0_lin2_w"] + w["out0_lin2_b"]
    expected = h2 @ w["output_proj_w"] + w["output_proj_b"]

    got = forward(params, x, 3)
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_backward_zero_upstream_and_linearity(rng):
    params = _random_params(_tiny_cfg(), 15)
    x = rng.standard_normal((4, 4))
    t = np.array([1, 2, 3, 4])
    zero = np.zeros((4, 4))
    grads, dx = backward(params, x, t, zero)
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(dx == 0)
    g1 = rng.standard_normal((4, 4))
    g2 = rng.standard_normal((4, 4))
    ga, dxa = backward(params, x, t, g1)
    gb, dxb = backward(params, x, t, g2)
    gc, dxc = backward(params, x, t, g1 + g2)
    for k in ga:
        np.testing.assert_allclose(ga[k] + gb[k], gc[k], rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(dxa + dxb, dxc, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck_small_step(seed):
    # regression guard at h=1e-5 where truncation error is negligible
    cfg = DenoiserConfig(input_dim=3, hidden_dim=3, n_input_blocks=2, n_output_blocks=2)
    params = _random_params(cfg, seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((2, 3))
    t = np.array([2, 8])
    g = rng.standard_normal((2, 3))
    grads, dx = backward(params, x, t, g)

    def loss():
        return float(np.sum(forward(params, x, t) * g))

    h = 1e-5
    for name, arr in params.tensors.items():
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[name].ravel()[i]
            assert abs(ana - num) / max(abs(ana), abs(num), 1.0) < 5e-7, name
    for i in range(x.size):
        orig = x.ravel()[i]
        x.ravel()[i] = orig + h
        lp = loss()
        x.ravel()[i] = orig - h
        lm = loss()
        x.ravel()[i] = orig
        num = (lp - lm) / (2 * h)
        ana = dx.ravel()[i]
        assert abs(ana - num) / max(abs(ana), abs(num), 1.0) < 5e-7


def test_check_finite():
    params = _random_params(_tiny_cfg(), 16)
    params.tensors["in0_lin1_w"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        params.check_finite()


def test_astype_and_copy_are_independent():
    params = _random_params(_tiny_cfg(), 17)
    clone = params.copy()
    clone.tensors["input_proj_w"][0, 0] += 1.0
    assert params.tensors["input_proj_w"][0, 0] != clone.tensors["input_proj_w"][0, 0]
    f32 = params.astype(np.float32)
    assert f32.tensors["input_proj_w"].dtype == np.float32

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv_oracle
from nanoconv import numerics, svconv
from nanoconv.errors import InvalidArgument
from nanoconv.svconv import SVConvConfig, assemble_kernel_at, compose_factors, sv_conv_forward


def sv_oracle(x, basis, weights):
    """y_c(p) = sum_q K_p(q) x(p - q) with K_p assembled per pixel."""
    C, R, k, _ = basis.shape
    H, W = x.shape
    c = k // 2
    y = np.zeros((C, H, W))
    for ch in range(C):
        for i in range(H):
            for j in range(W):
                K = assemble_kernel_at(basis, weights, ch, (i, j))
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        si, sj = i - (a - c), j - (b - c)
                        if 0 <= si < H and 0 <= sj < W:
                            acc += K[a, b] * x[si, sj]
                y[ch, i, j] = acc
    return y


def test_config_defaults():
    cfg = SVConvConfig()
    assert (cfg.kernel_size, cfg.rank, cfg.n_factors, cfg.channels_out) == (15, 6, 7, 25)
    si = SVConvConfig(variant="SKSI")
    assert (si.kernel_size, si.rank, si.spatially_varying) == (3, 1, False)


@pytest.mark.parametrize("kwargs", [
    {"variant": "XKSV"}, {"variant": "SKSI", "kernel_size": 15}, {"variant": "LKSI", "rank": 3},
    {"variant": "LKSV", "kernel_size": 3}, {"kernel_size": 14}, {"weight_grid": (0, 4)},
])
def test_config_rejects_inconsistent(kwargs):
    with pytest.raises(InvalidArgument):
        SVConvConfig(**kwargs)


def test_compose_impulses():
    f = np.zeros((7, 3, 3))
    f[:, 1, 1] = 1
    K = compose_factors(f)
    expect = np.zeros((15, 15))
    expect[7, 7] = 1
    assert K.shape == (15, 15) and np.array_equal(K, expect)


def test_compose_matches_sequential_nested_loops(rng, f64):
    f = rng.standard_normal((7, 3, 3))
    ref = f[0]
    for m in range(1, 7):
        ref = conv_oracle(ref, f[m])
    assert np.max(np.abs(compose_factors(f) - ref)) < 1e-5


def test_compose_rejects_empty():
    with pytest.raises(InvalidArgument):
        compose_factors(np.zeros((0, 3, 3)))


def test_assemble_examples(rng):
    B = rng.standard_normal((2, 1, 5, 5))
    W = np.ones((2, 1, 4, 4))
    assert np.array_equal(assemble_kernel_at(B, W, 1, (2, 3)), B[1, 0])
    B = rng.standard_normal((2, 3, 5, 5))
    W = rng.standard_normal((2, 3, 4, 4))
    W[0, :, 1, 1] = 0
    assert not assemble_kernel_at(B, W, 0, (1, 1)).any()
    ref = sum(W[1, r, 3, 0] * B[1, r] for r in reversed(range(3)))
    assert np.allclose(assemble_kernel_at(B, W, 1, (3, 0)), ref)
    with pytest.raises(InvalidArgument):
        assemble_kernel_at(B, W, 0, (4, 0))


def test_si_reduces_to_conv2d(rng):
    x = rng.standard_normal((10, 10)).astype(np.float32)
    B = rng.standard_normal((3, 1, 5, 5)).astype(np.float32)
    y, _ = sv_conv_forward(x, B, np.ones((3, 1, 10, 10), np.float32))
    for c in range(3):
        assert np.allclose(y[0, c], numerics.conv2d(x, B[c, 0]), atol=1e-4)


def test_matches_per_pixel_oracle_100_instances():
    g = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        R = int(g.integers(1, 4))
        k = int(g.choice([3, 5, 7]))
        x = g.standard_normal((12, 12))
        B = g.standard_normal((2, R, k, k))
        W = g.standard_normal((2, R, 12, 12))
        y, _ = sv_conv_forward(x.astype(np.float32), B.astype(np.float32), W.astype(np.float32))
        worst = max(worst, np.max(np.abs(y[0] - sv_oracle(x, B, W))))
    assert worst < 1e-4


def test_default_layer_shape():
    cfg = SVConvConfig()
    p = svconv.make_variant(cfg)
    y, _ = svconv.layer_forward(p, cfg, np.zeros((1, 1, 32, 32), np.float32))
    assert y.shape == (1, 25, 32, 32)


def test_forward_extent_errors(rng):
    with pytest.raises(InvalidArgument):
        sv_conv_forward(np.zeros((8, 8)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 7, 8)))
    with pytest.raises(InvalidArgument):
        sv_conv_forward(np.zeros((1, 2, 8, 8)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 8, 8)))


def test_factorized_equals_composed(rng):
    cfg = SVConvConfig(channels_out=2, height=12, width=12, weight_grid=(3, 3))
    p = svconv.make_variant(cfg, seed=3, dtype=np.float64)
    x = rng.standard_normal((2, 1, 12, 12))
    y1, _ = svconv.layer_forward(p, cfg, x)
    cfg2 = SVConvConfig(channels_out=2, height=12, width=12, weight_grid=(3, 3), factorized=False)
    p2 = {"basis": compose_factors(p["factors"]), "weights": p["weights"]}
    y2, _ = svconv.layer_forward(p2, cfg2, x)
    assert np.linalg.norm(y1 - y2) / np.linalg.norm(y2) < 1e-5


def test_low_rank_identity_reproduces_arbitrary_field(rng):
    H = W = 4
    k = 3
    field = rng.standard_normal((H, W, k, k))
    R = H * W
    basis = field.reshape(1, R, k, k)
    weights = np.zeros((1, R, H, W))
    for r in range(R):
        weights[0, r, r // W, r % W] = 1
    x = rng.standard_normal((H, W))
    y, _ = sv_conv_forward(x, basis, weights)
    ref = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            full = conv_oracle(x, field[i, j])
            ref[i, j] = full[i + 1, j + 1]
    assert np.allclose(y[0, 0], ref, atol=1e-10)


def test_constant_weights_match_si_counterpart(rng):
    sv = SVConvConfig(variant="LKSV", channels_out=2, height=8, width=8, kernel_size=5, weight_grid=(2, 2), rank=1)
    si = SVConvConfig(variant="LKSI", channels_out=2, height=8, width=8, kernel_size=5)
    p = svconv.make_variant(si, seed=1, dtype=np.float64)
    psv = {"factors": p["factors"], "weights": np.ones((2, 1, 2, 2))}
    x = rng.standard_normal((1, 1, 8, 8))
    assert np.allclose(svconv.layer_forward(psv, sv, x)[0], svconv.layer_forward(p, si, x)[0])


def test_vjp_inner_product(rng, f64):
    x = rng.standard_normal((2, 9, 9))
    B = rng.standard_normal((3, 2, 5, 5))
    W = rng.standard_normal((3, 2, 9, 9))
    y, cache = sv_conv_forward(x, B, W)
    cot = rng.standard_normal(y.shape)
    gx, gb, gw = svconv.sv_conv_vjp(cot, cache, need_input_grad=True)
    lhs = np.sum(y * cot)
    assert np.isclose(lhs, np.sum(gx * x))
    assert np.isclose(lhs, np.sum(gb * B))
    assert np.isclose(lhs, np.sum(gw * W))


def test_layer_gradients_fd(rng, f64):
    cfg = SVConvConfig(channels_out=2, height=6, width=6, kernel_size=5, weight_grid=(3, 3), rank=2)
    p = svconv.make_variant(cfg, seed=0, dtype=np.float64)
    x = rng.standard_normal((1, 1, 6, 6))
    y, cache = svconv.layer_forward(p, cfg, x)
    probe = rng.standard_normal(y.shape)
    grads, _ = svconv.layer_backward(probe, p, cache)
    rep = numerics.finite_difference_check(lambda q: np.sum(probe * svconv.layer_forward(q, cfg, x)[0]), p, grads)
    assert rep.passed, str(rep)


def test_make_variant_shapes_and_determinism():
    p = svconv.make_variant(SVConvConfig(variant="SKSI"))
    assert p["factors"].shape == (25, 1, 1, 3, 3) and "weights" not in p
    a = svconv.make_variant(SVConvConfig(), seed=5)
    b = svconv.make_variant(SVConvConfig(), seed=5)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert a["weights"].shape == (25, 6, 14, 14)


def test_lksv_param_count_near_budget():
    n = svconv.param_count(SVConvConfig())
    assert n == 25 * 6 * 7 * 9 + 25 * 6 * 14 * 14
    assert abs(n - 38.92e3) / 38.92e3 < 0.05


def test_init_kernel_norm_near_unit():
    p = svconv.make_variant(SVConvConfig(), seed=0, dtype=np.float64)
    norms = np.linalg.norm(compose_factors(p["factors"]), axis=(-2, -1))
    assert 0.5 < np.mean(norms**2) < 2.0


def test_upsample_corners_and_adjoint(rng):
    coarse = rng.standard_normal((2, 3, 4))
    up = svconv.upsample_weights(coarse, 9, 7)
    assert np.allclose(up[:, 0, 0], coarse[:, 0, 0]) and np.allclose(up[:, -1, -1], coarse[:, -1, -1])
    cot = rng.standard_normal(up.shape)
    assert np.isclose(np.sum(up * cot), np.sum(coarse * svconv.upsample_weights_vjp(cot, (3, 4))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.sampled_from([1, 3, 5]), st.integers(3, 7), st.integers(0, 2**31 - 1))
def test_property_sv_oracle(R, k, n, seed):
    g = np.random.default_rng(seed)
    x = g.standard_normal((n, n))
    B = g.standard_normal((1, R, k, k))
    W = g.standard_normal((1, R, n, n))
    y, _ = sv_conv_forward(x, B, W)
    assert np.allclose(y[0], sv_oracle(x, B, W), atol=1e-9)

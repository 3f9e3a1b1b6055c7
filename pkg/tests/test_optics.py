import numpy as np
import pytest

from nanoconv import numerics
from nanoconv.errors import ConfigurationError, InvalidArgument, NumericalFailure
from nanoconv.optics import design, lens, render
from nanoconv.optics.lens import MetalensSpec, PSFStack, spec_preset


@pytest.fixture(scope="module")
def desk():
    return spec_preset("desk")


@pytest.fixture(scope="module")
def toy():
    return spec_preset("toy")


# --------------------------------------------------------------------------
# Fields and PSFs
# --------------------------------------------------------------------------


def test_incident_field_normal_is_flat(desk):
    f = lens.incident_field(desk, (0.0, 0.0))
    inside = f[lens.aperture_mask(desk)]
    assert np.allclose(inside, 1.0)


def test_incident_field_one_cycle(desk):
    s = desk.wavelength / (desk.grid * desk.pitch)
    f = lens.incident_field(desk, (0.0, np.arcsin(s)), shift_stop=False)
    row = f[desk.grid // 2]
    step = np.angle(row[129] / row[128])
    assert step * desk.grid == pytest.approx(2 * np.pi)


def test_incident_field_energy_independent_of_angle(desk):
    open_count = lens.aperture_mask(desk).sum()
    g = lens.angle_grid(desk)
    for th in g.angles:
        assert np.sum(np.abs(lens.incident_field(desk, th)) ** 2) == pytest.approx(open_count)


def test_angle_outside_field_of_view(desk):
    with pytest.raises(InvalidArgument):
        lens.incident_field(desk, (0.0, 0.5))


def test_sampling_violation_names_pixel_scale():
    bad = MetalensSpec(focal_length=1e-5)
    with pytest.raises(ConfigurationError, match="pixel scale"):
        bad.check_sampling()
    with pytest.raises(ConfigurationError):
        MetalensSpec(grid=200)


def test_zero_phase_peak_at_center(desk):
    c = lens.simulate_psf(desk, np.zeros((desk.grid, desk.grid)), (0.0, 0.0))
    k = desk.kernel_size
    assert np.unravel_index(np.argmax(c), c.shape) == (k // 2, k // 2)


def test_full_plane_energy_normalized(desk):
    g = lens.angle_grid(desk)
    phase = np.random.default_rng(0).uniform(-np.pi, np.pi, (desk.grid, desk.grid))
    for th in g.angles[[0, 4, 8]]:
        I = lens.simulate_psf(desk, phase, th, full=True)
        assert I.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(I >= 0)


def test_phase_ramp_shifts_psf(desk):
    hyp = lens.hyperbolic_phase(desk).phase
    m = 2 * desk.binning  # two sensor pixels
    j = np.arange(desk.grid)
    ramp = 2 * np.pi * m * j / desk.grid
    base = lens.simulate_psf(desk, hyp, (0.0, 0.0), full=True)
    moved = lens.simulate_psf(desk, hyp + ramp[None, :], (0.0, 0.0), full=True)
    assert np.allclose(moved, np.roll(base, m, axis=1), atol=1e-9)
    assert moved.sum() == pytest.approx(base.sum())
    cb = lens.simulate_psf(desk, hyp, (0.0, 0.0))
    cm = lens.simulate_psf(desk, hyp + ramp[None, :], (0.0, 0.0))
    assert np.allclose(cm[:, 2:], cb[:, :-2], atol=1e-9)


def test_hyperbolic_phase(desk):
    p = lens.hyperbolic_phase(desk).phase
    c = desk.grid // 2
    assert p[c, c] == 0.0
    assert np.allclose(p, p.T)
    crop = lens.simulate_psf(desk, p, (0.0, 0.0))
    k = desk.kernel_size // 2
    assert crop[k - 1 : k + 2, k - 1 : k + 2].sum() > 0.6


def test_phase_profile_wrapped():
    pp = lens.PhaseProfile(np.array([[-1.0, 7.0]]), np.ones((1, 2), bool))
    w = pp.wrapped()
    assert np.all((w >= 0) & (w < 2 * np.pi))


def test_walkoff_makes_psfs_angle_dependent(desk):
    """With a recessed stop the off-axis PSF is not a translate of the on-axis one."""
    g = lens.angle_grid(desk)
    phase = np.random.default_rng(1).uniform(-np.pi, np.pi, (desk.grid, desk.grid))
    st = lens.Propagator(desk, g).psf_stack(phase)
    assert np.linalg.norm(st.crops[0] - st.crops[4]) > 0.1 * np.linalg.norm(st.crops[4])


def test_light_efficiency_examples():
    crops = np.zeros((1, 5, 5))
    crops[0, 2, 2] = 1.0
    assert lens.light_efficiency(PSFStack(crops, np.ones(1), np.ones(1)), roi=3) == 1.0
    crops = np.zeros((1, 5, 5))
    crops[0, 2, 2] = 0.5
    crops[0, 0, 0] = 0.5
    assert lens.light_efficiency(PSFStack(crops, np.ones(1), np.ones(1)), roi=3) == 0.5
    with pytest.raises(InvalidArgument):
        PSFStack(-crops, np.ones(1), np.ones(1))


def test_nrmse_examples(rng):
    t = rng.uniform(0, 1, (5, 5))
    assert lens.nrmse(t, t) == 0.0
    assert lens.nrmse(2 * t, t) == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        lens.nrmse(t, np.zeros_like(t))


def test_angle_grid_layout(desk):
    g = lens.angle_grid(desk)
    assert len(g) == 9 and list(g.anchor_rows) == [0, 16, 31]
    assert np.array_equal(g.offsets[4], [0, 0])
    assert np.all(np.abs(g.sines) <= desk.max_sin + 1e-12)


# --------------------------------------------------------------------------
# Inverse design
# --------------------------------------------------------------------------


def test_design_rejects_negative_targets(toy):
    t = np.ones((4, 5, 5))
    t[0, 0, 0] = -1
    with pytest.raises(InvalidArgument):
        design.inverse_design(toy, t, design.DesignOptions(iterations=1))


def test_design_is_deterministic(toy):
    t = np.random.default_rng(0).uniform(0, 1, (4, 5, 5))
    opts = design.DesignOptions(iterations=20, seed=3)
    a = design.inverse_design(toy, t, opts)
    b = design.inverse_design(toy, t, opts)
    assert np.array_equal(a.profile.phase, b.profile.phase)
    assert a.report.loss_trace == b.report.loss_trace


def test_design_reduces_loss_and_reports(toy):
    t = np.random.default_rng(0).uniform(0, 1, (4, 5, 5))
    d = design.inverse_design(toy, t, design.DesignOptions(iterations=150, learning_rate=0.1))
    r = d.report
    assert r.loss_trace[-1] < r.loss_trace[0]
    assert r.mean_nrmse == pytest.approx(np.mean(r.per_angle_nrmse))
    assert d.gains.shape == (4,) and np.all(d.gains > 0)
    # gains restore absolute scale
    assert np.allclose((d.psf.crops * d.gains[:, None, None]).sum(axis=(1, 2)), t.sum(axis=(1, 2)))


def test_design_divergence_raises(toy, monkeypatch):
    t = np.ones((4, 5, 5))

    original = design.DesignObjective.__call__

    def broken(self, phase, need_grad=True):
        loss, g, aux = original(self, phase, need_grad)
        return (np.nan, g, aux) if need_grad else (loss, g, aux)

    monkeypatch.setattr(design.DesignObjective, "__call__", broken)
    with pytest.raises(NumericalFailure, match="diverged"):
        design.inverse_design(toy, t, design.DesignOptions(iterations=3))


def test_design_gradient_fd(toy, f64):
    t = np.random.default_rng(2).uniform(0, 1, (4, 5, 5))
    obj = design.DesignObjective(toy, t, energy_weight=0.5, precision=64)
    phase = np.random.default_rng(3).uniform(-np.pi, np.pi, (toy.grid, toy.grid))
    _, g, _ = obj(phase)
    rep = numerics.finite_difference_check(lambda p: obj(p["phi"], need_grad=False)[0], {"phi": phase}, {"phi": g},
                                           epsilon=1e-5, tolerance=1e-3, max_coords=150)
    assert rep.passed, str(rep)


def test_impulse_target_from_hyperbolic(desk):
    k = desk.kernel_size
    t = np.zeros((9, k, k))
    t[:, k // 2, k // 2] = 1
    d = design.inverse_design(desk, t, design.DesignOptions(iterations=60, initializer="hyperbolic"))
    assert d.report.mean_nrmse < 0.15


def test_initializers(desk):
    z = design.initial_phase(desk, design.DesignOptions(initializer="zero"))
    assert not z.any()
    r1 = design.initial_phase(desk, design.DesignOptions(seed=1))
    r2 = design.initial_phase(desk, design.DesignOptions(seed=1))
    assert np.array_equal(r1, r2)
    with pytest.raises(InvalidArgument):
        design.DesignOptions(initializer="spiral")


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


def test_hat_weights_partition_of_unity():
    w = render.hat_weights(np.array([0, 16, 31]), 32)
    assert np.allclose(w.sum(axis=0), 1.0)
    assert w[0, 0] == 1 and w[1, 16] == 1 and w[2, 31] == 1
    assert np.allclose(render.hat_weights(np.array([3]), 5), 1.0)


def test_render_impulse_psfs_reproduce_image(desk, rng):
    g = lens.angle_grid(desk)
    k = desk.kernel_size
    psfs = np.zeros((4, len(g), k, k))
    psfs[:, :, k // 2, k // 2] = 1
    psfs[1] *= 0.25
    psfs[3] = 0
    x = rng.uniform(0, 1, (2, 1, 32, 32))
    out = render.render_features([None] * 4, x, desk, psfs=psfs, grid=g)
    assert np.allclose(out[:, 0], 0.75 * x[:, 0])
    assert np.allclose(out[:, 1], x[:, 0])


@pytest.mark.parametrize("method", ["anchor", "tap"])
def test_render_angle_constant_matches_conv2d(desk, rng, method):
    g = lens.angle_grid(desk)
    k = desk.kernel_size
    kern = rng.uniform(0, 1, (k, k))
    psfs = np.broadcast_to(kern, (1, len(g), k, k)).copy()
    x = rng.uniform(0, 1, (2, 32, 32))
    out = render.render_from_psfs(psfs, x, g, method)
    for n in range(2):
        assert np.max(np.abs(out[n, 0] - numerics.conv2d(x[n], kern))) < 1e-4


def test_render_methods_agree(desk, rng):
    g = lens.angle_grid(desk)
    psfs = rng.uniform(0, 1, (3, len(g), 15, 15))
    x = rng.uniform(0, 1, (2, 32, 32))
    a = render.render_from_psfs(psfs, x, g, "anchor")
    b = render.render_from_psfs(psfs, x, g, "tap")
    assert np.allclose(a, b, atol=1e-9)


def test_render_scatter_definition(toy, rng):
    """Each source pixel spreads with its own interpolated PSF."""
    spec = MetalensSpec(grid=32, binning=1, kernel_size=3, feature_shape=(6, 6), angles_per_axis=2,
                        stop_distance=0)
    g = lens.angle_grid(spec)
    psfs = rng.uniform(0, 1, (1, len(g), 3, 3))
    x = rng.uniform(0, 1, (6, 6))
    beta = render.anchor_weights(g, 6, 6)
    ref = np.zeros((8, 8))
    for i in range(6):
        for j in range(6):
            K = np.tensordot(beta[:, i, j], psfs[0], axes=(0, 0))
            ref[i : i + 3, j : j + 3] += x[i, j] * K
    got = render.render_from_psfs(psfs, x, g)
    assert np.allclose(got[0, 0], ref[1:7, 1:7])


def test_render_errors(desk, rng):
    g = lens.angle_grid(desk)
    with pytest.raises(InvalidArgument):
        render.render_features([None] * 3, np.zeros((1, 32, 32)), desk, psfs=np.zeros((3, 9, 15, 15)))
    with pytest.raises(InvalidArgument):
        render.render_from_psfs(np.zeros((2, 4, 15, 15)), np.zeros((1, 32, 32)), g)
    with pytest.raises(InvalidArgument):
        render.render_from_psfs(np.zeros((2, 9, 15, 15)), np.zeros((1, 32, 32)), g, method="fft")


def test_render_noise_is_seeded(desk, rng):
    psfs = rng.uniform(0, 1, (2, 9, 15, 15))
    x = rng.uniform(0, 1, (1, 32, 32))
    a = render.render_features([None] * 2, x, desk, psfs=psfs, noise_std=0.1, seed=4)
    b = render.render_features([None] * 2, x, desk, psfs=psfs, noise_std=0.1, seed=4)
    c = render.render_features([None] * 2, x, desk, psfs=psfs)
    assert np.array_equal(a, b) and not np.allclose(a, c)


def test_simulated_psf_stacks_match_propagator(toy):
    phase = np.random.default_rng(0).uniform(-1, 1, (toy.grid, toy.grid))
    st = lens.Propagator(toy).psf_stack(phase)
    got = render.simulate_psf_stacks([lens.PhaseProfile(phase, lens.aperture_mask(toy))], toy)
    assert np.allclose(got[0], st.crops, atol=1e-6)


def test_feature_nrmse_pooled_and_per_channel():
    ref = np.ones((2, 2, 3, 3))
    ref[:, 1] *= 3
    est = ref.copy()
    est[:, 0] *= 1.1
    r = render.feature_nrmse(est, ref)
    assert np.allclose(r["per_channel"], [0.1, 0.0])
    assert r["mean"] == pytest.approx(0.05)
    assert r["pooled"] == pytest.approx(0.1 / np.sqrt(10))

"""Finite-difference suites for every hand-written adjoint, on toy extents in 64-bit."""

from __future__ import annotations

import time

import numpy as np

from . import model, numerics, svconv
from .numerics import GradCheckReport, conv2d, conv2d_vjp, finite_difference_check
from .optics.design import DesignObjective
from .optics.lens import angle_grid, spec_preset
from .regularization import RegularizerWeights, spectrum_penalty, tv_isotropic

TOLERANCE = 1e-4
OPTICS_TOLERANCE = 1e-3


def _linear_probe(rng, shape):
    """Random cotangent so a tensor-valued map becomes a scalar objective."""
    return rng.standard_normal(shape)


def check_conv2d(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = {}
    for mode in ("same", "full", "valid"):
        x = rng.standard_normal((7, 6))
        k = rng.standard_normal((3, 5))
        y = conv2d(x, k, mode)
        probe = _linear_probe(rng, y.shape)
        gx, gk = conv2d_vjp(probe, x, k, mode)
        params = {"x": x, "k": k}
        out[f"conv2d[{mode}]"] = finite_difference_check(
            lambda p: np.sum(probe * conv2d(p["x"], p["k"], mode)), params, {"x": gx, "k": gk}, tolerance=TOLERANCE
        )
    return out


def check_compose_factors(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 3, 3, 3)) / 3
    probe = _linear_probe(rng, svconv.compose_factors(f).shape)
    g = svconv.compose_factors_vjp(probe, f)
    rep = finite_difference_check(lambda p: np.sum(probe * svconv.compose_factors(p["f"])), {"f": f}, {"f": g},
                                  tolerance=TOLERANCE)
    return {"compose_factors": rep}


def check_sv_conv(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 1, 6, 6))
    basis = rng.standard_normal((2, 3, 3, 3))
    weights = rng.standard_normal((2, 3, 6, 6))
    y, cache = svconv.sv_conv_forward(x, basis, weights)
    probe = _linear_probe(rng, y.shape)
    gx, gb, gw = svconv.sv_conv_vjp(probe, cache, need_input_grad=True)
    params = {"x": x, "basis": basis, "weights": weights}

    def obj(p):
        return np.sum(probe * svconv.sv_conv_forward(p["x"], p["basis"], p["weights"])[0])

    rep = finite_difference_check(obj, params, {"x": gx.reshape(x.shape), "basis": gb, "weights": gw},
                                  tolerance=TOLERANCE)
    return {"sv_conv": rep}


def check_regularizers(seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    out = {}
    maps = rng.standard_normal((2, 3, 5, 5))
    for boundary in ("neumann", "periodic"):
        _, g = tv_isotropic(maps, 1e-3, boundary)
        out[f"tv[{boundary}]"] = finite_difference_check(
            lambda p: tv_isotropic(p["maps"], 1e-3, boundary)[0], {"maps": maps}, {"maps": g}, tolerance=TOLERANCE
        )
    w = RegularizerWeights(lambda_tv=0.0, lambda_spec_highpass=1.0, lambda_spec_cond=0.5, pad=16)
    kern = rng.standard_normal((2, 5, 5))
    _, g = spectrum_penalty(kern, w)
    out["spectrum_penalty"] = finite_difference_check(
        lambda p: spectrum_penalty(p["k"], w)[0], {"k": kern}, {"k": g}, tolerance=TOLERANCE
    )
    return out


def check_loss(seed: int = 0) -> dict[str, GradCheckReport]:
    config = model.preset("toy")
    params = model.init_params(config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
    images = rng.uniform(0, 1, (4, 1, config.stem.height, config.stem.width))
    labels = rng.integers(0, config.classes, 4)
    regs = RegularizerWeights(lambda_tv=1e-2, lambda_spec_highpass=1e-2, lambda_spec_cond=1e-3, pad=16)
    _, grads, _ = model.loss_and_grads(params, config, images, labels, regs)
    rep = finite_difference_check(lambda p: model.loss_and_grads(p, config, images, labels, regs)[0],
                                  params, grads, tolerance=TOLERANCE, max_coords=40, seed=seed)
    return {"loss_and_grads": rep}


def check_design(seed: int = 0) -> dict[str, GradCheckReport]:
    spec = spec_preset("toy")
    grid = angle_grid(spec)
    rng = np.random.default_rng(seed)
    k = spec.kernel_size
    targets = rng.uniform(0, 1, (len(grid), k, k))
    obj = DesignObjective(spec, targets, energy_weight=0.3, grid=grid, precision=64)
    phase = rng.uniform(-np.pi, np.pi, (spec.grid, spec.grid))
    _, g, _ = obj(phase)
    rep = finite_difference_check(lambda p: obj(p["phase"], need_grad=False)[0], {"phase": phase}, {"phase": g},
                                  epsilon=1e-5, tolerance=OPTICS_TOLERANCE, max_coords=200, seed=seed)
    return {"inverse_design": rep}


SUITES = {
    "conv2d": check_conv2d,
    "compose_factors": check_compose_factors,
    "sv_conv": check_sv_conv,
    "regularizers": check_regularizers,
    "loss_and_grads": check_loss,
    "inverse_design": check_design,
}


def run_all(seed: int = 0, suites=None) -> list[dict]:
    """Run the named suites (all by default) in 64-bit mode; one row per check."""
    rows = []
    with numerics.precision(64):
        for name in suites or SUITES:
            t0 = time.perf_counter()
            reports = SUITES[name](seed)
            dt = time.perf_counter() - t0
            for check, rep in reports.items():
                rows.append({"suite": name, "check": check, "max_rel_error": rep.max_error,
                             "tolerance": rep.tolerance, "passed": rep.passed, "seconds": dt})
    return rows

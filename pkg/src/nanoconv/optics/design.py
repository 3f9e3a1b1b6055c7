"""Gradient-based inverse design of a phase profile against per-angle target kernels.

Design loss for one lens, over the angles whose target is non-zero::

    mean_a ||c_a/sum(c_a) - t_a/sum(t_a)||^2 / ||t_a/sum(t_a)||^2
      + energy_weight * (1 - mean_a roi_energy_a)

where ``c_a`` is the binned PSF crop. The shape term is a squared NRMSE on
sum-normalized kernels, so it is blind to how much light lands in the ROI;
the energy term is what pulls light in. The per-angle gain
``sum(t_a)/sum(c_a)`` that restores absolute kernel amplitude is recorded
for feature rendering.

Gradients flow through the FFT by its adjoint (the inverse unitary FFT).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import InvalidArgument, NumericalFailure
from .lens import AngleGrid, MetalensSpec, PhaseProfile, Propagator, PSFStack, angle_grid, aperture_mask, hyperbolic_phase, nrmse

logger = logging.getLogger(__name__)

INITIALIZERS = ("random", "hyperbolic", "zero")


@dataclass(frozen=True)
class DesignOptions:
    iterations: int = 2000
    learning_rate: float = 0.05
    energy_weight: float = 0.0
    initializer: str = "random"
    init_smoothing: float = 2.0  # gaussian sigma (samples) of the random initial phase
    init_amplitude: float = np.pi
    seed: int = 0
    tolerance: float = 0.0  # stop when the loss improves less than this over `patience` iterations
    patience: int = 200
    precision: int = 32

    def __post_init__(self):
        if self.initializer not in INITIALIZERS:
            raise InvalidArgument(f"unknown initializer {self.initializer!r}")
        if self.iterations < 0 or self.learning_rate <= 0 or self.energy_weight < 0:
            raise InvalidArgument("iterations >= 0, learning rate > 0 and energy weight >= 0 required")


@dataclass
class DesignReport:
    per_angle_nrmse: np.ndarray
    efficiency_before: float
    efficiency_after: float
    loss_trace: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def mean_nrmse(self) -> float:
        finite = self.per_angle_nrmse[np.isfinite(self.per_angle_nrmse)]
        return float(finite.mean()) if finite.size else float("nan")


@dataclass
class DesignedLens:
    profile: PhaseProfile
    report: DesignReport
    psf: PSFStack
    gains: np.ndarray  # (A,) sum(target)/sum(crop), 0 where the target is dark
    target_sums: np.ndarray


def initial_phase(spec: MetalensSpec, options: DesignOptions) -> np.ndarray:
    if options.initializer == "hyperbolic":
        return hyperbolic_phase(spec).phase
    if options.initializer == "zero":
        return np.zeros((spec.grid, spec.grid))
    rng = np.random.default_rng(options.seed)
    noise = rng.standard_normal((spec.grid, spec.grid))
    if options.init_smoothing > 0:
        noise = gaussian_filter(noise, options.init_smoothing, mode="wrap")
    noise /= noise.std() + 1e-30
    return options.init_amplitude * noise


class DesignObjective:
    """Loss and phase gradient for one lens, reusable across iterations."""

    def __init__(self, spec: MetalensSpec, targets: np.ndarray, energy_weight: float = 0.0,
                 grid: AngleGrid | None = None, precision: int = 64):
        grid = grid if grid is not None else angle_grid(spec)
        targets = np.asarray(targets, dtype=np.float64)
        k = spec.kernel_size
        if targets.shape != (len(grid), k, k):
            raise InvalidArgument(f"targets must be ({len(grid)}, {k}, {k}), got {targets.shape}")
        if np.any(targets < 0) or not np.all(np.isfinite(targets)):
            raise InvalidArgument("design targets must be finite and non-negative (use pair_decompose)")
        self.prop = Propagator(spec, grid, np.complex64 if precision == 32 else np.complex128)
        self.energy_weight = energy_weight
        self.target_sums = targets.sum(axis=(1, 2))
        self.valid = self.target_sums > 0
        safe = np.where(self.valid, self.target_sums, 1.0)
        self.t_hat = targets / safe[:, None, None]
        self.t_norm2 = np.where(self.valid, np.sum(self.t_hat**2, axis=(1, 2)), 1.0)
        self.n_valid = max(int(self.valid.sum()), 1)

    def __call__(self, phase: np.ndarray, need_grad: bool = True):
        prop = self.prop
        I, E, U = prop.intensity(phase[None])
        c = prop.crops(I).astype(np.float64)
        s = c.sum(axis=(1, 2))
        s_safe = np.where(s > 0, s, 1.0)
        c_hat = c / s_safe[:, None, None]
        diff = c_hat - self.t_hat
        per = np.sum(diff**2, axis=(1, 2)) / self.t_norm2
        shape_loss = float(np.sum(per * self.valid) / self.n_valid)
        roi = prop.roi_energy(I)
        eff = float(np.mean(roi))
        loss = shape_loss + self.energy_weight * (1.0 - eff)
        aux = {"crops": c, "roi": roi, "shape": shape_loss, "efficiency": eff, "intensity": I}
        if not need_grad:
            return loss, None, aux
        g_hat = (2.0 / self.n_valid) * diff * (self.valid / self.t_norm2)[:, None, None]
        # d/dc of c/sum(c)
        g_c = (g_hat - np.sum(g_hat * c_hat, axis=(1, 2))[:, None, None]) / s_safe[:, None, None]
        g_I = prop.crops_adjoint(g_c.astype(I.dtype), I.shape)
        if self.energy_weight:
            g_I += prop.roi_adjoint(np.full(len(roi), -self.energy_weight / len(roi)), I.shape).astype(I.dtype)
        B = prop.focal_field_adjoint(g_I * U)
        g_phase = -2.0 * np.imag(E * np.conj(B)).sum(axis=0)
        return loss, g_phase.astype(np.float64), aux


def inverse_design(spec: MetalensSpec, targets: np.ndarray, options: DesignOptions = DesignOptions(),
                   grid: AngleGrid | None = None) -> DesignedLens:
    """Optimize a phase profile so the per-angle PSFs match ``targets`` (A, k, k).

    Adam on the per-sample phase; deterministic for a fixed seed/initializer.
    """
    grid = grid if grid is not None else angle_grid(spec)
    objective = DesignObjective(spec, targets, options.energy_weight, grid, options.precision)
    phase = initial_phase(spec, options).astype(np.float64)
    _, _, aux0 = objective(phase, need_grad=False)
    eff0 = aux0["efficiency"]
    m = np.zeros_like(phase)
    v = np.zeros_like(phase)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace: list[float] = []
    best = np.inf
    since = 0
    it = 0
    for it in range(1, options.iterations + 1):
        loss, g, _ = objective(phase)
        trace.append(loss)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericalFailure(f"inverse design diverged at iteration {it}; loss trace tail {trace[-5:]}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        phase -= options.learning_rate * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps)
        if options.tolerance > 0:
            if loss < best - options.tolerance:
                best, since = loss, 0
            else:
                since += 1
                if since >= options.patience:
                    break
    loss, _, aux = objective(phase, need_grad=False)
    trace.append(loss)
    crops = aux["crops"]
    sums = crops.sum(axis=(1, 2))
    per = np.full(len(grid), np.nan)
    for a in np.flatnonzero(objective.valid):
        per[a] = nrmse(crops[a] / sums[a] * objective.target_sums[a], objective.t_hat[a] * objective.target_sums[a])
    gains = np.where(objective.valid & (sums > 0), objective.target_sums / np.where(sums > 0, sums, 1.0), 0.0)
    I = aux["intensity"]
    stack = PSFStack(crops, I.sum(axis=(1, 2)).astype(np.float64), aux["roi"])
    report = DesignReport(per, eff0, aux["efficiency"], trace, it)
    logger.info("design: %d iters, mean NRMSE %.4f, efficiency %.3f -> %.3f",
                it, report.mean_nrmse, eff0, aux["efficiency"])
    return DesignedLens(PhaseProfile(phase, aperture_mask(spec)), report, stack, gains, objective.target_sums)

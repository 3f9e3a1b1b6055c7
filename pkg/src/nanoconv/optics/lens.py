"""Scalar Fourier-optics model of a single metalens.

The focal-plane field is a single-FFT Fresnel transform of the aperture
field::

    U = FFT{ A_theta * exp(i*phi) * exp(i*2*pi*(u*sin(tx) + v*sin(ty))/lambda)
             * exp(i*pi*(u^2+v^2)/(lambda*f)) [* exp(i*pi*(u^2+v^2)/(lambda*z_obj))] }

with output pixel ``lambda*f/(N*pitch)``. ``A_theta`` is the circular stop
footprint on the metasurface. The stop sits ``stop_distance`` in front of the
metasurface (inside a substrate of index ``substrate_index``), so an oblique
beam lands on a laterally shifted patch of the phase profile. That walk-off
is what lets one phase profile produce different PSFs at different angles;
with ``stop_distance == 0`` the PSF of every angle is a pure translation of
the on-axis PSF.

Sensor geometry: one sensor pixel (= one feature pixel) is ``binning x
binning`` native output pixels. Feature pixel ``(row, col)`` of an
``H x W`` map images at native offset ``((row - H//2)*b, (col - W//2)*b)``
from the optical axis, which fixes the incident angle of every pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from ..errors import ConfigurationError, InvalidArgument


@dataclass(frozen=True)
class MetalensSpec:
    wavelength: float = 525e-9
    pitch: float = 350e-9
    grid: int = 256
    focal_length: float = 1e-3
    object_distance: float = math.inf
    aperture_fraction: float = 0.75
    stop_distance: float = 30e-6
    substrate_index: float = 1.46
    binning: int = 5
    kernel_size: int = 15
    roi_size: int | None = None
    feature_shape: tuple[int, int] = (32, 32)
    angles_per_axis: int = 3

    def __post_init__(self):
        object.__setattr__(self, "feature_shape", tuple(int(v) for v in self.feature_shape))
        if self.roi_size is None:
            object.__setattr__(self, "roi_size", self.kernel_size)
        if min(self.wavelength, self.pitch, self.focal_length) <= 0:
            raise ConfigurationError("wavelength, pitch and focal length must be positive")
        if self.grid < 2 or self.grid & (self.grid - 1):
            raise ConfigurationError(f"aperture grid extent must be a power of two, got {self.grid}")
        if self.binning < 1 or self.binning % 2 == 0:
            raise ConfigurationError(f"binning factor must be a positive odd integer, got {self.binning}")
        if self.kernel_size % 2 == 0 or self.roi_size % 2 == 0 or self.roi_size > self.kernel_size:
            raise ConfigurationError("kernel and ROI extents must be odd with ROI <= kernel")
        if not 0 < self.aperture_fraction <= 1:
            raise ConfigurationError("aperture fraction must lie in (0, 1]")
        if self.stop_distance < 0 or self.substrate_index < 1:
            raise ConfigurationError("stop distance must be >= 0 and substrate index >= 1")
        if self.angles_per_axis < 1:
            raise ConfigurationError("need at least one angle per axis")

    @property
    def native_pixel(self) -> float:
        """Output-plane sample spacing ``lambda*f/(N*pitch)`` in meters."""
        return self.wavelength * self.focal_length / (self.grid * self.pitch)

    @property
    def sensor_pixel(self) -> float:
        return self.binning * self.native_pixel

    def check_sampling(self) -> None:
        """Raise ConfigurationError unless the Fresnel chirp and every crop fit the grid."""
        chirp = self.grid * self.pitch**2 / (self.wavelength * self.focal_length)
        if chirp > 1.0:
            raise ConfigurationError(
                f"Fresnel sampling violated: N*pitch^2/(lambda*f) = {chirp:.3f} > 1 "
                f"(output pixel scale {self.native_pixel:.3e} m)"
            )
        H, W = self.feature_shape
        reach = max(H // 2, H - 1 - H // 2, W // 2, W - 1 - W // 2) * self.binning
        half = (self.kernel_size * self.binning) // 2
        if reach + half >= self.grid // 2:
            raise ConfigurationError(
                f"sensor crops exceed the output plane: need {reach + half} native pixels "
                f"from the axis but only {self.grid // 2} are available "
                f"(output pixel scale {self.native_pixel:.3e} m)"
            )

    @property
    def max_sin(self) -> float:
        H, W = self.feature_shape
        reach = max(H // 2, H - 1 - H // 2, W // 2, W - 1 - W // 2) * self.binning
        return reach * self.native_pixel / self.focal_length


def spec_preset(name: str) -> MetalensSpec:
    """``desk`` (256 grid, 3x3 angles), ``full`` (512 grid, 32x32 angles), ``toy`` (32 grid)."""
    name = name.lower()
    if name == "desk":
        return MetalensSpec()
    if name == "full":
        return MetalensSpec(grid=512, angles_per_axis=32, stop_distance=100e-6)
    if name == "toy":
        return MetalensSpec(grid=32, binning=1, kernel_size=5, feature_shape=(4, 4), angles_per_axis=2,
                            stop_distance=2e-6)
    raise InvalidArgument(f"unknown optics preset {name!r}")


@dataclass(frozen=True)
class AngleGrid:
    """Incident angles anchored at feature pixels, ordered row-major."""

    anchor_rows: np.ndarray
    anchor_cols: np.ndarray
    offsets: np.ndarray  # (A, 2) native-pixel offsets (dy, dx) of the nominal image points
    sines: np.ndarray  # (A, 2) (sin ty, sin tx)

    @property
    def angles(self) -> np.ndarray:
        """(A, 2) array of (theta_y, theta_x) in radians."""
        return np.arcsin(self.sines)

    def __len__(self) -> int:
        return len(self.offsets)


def angle_grid(spec: MetalensSpec, per_axis: int | None = None) -> AngleGrid:
    n = per_axis or spec.angles_per_axis
    H, W = spec.feature_shape
    rows = np.unique(np.round(np.linspace(0, H - 1, n)).astype(int))
    cols = np.unique(np.round(np.linspace(0, W - 1, n)).astype(int))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    offsets = np.stack([(rr.ravel() - H // 2) * spec.binning, (cc.ravel() - W // 2) * spec.binning], axis=1)
    sines = offsets * spec.native_pixel / spec.focal_length
    return AngleGrid(rows, cols, offsets, sines)


@dataclass
class PhaseProfile:
    phase: np.ndarray  # radians, (N, N)
    aperture: np.ndarray  # bool, on-axis stop footprint

    def wrapped(self) -> np.ndarray:
        return np.mod(self.phase, 2 * np.pi)


@dataclass
class PSFStack:
    """Per-angle binned PSF crops plus energy bookkeeping (relative to transmitted energy)."""

    crops: np.ndarray  # (A, k, k)
    transmitted: np.ndarray  # (A,) full-plane energy, 1 by normalization
    roi_energy: np.ndarray  # (A,)

    def __post_init__(self):
        if np.any(self.crops < 0):
            raise InvalidArgument("PSF entries must be non-negative")


def coordinates(spec: MetalensSpec) -> np.ndarray:
    """Aperture-plane coordinate vector in meters (index N/2 is the optical axis)."""
    return (np.arange(spec.grid) - spec.grid // 2) * spec.pitch


def walkoff_samples(spec: MetalensSpec, sines) -> np.ndarray:
    """Integer-sample lateral shift of the stop footprint for each (sin ty, sin tx)."""
    s = np.asarray(sines, dtype=np.float64) / spec.substrate_index
    shift = spec.stop_distance * s / np.sqrt(1.0 - s * s) / spec.pitch
    return np.round(shift).astype(int)


def aperture_mask(spec: MetalensSpec, shift=(0, 0)) -> np.ndarray:
    n = np.arange(spec.grid) - spec.grid // 2
    radius = spec.aperture_fraction * spec.grid / 2
    dy = n[:, None] - shift[0]
    dx = n[None, :] - shift[1]
    return dy * dy + dx * dx <= radius * radius


def _check_angle(spec: MetalensSpec, sines) -> None:
    if np.any(np.abs(np.asarray(sines)) > spec.max_sin * (1 + 1e-9) + 1e-15):
        raise InvalidArgument(f"incident angle outside the field of view (|sin| <= {spec.max_sin:.4f})")


def incident_field(spec: MetalensSpec, angle, shift_stop: bool = True) -> np.ndarray:
    """Unit-amplitude incident field on the metasurface inside the stop footprint.

    ``angle`` is ``(theta_y, theta_x)`` in radians. For a finite object
    distance a quadratic phase ``pi*(u^2+v^2)/(lambda*z_obj)`` is added.
    """
    sines = np.sin(np.asarray(angle, dtype=np.float64))
    _check_angle(spec, sines)
    u = coordinates(spec)
    shift = walkoff_samples(spec, sines) if shift_stop else (0, 0)
    mask = aperture_mask(spec, shift)
    phase = 2 * np.pi * (u[:, None] * sines[0] + u[None, :] * sines[1]) / spec.wavelength
    if math.isfinite(spec.object_distance):
        phase = phase + np.pi * (u[:, None] ** 2 + u[None, :] ** 2) / (spec.wavelength * spec.object_distance)
    return mask * np.exp(1j * phase)


def fresnel_phase(spec: MetalensSpec) -> np.ndarray:
    u = coordinates(spec)
    return np.pi * (u[:, None] ** 2 + u[None, :] ** 2) / (spec.wavelength * spec.focal_length)


def hyperbolic_phase(spec: MetalensSpec) -> PhaseProfile:
    """Ideal focusing phase ``-(2*pi/lambda)*(sqrt(u^2+v^2+f^2) - f)``."""
    u = coordinates(spec)
    r2 = u[:, None] ** 2 + u[None, :] ** 2
    f = spec.focal_length
    phase = -(2 * np.pi / spec.wavelength) * (np.sqrt(r2 + f * f) - f)
    return PhaseProfile(phase, aperture_mask(spec))


class Propagator:
    """Precomputed per-angle aperture fields for repeated PSF evaluation.

    ``fields[a] = A_a * exp(i*(tilt_a + fresnel [+ object]))``; the lens
    phase multiplies these. Normalization makes every full-plane PSF sum to 1.
    """

    def __init__(self, spec: MetalensSpec, grid: AngleGrid | None = None, dtype=np.complex128):
        spec.check_sampling()
        self.spec = spec
        self.grid = grid if grid is not None else angle_grid(spec)
        self.dtype = np.dtype(dtype)
        fres = np.exp(1j * fresnel_phase(spec))
        fields = []
        for th in self.grid.angles:
            fields.append(incident_field(spec, th) * fres)
        self.fields = np.asarray(fields, dtype=self.dtype)
        self.counts = np.abs(self.fields).astype(bool).sum(axis=(1, 2)).astype(np.float64)
        self.scale = (1.0 / np.sqrt(self.counts)).astype(self.fields.real.dtype)
        b, k = spec.binning, spec.kernel_size
        half = (k * b) // 2
        c = spec.grid // 2
        self.windows = [
            (c + int(dy) - half, c + int(dx) - half) for dy, dx in self.grid.offsets
        ]
        self.extent = k * b
        rh = (spec.roi_size * b) // 2
        self.roi_windows = [(c + int(dy) - rh, c + int(dx) - rh) for dy, dx in self.grid.offsets]
        self.roi_extent = spec.roi_size * b

    def aperture_field(self, phase: np.ndarray) -> np.ndarray:
        return self.fields * np.exp(1j * phase).astype(self.dtype)

    def focal_field(self, E: np.ndarray) -> np.ndarray:
        U = sfft.fft2(E, norm="ortho")
        U *= self.scale[:, None, None]
        return sfft.fftshift(U, axes=(-2, -1))

    def focal_field_adjoint(self, G: np.ndarray) -> np.ndarray:
        G = sfft.ifftshift(G, axes=(-2, -1)) * self.scale[:, None, None]
        return sfft.ifft2(G, norm="ortho")

    def intensity(self, phase: np.ndarray):
        E = self.aperture_field(phase)
        U = self.focal_field(E)
        return (U.real**2 + U.imag**2), E, U

    def crops(self, intensity: np.ndarray) -> np.ndarray:
        """Binned k x k crops around each nominal image point, shape (A, k, k)."""
        b, k, n = self.spec.binning, self.spec.kernel_size, self.extent
        out = np.empty((len(self.windows), k, k), dtype=intensity.dtype)
        for a, (r, c) in enumerate(self.windows):
            out[a] = intensity[a, r : r + n, c : c + n].reshape(k, b, k, b).sum(axis=(1, 3))
        return out

    def crops_adjoint(self, g: np.ndarray, shape) -> np.ndarray:
        b, n = self.spec.binning, self.extent
        out = np.zeros(shape, dtype=g.dtype)
        for a, (r, c) in enumerate(self.windows):
            out[a, r : r + n, c : c + n] = np.repeat(np.repeat(g[a], b, axis=0), b, axis=1)
        return out

    def roi_energy(self, intensity: np.ndarray) -> np.ndarray:
        n = self.roi_extent
        return np.array([intensity[a, r : r + n, c : c + n].sum() for a, (r, c) in enumerate(self.roi_windows)])

    def roi_adjoint(self, g: np.ndarray, shape) -> np.ndarray:
        n = self.roi_extent
        out = np.zeros(shape, dtype=np.result_type(g, np.float32))
        for a, (r, c) in enumerate(self.roi_windows):
            out[a, r : r + n, c : c + n] = g[a]
        return out

    def psf_stack(self, phase: np.ndarray) -> PSFStack:
        I, _, _ = self.intensity(phase)
        return PSFStack(self.crops(I).astype(np.float64), I.sum(axis=(1, 2)).astype(np.float64), self.roi_energy(I))


def simulate_psf(spec: MetalensSpec, phase: PhaseProfile | np.ndarray, angle, full: bool = False) -> np.ndarray:
    """Non-negative PSF for one incident angle ``(theta_y, theta_x)``.

    Returns the binned ``k x k`` crop around the nominal image point, or the
    full centered native-resolution intensity when ``full`` is set. The full
    plane sums to 1 (energy relative to what enters the stop).
    """
    phi = phase.phase if isinstance(phase, PhaseProfile) else np.asarray(phase)
    if phi.shape != (spec.grid, spec.grid):
        raise InvalidArgument(f"phase grid {phi.shape} does not match spec grid {spec.grid}")
    sines = np.sin(np.asarray(angle, dtype=np.float64))
    _check_angle(spec, sines)
    offset = np.round(sines * spec.focal_length / spec.native_pixel).astype(int)
    grid = AngleGrid(np.zeros(1, int), np.zeros(1, int), offset[None, :], sines[None, :])
    prop = Propagator(spec, grid)
    I, _, _ = prop.intensity(phi[None])
    return I[0] if full else prop.crops(I)[0]


def light_efficiency(stack: PSFStack, roi: int | None = None) -> float:
    """Mean over angles of (energy inside the ROI) / (transmitted energy).

    With ``roi`` given, the ROI is the central ``roi x roi`` block of each crop;
    otherwise the stack's stored ROI energy is used.
    """
    if roi is None:
        inside = stack.roi_energy
    else:
        k = stack.crops.shape[-1]
        if roi > k or roi % 2 == 0:
            raise InvalidArgument(f"ROI {roi} must be odd and within the {k}x{k} crop")
        m = (k - roi) // 2
        inside = stack.crops[:, m : m + roi, m : m + roi].sum(axis=(1, 2))
    return float(np.mean(inside / stack.transmitted))


def nrmse(estimate: np.ndarray, target: np.ndarray) -> float:
    """``||estimate - target|| / ||target||``."""
    estimate = np.asarray(estimate, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if estimate.shape != target.shape:
        raise InvalidArgument(f"shape mismatch {estimate.shape} vs {target.shape}")
    norm = np.linalg.norm(target)
    if norm == 0:
        raise InvalidArgument("NRMSE is undefined for a zero-norm target")
    return float(np.linalg.norm(estimate - target) / norm)

"""Metalens simulation, inverse design and simulated optical capture."""

from .design import DesignedLens, DesignOptions, DesignReport, inverse_design
from .lens import (
    AngleGrid,
    MetalensSpec,
    PhaseProfile,
    PSFStack,
    angle_grid,
    hyperbolic_phase,
    incident_field,
    light_efficiency,
    nrmse,
    simulate_psf,
    spec_preset,
)

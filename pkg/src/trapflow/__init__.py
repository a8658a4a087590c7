"""Diffusions with stiff trapping drift on the 2-torus: simulation, limit process and PDE."""

from .geometry import DiskTrap, Region, Scene, TorusPoint, classify, load_scene, sdist
from .trapfield import (BoundaryMeasure, FieldSpec, TrapProfile, eval_field, exit_measure,
                        inflow, nu_measure, quasi_potential, v_thresholds)

__version__ = "0.1.0"

__all__ = [
    "BoundaryMeasure", "DiskTrap", "FieldSpec", "Region", "Scene", "TorusPoint", "TrapProfile",
    "classify", "eval_field", "exit_measure", "inflow", "load_scene", "nu_measure",
    "quasi_potential", "sdist", "v_thresholds", "__version__",
]

"""H-infinity loop-shaping toolkit for wind-turbine power maximization and tracking."""

from .equilibrium import (OperatingPoint, equilibrium_region2, equilibrium_region3,
                          cp_maximizer)
from .linearize import StateSpaceModel, linearize_at
from .loopshape import SynthesisResult, WeightSpec, synthesize
from .model import TurbineParams, WindScenario

__version__ = "0.1.0"

__all__ = [
    "OperatingPoint", "StateSpaceModel", "SynthesisResult", "TurbineParams",
    "WeightSpec", "WindScenario", "cp_maximizer", "equilibrium_region2",
    "equilibrium_region3", "linearize_at", "synthesize",
]

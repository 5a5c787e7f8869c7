"""Synthesis and simulation toolkit for boundary-controlled hyperbolic
ODE-PDE-ODE systems: plant validation, backstepping kernels, time-delay
reformulation, observer/controller gain synthesis, and closed-loop
simulation with quantified exponential decay."""

from hyperstab.numerics import SampledFunction
from hyperstab.model import PlantModel, PlantState

__all__ = ["SampledFunction", "PlantModel", "PlantState"]

__version__ = "0.1.0"

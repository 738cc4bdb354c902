"""Surrogate-guided falsification of STL specifications for hybrid and black-box systems."""

from .core import Box, Counterexample, PiecewiseConstantSignal, SearchPoint, Trajectory
from .stl import parse, robustness

__all__ = ["Box", "Counterexample", "PiecewiseConstantSignal", "SearchPoint", "Trajectory", "parse", "robustness"]
__version__ = "0.1.0"

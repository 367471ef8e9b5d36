"""Numerical laboratory for heterodimensional and saddle-node cycles of a model family."""

from .central_maps import CentralMap, CentralMapSpec, Regime, build_central_map

__all__ = ["CentralMap", "CentralMapSpec", "Regime", "build_central_map"]
__version__ = "0.1.0"

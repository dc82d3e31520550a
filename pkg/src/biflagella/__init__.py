"""Coupled elastic-rod, Stokes-flow and rigid-body simulator for a two-flagella swimmer."""

from .config import SimConfig, load_config, dump_config, derived_stiffnesses

__version__ = "0.1.0"

__all__ = ["SimConfig", "load_config", "dump_config", "derived_stiffnesses", "__version__"]

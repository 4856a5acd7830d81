"""Backstepping compensator design and simulation for heterodirectional
hyperbolic PDE-ODE systems.

Typical use::

    from hypcomp import load_config, run_design, simulate_closed_loop

    cfg = load_config("configs/example_4x3.toml")
    design = run_design(cfg.spec, cfg.params)
"""

from .config import Config, ConfigError, load_config
from .design import Design, DesignError, run_design
from .export import DesignOutput
from .model import DesignParams, Grid, PlantSpec, SimConfig, validate_plant
from .simulator import Gains, SimTrace, simulate_closed_loop, simulate_error_system
from .verification import verify_design

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ConfigError",
    "Design",
    "DesignError",
    "DesignOutput",
    "DesignParams",
    "Gains",
    "Grid",
    "PlantSpec",
    "SimConfig",
    "SimTrace",
    "load_config",
    "run_design",
    "simulate_closed_loop",
    "simulate_error_system",
    "validate_plant",
    "verify_design",
    "__version__",
]

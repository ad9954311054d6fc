"""Discrete MRF deformable registration with self-similarity descriptors."""
from .register import (
    ControlGrid,
    DeformConfig,
    DeformResult,
    LabelSpace,
    LevelConfig,
    data_cost,
    optimize_level,
    reg_cost,
    register_deformable,
    scale_field,
    total_energy,
)
from .ssc import compute_ssc

__all__ = [
    "ControlGrid", "DeformConfig", "DeformResult", "LabelSpace", "LevelConfig", "compute_ssc",
    "data_cost", "optimize_level", "reg_cost", "register_deformable", "scale_field", "total_energy",
]

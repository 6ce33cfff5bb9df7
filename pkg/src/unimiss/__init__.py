"""Self-distillation pretraining of a dimension-free MiT on 2D and 3D synthetic medical data."""

from .config import FullConfig, MiTConfig, mit_preset, parse_config
from .mit import DimTag, MiT

__all__ = ["DimTag", "FullConfig", "MiT", "MiTConfig", "mit_preset", "parse_config"]

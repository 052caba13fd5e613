"""geos - gradient-isolated auxiliary self-supervision for domain shift."""

from lib.api import GeosLab
from lib.models import OSConfig, ProtocolSpec, SynthSpec, TrainConfig

__version__ = "0.1.0"

__all__ = ["GeosLab", "OSConfig", "ProtocolSpec", "SynthSpec", "TrainConfig"]

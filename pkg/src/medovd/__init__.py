"""Open-vocabulary detection over merged, partially annotated medical datasets."""

from ._accel import backend_name
from .geometry import Box, Detection, GroundTruthBox
from .presence import PresenceMatrix

__version__ = "0.1.0"

__all__ = ["Box", "Detection", "GroundTruthBox", "PresenceMatrix", "backend_name", "__version__"]

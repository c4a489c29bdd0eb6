"""Online 3D multi-target multi-camera tracking with late 3D box aggregation."""
from .boxes import Box3D
from .config import PipelineConfig
from .geometry import CameraCalibration

__all__ = ["Box3D", "CameraCalibration", "PipelineConfig"]
__version__ = "0.1.0"

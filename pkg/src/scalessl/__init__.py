"""Scale-aware self-supervised pretraining for 2-D image segmentation."""
from .core import ExperimentConfig, ImageRecord, RngStream, ScaleSpec, Window, load_config, validate_config
from .errors import ScaleSSLError

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "ImageRecord", "RngStream", "ScaleSpec", "Window", "load_config",
           "validate_config", "ScaleSSLError", "__version__"]

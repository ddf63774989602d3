"""Height-aware lidar super-resolution: range-image codec, synthetic scans,
a numpy autodiff generator, losses, metrics and a training loop."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .rangeimg import ChannelMode, RangeImage, SensorModel, project, unproject, downsample_rows
from .halsgen import GeneratorConfig, HeightAwareGenerator
from .trainer import TrainConfig, train, upsample

__all__ = ["BACKEND", "ChannelMode", "RangeImage", "SensorModel", "project", "unproject",
           "downsample_rows", "GeneratorConfig", "HeightAwareGenerator", "TrainConfig", "train",
           "upsample", "__version__"]

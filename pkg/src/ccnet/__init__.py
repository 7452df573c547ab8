"""CC-Net: complementary consistency semi-supervised 3D segmentation."""
from .estimator import CCNetSegmenter
from .netcore import CCNet, ModelSpec, SkipConfig, VNet, build_model, param_count
from .training import TrainConfig, train

__all__ = ["CCNet", "CCNetSegmenter", "ModelSpec", "SkipConfig", "TrainConfig", "VNet",
           "build_model", "param_count", "train"]
__version__ = "0.1.0"

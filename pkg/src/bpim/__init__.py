"""Small-object detector with boundary, position and cross-scale guidance modules."""

__version__ = "0.1.0"

from .model import BPIMNet, ModelConfig, build, build_baseline, load_checkpoint, save_checkpoint  # noqa: E402
# the training functions stay under bpim.train so the submodule name is not shadowed
from .train import TrainConfig  # noqa: E402
from .estimator import BPIMDetector  # noqa: E402

__all__ = [
    "BPIMDetector",
    "BPIMNet",
    "ModelConfig",
    "TrainConfig",
    "build",
    "build_baseline",
    "load_checkpoint",
    "save_checkpoint",
]

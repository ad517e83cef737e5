"""hsmtl: multitask small-sample hyperspectral patch classification.

One convolutional feature extractor is co-trained across several scenes, each
with its own softmax head; bands are aligned across sensors, training follows
an AdaDelta two-phase schedule, and predictions are voted over the last few
parameter snapshots.
"""

from .network import ArchConfig, MultitaskNet, TaskSpec, build_network
from .trainer import MultitaskTrainer, SingleTaskTrainer, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "MultitaskNet", "TaskSpec", "build_network",
    "MultitaskTrainer", "SingleTaskTrainer", "TrainConfig",
    "__version__",
]

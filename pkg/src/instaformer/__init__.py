"""Instance-aware image-to-image translation with a transformer aggregator, in numpy."""

from .aggregator import PAPER_AGGREGATOR, Aggregator, AggregatorConfig, BoundingBox
from .backbone import PAPER_BACKBONE, BackboneConfig, Discriminator
from .losses import LossReport, LossWeights, NceConfig
from .model import InstaFormer
from .trainer import TrainConfig, TrainState, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Aggregator",
    "AggregatorConfig",
    "BackboneConfig",
    "BoundingBox",
    "Discriminator",
    "InstaFormer",
    "LossReport",
    "LossWeights",
    "NceConfig",
    "PAPER_AGGREGATOR",
    "PAPER_BACKBONE",
    "TrainConfig",
    "TrainState",
    "train",
    "train_step",
]

"""Full-reference perceptual image error learned from pairwise preferences."""

from .bt import bt_probability, fill_missing_probabilities, min_responses, mle_scores
from .net import NetConfig, ErrorNet
from .train import TrainConfig, batch_loss, predicted_preference, train

__all__ = [
    "NetConfig",
    "ErrorNet",
    "TrainConfig",
    "batch_loss",
    "bt_probability",
    "fill_missing_probabilities",
    "min_responses",
    "mle_scores",
    "predicted_preference",
    "train",
]
__version__ = "0.1.0"

"""
deferloop - simulate closed learning-to-defer pipelines

deferloop trains a classifier and a deferrer on the decisions of the same
fallible experts it defers to, starting from a weak expert-input similarity
prior, and measures accuracy and group disparity along the way.
"""

__version__ = "0.1.0"

from deferloop.core import Dataset, Sample
from deferloop.experts import ExpertModel, ExpertPanel
from deferloop.pipeline import PipelineState
from deferloop.training import TrainConfig, smooth_matching, strict_matching

__all__ = [
    "Dataset",
    "Sample",
    "ExpertModel",
    "ExpertPanel",
    "PipelineState",
    "TrainConfig",
    "strict_matching",
    "smooth_matching",
]

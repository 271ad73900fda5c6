"""Dissect the units of iteratively magnitude-pruned networks.

Train a small residual network, prune it in rounds with weight rewinding,
and measure how many of its units keep segmenting human-labeled concepts.
"""

from .concept_data import MicroBrodenSpec, generate_micro_broden, load_concept_dataset
from .dissector import DissectionReport, dissect_network
from .metrics_report import consistency_retained, consistency_same_concept, summarize
from .model import ModelSpec, build_model
from .pruner import PruneConfig, PruningMask, iterate_prune, magnitude_prune
from .trainer import TrainingSchedule, train

__version__ = "0.1.0"

__all__ = [
    "DissectionReport",
    "MicroBrodenSpec",
    "ModelSpec",
    "PruneConfig",
    "PruningMask",
    "TrainingSchedule",
    "build_model",
    "consistency_retained",
    "consistency_same_concept",
    "dissect_network",
    "generate_micro_broden",
    "iterate_prune",
    "load_concept_dataset",
    "magnitude_prune",
    "summarize",
    "train",
]

"""Structured feature learning for pose estimation with convolutional message passing.

Main entry points:

* :mod:`crfcnn.tensor`: reverse-mode autodiff over small numpy tensors
* :mod:`crfcnn.graph`: body graphs, factor graphs and message schedules
* :mod:`crfcnn.messages`: serial and flooding message passing among feature maps
* :mod:`crfcnn.oracle`: exact discrete CRF energies and marginals for testing
* :mod:`crfcnn.model`: the image-to-score-map pipeline and its training loop
* :mod:`crfcnn.synth`: synthetic stick-figure datasets and PCP/PCK metrics
* :mod:`crfcnn.cli`: the ``crfcnn`` command
"""

from __future__ import annotations

from .graph import JointGraph, build_loopy, schedule_for, skeleton_tree
from .model import Model, TrainConfig, evaluate, train
from .synth import DatasetSpec, generate

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec",
    "JointGraph",
    "Model",
    "TrainConfig",
    "build_loopy",
    "evaluate",
    "generate",
    "schedule_for",
    "skeleton_tree",
    "train",
]

"""Lightweight road-damage detector toolkit in numpy.

Model graph and compression policies, the BMS-SPPF attention block, a cost
analyzer, losses, post-processing and mAP evaluation.
"""

from .analysis import analyze, diff_configs
from .graph import BASELINE_POLICY, ROC_POLICY, build_graph, fold_batchnorm, forward, init_weights
from .io import load_weights, read_config, save_weights
from .metrics import evaluate
from .postprocess import Detection, decode, nms

__version__ = "0.1.0"

__all__ = [
    "BASELINE_POLICY",
    "ROC_POLICY",
    "Detection",
    "analyze",
    "build_graph",
    "decode",
    "diff_configs",
    "evaluate",
    "fold_batchnorm",
    "forward",
    "init_weights",
    "load_weights",
    "nms",
    "read_config",
    "save_weights",
]

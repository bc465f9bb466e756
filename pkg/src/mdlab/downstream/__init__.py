"""Anomaly-segmentation consumer of synthetic defects."""

from .landscape import loss_landscape
from .metrics import MetricsReport, auroc, average_precision, aupro, f1_max, metrics_report
from .segmenter import SegConfig, SegModel, evaluate, focal_loss, load_segmenter, predict, save_segmenter, train_segmenter

__all__ = [
    "MetricsReport",
    "SegConfig",
    "SegModel",
    "aupro",
    "auroc",
    "average_precision",
    "evaluate",
    "f1_max",
    "focal_loss",
    "load_segmenter",
    "loss_landscape",
    "metrics_report",
    "predict",
    "save_segmenter",
    "train_segmenter",
]

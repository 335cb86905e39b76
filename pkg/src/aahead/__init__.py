"""Anomaly-aware objectness for small-target detection."""
from .aadh import AADHead, BaselineHead
from .detector import AnomalyAwareDetector, DetectorModel, TrainConfig, train
from .evaluation import Box, Detection, average_precision, match_detections, metrics_at_threshold
from .stat_test import FwerSpec, TestConfig, fwer_threshold, significance, sigmoid_alpha
from .synth import SceneSpec, generate_dataset, generate_samples

__all__ = [
    "AADHead", "AnomalyAwareDetector", "BaselineHead", "Box", "Detection", "DetectorModel", "FwerSpec",
    "SceneSpec", "TestConfig", "TrainConfig", "average_precision", "fwer_threshold", "generate_dataset",
    "generate_samples", "match_detections", "metrics_at_threshold", "sigmoid_alpha", "significance", "train",
]

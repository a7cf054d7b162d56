"""Pneumonia classification on chest radiographs with a from-scratch numpy CNN."""
from .evaluation import ConfusionMatrix, compute_metrics, confusion_matrix
from .network import HeadSpec, Model, build_model, count_params
from .training import TrainConfig, fit, history_stats

__version__ = "0.1.0"

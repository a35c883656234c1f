"""Multimodal fusion of ICU time series and chest radiographs with a learned-uncertainty loss."""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .metrics import MetricsReport, auprc, auroc, f1_scores
from .pipeline import emit_report, run_ablation, run_experiment
from .preprocess import BACKEND, ClaheParams, clahe
from .robustness import estimate_noise_params, perturb, robustness_grid
from .uncertainty import uncertainty_loss

__all__ = [
    "BACKEND", "ClaheParams", "ExperimentConfig", "MetricsReport", "auprc", "auroc", "clahe",
    "emit_report", "estimate_noise_params", "f1_scores", "perturb", "robustness_grid", "run_ablation",
    "run_experiment", "uncertainty_loss",
]

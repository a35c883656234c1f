"""Public name for the uncertainty-weighted multi-task loss (implemented in ``clinfuse.uncertainty``)."""

from .uncertainty import TaskUncertainty, mean_bce, per_task_bce, uncertainty_loss

__all__ = ["TaskUncertainty", "mean_bce", "per_task_bce", "uncertainty_loss"]

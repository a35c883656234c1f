"""Per-task BCE and the homoscedastic multi-task uncertainty loss."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def per_task_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean-over-batch BCE per task, from logits, in the stable form
    max(x, 0) - x*y + log(1 + exp(-|x|)).
    """
    labels = labels.to(logits.dtype)
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    if logits.ndim == 1:
        logits, labels = logits[:, None], labels[:, None]
    loss = torch.clamp(logits, min=0) - logits * labels + torch.log1p(torch.exp(-logits.abs()))
    return loss.mean(dim=0)


def uncertainty_loss(task_losses: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """sum_i exp(-s_i) * L_i + s_i with s_i = log(sigma_i^2)."""
    if task_losses.shape != log_var.shape:
        raise ValueError(f"{task_losses.shape[0]} task losses but {log_var.shape[0]} log-variances")
    return torch.sum(torch.exp(-log_var) * task_losses + log_var)


class TaskUncertainty(nn.Module):
    """Learnable per-task log-variance vector, initialised to zero."""

    def __init__(self, num_tasks: int):
        super().__init__()
        self.log_var = nn.Parameter(torch.zeros(num_tasks))

    def forward(self, task_losses: torch.Tensor) -> torch.Tensor:
        return uncertainty_loss(task_losses, self.log_var.to(task_losses.dtype))

    def variances(self) -> torch.Tensor:
        return torch.exp(self.log_var.detach())


def mean_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))

"""Batching, encoder pretraining, joint fine-tuning and prediction."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .encoders import EhrEncoder, ImgEncoder
from .errors import NonFiniteError, UndefinedMetricError
from .fusion import FusionModel
from .metrics import auroc
from .preprocess import AugmentParams, eval_transform_batch, train_transform_batch
from .uncertainty import TaskUncertainty, mean_bce, per_task_bce

log = logging.getLogger(__name__)

# default learning rates per (task, stage)
DEFAULT_LEARNING_RATES = {
    "phenotyping": {"pretrain_img": 5e-4, "pretrain_ehr": 1e-4, "finetune": 7e-5},
    "mortality": {"pretrain_img": 5e-4, "pretrain_ehr": 3e-5, "finetune": 1e-4},
}


@dataclass
class TrainHyper:
    lr: float
    epochs: int = 20
    batch_size: int = 16
    patience: int = 5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_var_lr: float | None = None  # separate rate for the task log-variances; None shares lr

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class PreparedSplit:
    series: torch.Tensor  # (n, T, 76) float32, zero padded
    lengths: torch.Tensor  # (n,) int64
    images: np.ndarray | None  # (n_img, H, W) uint8, already contrast-enhanced if requested
    image_index: np.ndarray  # (n,) row into ``images`` or -1
    labels: torch.Tensor  # (n, L) float32
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.series.shape[0]

    @property
    def has_image(self) -> np.ndarray:
        return self.image_index >= 0

    def subset(self, idx) -> "PreparedSplit":
        idx = np.asarray(idx, dtype=np.int64)
        t = torch.as_tensor(idx)
        lengths = self.lengths[t]
        tmax = int(lengths.max()) if len(idx) else 1
        rows = self.image_index[idx]
        keep = rows[rows >= 0]
        new_index = np.full(len(idx), -1, dtype=np.int64)
        new_index[rows >= 0] = np.arange(len(keep))
        images = self.images[keep] if self.images is not None and len(keep) else None
        return PreparedSplit(self.series[t, :tmax], lengths, images, new_index, self.labels[t],
                             [self.ids[i] for i in idx])


def prepare_split(records, image_fn=None) -> PreparedSplit:
    """Stack records into padded tensors. ``image_fn`` (e.g. CLAHE) is applied to each image once."""
    n = len(records)
    lengths = [r.series.t for r in records]
    tmax = max(lengths) if records else 1
    width = records[0].series.values.shape[1] if records else 76
    series = np.zeros((n, tmax, width), dtype=np.float32)
    for i, r in enumerate(records):
        series[i, : r.series.t] = r.series.values
    image_index = np.full(n, -1, dtype=np.int64)
    imgs = []
    for i, r in enumerate(records):
        if r.image is not None:
            image_index[i] = len(imgs)
            imgs.append(image_fn(r.image) if image_fn is not None else r.image)
    images = np.stack(imgs) if imgs else None
    labels = np.stack([r.labels for r in records]).astype(np.float32) if records else np.zeros((0, 1), np.float32)
    return PreparedSplit(torch.from_numpy(series), torch.as_tensor(lengths, dtype=torch.int64), images,
                         image_index, torch.from_numpy(labels), [r.episode_id for r in records])


@dataclass
class Batch:
    series: torch.Tensor
    lengths: torch.Tensor
    images: torch.Tensor | None  # (P, 1, crop, crop) for the rows flagged in has_image
    has_image: torch.Tensor
    labels: torch.Tensor


def make_batch(split: PreparedSplit, idx, augment: AugmentParams, rng=None, train: bool = False,
               need_images: bool = True) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    t = torch.as_tensor(idx)
    lengths = split.lengths[t]
    series = split.series[t, : int(lengths.max())]
    rows = split.image_index[idx]
    has = torch.as_tensor(rows >= 0)
    images = None
    if need_images and split.images is not None and (rows >= 0).any():
        raw = split.images[rows[rows >= 0]]
        if train:
            images = train_transform_batch(raw, augment, rng)[:, None]
        else:
            images = eval_transform_batch(raw, augment.resize_to, augment.crop)[:, None]
    return Batch(series, lengths, images, has, split.labels[t])


def _forward(model, batch: Batch):
    if isinstance(model, EhrEncoder):
        return model(batch.series, batch.lengths)
    if isinstance(model, ImgEncoder):
        return model(batch.images)
    return model(batch.series, batch.lengths, batch.images, batch.has_image)


def _needs_images(model) -> bool:
    if isinstance(model, EhrEncoder):
        return False
    if isinstance(model, FusionModel):
        return model.uses_images
    return True


@torch.no_grad()
def predict_split(model, split: PreparedSplit, augment: AugmentParams, batch_size: int = 64) -> np.ndarray:
    """Sigmoid probabilities for every record of the split, in eval mode."""
    model.eval()
    out = []
    need = _needs_images(model)
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split)))
        batch = make_batch(split, idx, augment, train=False, need_images=need)
        out.append(torch.sigmoid(_forward(model, batch)).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, split.labels.shape[1]))


def mean_auroc(probs: np.ndarray, labels: np.ndarray) -> float | None:
    vals = []
    for j in range(labels.shape[1]):
        try:
            vals.append(auroc(probs[:, j], labels[:, j]))
        except UndefinedMetricError:
            pass
    return float(np.mean(vals)) if vals else None


@dataclass
class FitResult:
    best_epoch: int
    best_score: float
    history: list


def fit(model, train: PreparedSplit, val: PreparedSplit, hyper: TrainHyper, augment: AugmentParams,
        uncertainty: TaskUncertainty | None = None, stage: str = "train") -> FitResult:
    """Adam on mean BCE (or the uncertainty loss); keeps the best-validation-AUROC weights."""
    if len(train) == 0:
        raise ValueError(f"{stage}: empty training split")
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng([hyper.seed, 0x5EED])
    groups = [{"params": list(model.parameters())}]
    if uncertainty is not None:
        groups.append({"params": list(uncertainty.parameters()), "lr": hyper.log_var_lr or hyper.lr})
    opt = torch.optim.Adam(groups, lr=hyper.lr, betas=tuple(hyper.betas), eps=hyper.eps)
    need = _needs_images(model)
    best_state, best_score, best_epoch, stale = None, -np.inf, -1, 0
    history = []
    for epoch in range(hyper.epochs):
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for step, start in enumerate(range(0, len(order), hyper.batch_size)):
            idx = order[start : start + hyper.batch_size]
            batch = make_batch(train, idx, augment, rng, train=True, need_images=need)
            logits = _forward(model, batch)
            if uncertainty is not None:
                loss = uncertainty(per_task_bce(logits, batch.labels))
            else:
                loss = mean_bce(logits, batch.labels)
            if not torch.isfinite(loss):
                raise NonFiniteError(
                    f"{stage}: non-finite loss at epoch {epoch} step {step} "
                    f"(logits range {logits.min().item():.3g}..{logits.max().item():.3g})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if len(val):
            probs = predict_split(model, val, augment)
            score = mean_auroc(probs, val.labels.numpy())
            if score is None:
                score = -float(mean_bce(torch.logit(torch.as_tensor(probs).clamp(1e-7, 1 - 1e-7)),
                                        val.labels.double()))
        else:
            score = -float(np.mean(losses))
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_score": score}
        if uncertainty is not None:
            entry["log_var"] = uncertainty.log_var.detach().tolist()
        history.append(entry)
        log.info("%s epoch %d loss %.4f val %.4f", stage, epoch, entry["train_loss"], score)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
            best_unc = copy.deepcopy(uncertainty.state_dict()) if uncertainty is not None else None
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    model.load_state_dict(best_state)
    if uncertainty is not None:
        uncertainty.load_state_dict(best_unc)
    model.eval()
    return FitResult(best_epoch, float(best_score), history)


def pretrain_encoder(encoder, train: PreparedSplit, val: PreparedSplit, hyper: TrainHyper,
                     augment: AugmentParams) -> FitResult:
    """Independent pretraining; the image encoder only sees records that carry an image."""
    if isinstance(encoder, ImgEncoder):
        train = train.subset(np.flatnonzero(train.has_image))
        val = val.subset(np.flatnonzero(val.has_image))
        if len(train) == 0:
            raise ValueError("image pretraining: no training records carry an image")
        stage = "pretrain_img"
    else:
        stage = "pretrain_ehr"
    return fit(encoder, train, val, hyper, augment, stage=stage)


def finetune(model: FusionModel, train: PreparedSplit, val: PreparedSplit, hyper: TrainHyper,
             augment: AugmentParams, loss_mode: str = "bce"):
    """Joint fine-tuning of encoders and fusion head; returns (FitResult, TaskUncertainty or None)."""
    if loss_mode not in ("bce", "uncertainty"):
        raise ValueError(f"unknown loss_mode {loss_mode!r}")
    unc = TaskUncertainty(model.num_labels) if loss_mode == "uncertainty" else None
    if model.cfg.kind == "img_only":
        train = train.subset(np.flatnonzero(train.has_image))
        val = val.subset(np.flatnonzero(val.has_image))
    result = fit(model, train, val, hyper, augment, uncertainty=unc, stage=f"finetune_{model.cfg.kind}")
    return result, unc

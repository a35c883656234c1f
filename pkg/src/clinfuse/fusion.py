"""Projection, two-token fusion heads and the end-to-end fused model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EhrEncoder, ImgEncoder
from .errors import ConfigError, NonFiniteError

FUSION_KINDS = ("attention", "lstm", "ehr_only", "img_only")


@dataclass
class FusionConfig:
    kind: str = "attention"
    dim: int = 256
    layers: int = 2
    heads: int = 8
    ff_dim: int = 1024
    dropout: float = 0.1
    lstm_order: tuple = ("ehr", "cxr")

    def validate(self):
        if self.kind not in FUSION_KINDS:
            raise ConfigError("fusion.kind", f"must be one of {FUSION_KINDS}")
        if self.dim % self.heads:
            raise ConfigError("fusion.heads", "model dim must be divisible by the head count")
        if self.layers < 1:
            raise ConfigError("fusion.layers", "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("fusion.dropout", "must lie in [0, 1)")
        if sorted(self.lstm_order) != ["cxr", "ehr"]:
            raise ConfigError("fusion.lstm_order", "must be a permutation of (ehr, cxr)")

    def to_dict(self):
        d = asdict(self)
        d["lstm_order"] = list(self.lstm_order)
        return d


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        att = self.drop(att.softmax(dim=-1))
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with a GELU feed-forward block."""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim))
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class AttentionFusion(nn.Module):
    """Transformer encoder over the token sequence (no positional embeddings), mean pooled."""

    def __init__(self, cfg: FusionConfig, num_labels: int):
        super().__init__()
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.heads, cfg.ff_dim, cfg.dropout) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.classifier = nn.Linear(cfg.dim, num_labels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation after fusion layer {i}")
        return self.classifier(self.norm(x).mean(dim=1))


class LstmFusion(nn.Module):
    """Recurrent baseline: an LSTM reads the tokens in order, classifier on the final hidden state."""

    def __init__(self, cfg: FusionConfig, num_labels: int):
        super().__init__()
        self.lstm = nn.LSTM(cfg.dim, cfg.dim, batch_first=True)
        self.classifier = nn.Linear(cfg.dim, num_labels)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        _, (h, _) = self.lstm(tokens)
        if not torch.isfinite(h).all():
            raise NonFiniteError("non-finite activation after fusion layer 0")
        return self.classifier(h[-1])


def fused_sequence(f_ehr: torch.Tensor, f_cxr: torch.Tensor) -> torch.Tensor:
    """Stack the two modality embeddings into a (batch, 2, dim) token sequence."""
    if f_ehr.shape != f_cxr.shape:
        raise ValueError(f"token shapes differ: {tuple(f_ehr.shape)} vs {tuple(f_cxr.shape)}")
    return torch.stack([f_ehr, f_cxr], dim=1)


class FusionModel(nn.Module):
    def __init__(self, ehr_encoder: EhrEncoder | None, img_encoder: ImgEncoder | None, num_labels: int,
                 cfg: FusionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.num_labels = num_labels
        self.ehr_encoder = ehr_encoder
        self.img_encoder = img_encoder
        kind = cfg.kind
        if kind != "img_only" and ehr_encoder is None:
            raise ConfigError("fusion.kind", f"{kind} needs a series encoder")
        if kind != "ehr_only" and img_encoder is None:
            raise ConfigError("fusion.kind", f"{kind} needs an image encoder")
        if kind != "img_only" and ehr_encoder.embed_dim != cfg.dim:
            raise ConfigError("fusion.dim", "must equal the series encoder hidden size")
        self.projection = nn.Linear(img_encoder.embed_dim, cfg.dim) if img_encoder is not None else None
        self.missing_token = nn.Parameter(torch.randn(cfg.dim) * 0.02) if img_encoder is not None else None
        if kind == "attention":
            self.head = AttentionFusion(cfg, num_labels)
        elif kind == "lstm":
            self.head = LstmFusion(cfg, num_labels)
        else:
            self.head = nn.Linear(cfg.dim, num_labels)
            if kind == "ehr_only":
                self.head.load_state_dict(ehr_encoder.classifier.state_dict())

    @property
    def uses_images(self) -> bool:
        return self.cfg.kind != "ehr_only"

    @property
    def uses_series(self) -> bool:
        return self.cfg.kind != "img_only"

    def project(self, f_cxr_raw: torch.Tensor) -> torch.Tensor:
        if f_cxr_raw.shape[-1] != self.projection.in_features:
            raise ValueError(f"expected image embedding of length {self.projection.in_features}")
        return self.projection(f_cxr_raw)

    def image_tokens(self, images, has_image: torch.Tensor, batch: int) -> torch.Tensor:
        """Projected image embedding where present, the learnable missing token elsewhere."""
        tokens = self.missing_token.expand(batch, -1)
        if images is not None and images.shape[0] > 0:
            proj = self.project(self.img_encoder.encode(images))
            idx = torch.nonzero(has_image, as_tuple=False).squeeze(1)
            tokens = tokens.index_copy(0, idx, proj)
        return tokens

    def fuse(self, f_ehr: torch.Tensor, f_cxr: torch.Tensor) -> torch.Tensor:
        if self.cfg.kind == "attention":
            return self.head(fused_sequence(f_ehr, f_cxr))
        if self.cfg.kind == "lstm":
            first, second = (f_ehr, f_cxr) if self.cfg.lstm_order[0] == "ehr" else (f_cxr, f_ehr)
            return self.head(fused_sequence(first, second))
        raise ValueError(f"{self.cfg.kind} has no two-token fusion")

    def forward(self, series, lengths, images, has_image):
        """``images`` holds only the rows flagged in ``has_image``, in batch order."""
        kind = self.cfg.kind
        batch = has_image.shape[0]
        if kind == "ehr_only":
            return self.head(self.ehr_encoder.encode(series, lengths))
        f_cxr = self.image_tokens(images, has_image, batch)
        if kind == "img_only":
            return self.head(f_cxr)
        f_ehr = self.ehr_encoder.encode(series, lengths)
        return self.fuse(f_ehr, f_cxr)


def fuse_attention(f_ehr, f_cxr, head: AttentionFusion) -> torch.Tensor:
    return head(fused_sequence(f_ehr, f_cxr))


def fuse_lstm(f_ehr, f_cxr, head: LstmFusion) -> torch.Tensor:
    return head(fused_sequence(f_ehr, f_cxr))

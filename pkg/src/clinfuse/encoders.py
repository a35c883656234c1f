"""Modality-specific encoders: stacked LSTM for the series, ResNet-34-topology CNN for images."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence

from .errors import ConfigError

SERIES_WIDTH = 76


@dataclass
class EhrEncoderConfig:
    input_dim: int = SERIES_WIDTH
    hidden: int = 256
    layers: int = 2
    dropout: float = 0.3

    def validate(self):
        if self.hidden <= 0:
            raise ConfigError("encoders.ehr.hidden", "must be positive")
        if self.layers < 1:
            raise ConfigError("encoders.ehr.layers", "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("encoders.ehr.dropout", "must lie in [0, 1)")


@dataclass
class ImgEncoderConfig:
    width_mult: float = 0.25
    blocks: list = field(default_factory=lambda: [3, 4, 6, 3])  # ResNet-34 stage depths
    in_channels: int = 1

    @property
    def base_width(self) -> int:
        return max(1, int(round(64 * self.width_mult)))

    @property
    def embed_dim(self) -> int:
        return 8 * self.base_width

    def validate(self):
        if self.width_mult <= 0:
            raise ConfigError("encoders.img.width_mult", "must be positive")
        if len(self.blocks) != 4 or any(b < 1 for b in self.blocks):
            raise ConfigError("encoders.img.blocks", "need four positive stage depths")


class EhrEncoder(nn.Module):
    """Stacked LSTM; the embedding is the top layer's hidden state at each sequence's last real step."""

    def __init__(self, config: EhrEncoderConfig, num_labels: int):
        super().__init__()
        config.validate()
        self.config = config
        self.lstm = nn.LSTM(
            config.input_dim,
            config.hidden,
            num_layers=config.layers,
            dropout=config.dropout if config.layers > 1 else 0.0,
            batch_first=True,
        )
        self.classifier = nn.Linear(config.hidden, num_labels)

    @property
    def embed_dim(self) -> int:
        return self.config.hidden

    def encode(self, series: torch.Tensor, lengths=None) -> torch.Tensor:
        if series.ndim != 3 or series.shape[-1] != self.config.input_dim:
            raise ValueError(f"series must be (batch, t, {self.config.input_dim}), got {tuple(series.shape)}")
        if lengths is None:
            _, (h, _) = self.lstm(series)
        else:
            lengths = torch.as_tensor(lengths, dtype=torch.int64).cpu()
            packed = pack_padded_sequence(series, lengths, batch_first=True, enforce_sorted=False)
            _, (h, _) = self.lstm(packed)
        return h[-1]

    def forward(self, series, lengths=None):
        return self.classifier(self.encode(series, lengths))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.down is None else self.down(x)
        return F.relu(out + skip)


class ImgEncoder(nn.Module):
    """ResNet with BasicBlocks; stage depths (3, 4, 6, 3) give the ResNet-34 topology."""

    def __init__(self, config: ImgEncoderConfig, num_labels: int):
        super().__init__()
        config.validate()
        self.config = config
        w = config.base_width
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, w, 7, 2, 3, bias=False),
            nn.BatchNorm2d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        stages, cin = [], w
        for i, depth in enumerate(config.blocks):
            cout = w * 2**i
            blocks = [BasicBlock(cin, cout, 1 if i == 0 else 2)]
            blocks += [BasicBlock(cout, cout, 1) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.classifier = nn.Linear(cin, num_labels)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4 or images.shape[1] != self.config.in_channels:
            raise ValueError(f"images must be (batch, {self.config.in_channels}, H, W), got {tuple(images.shape)}")
        x = self.stages(self.stem(images))
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)

    def forward(self, images):
        return self.classifier(self.encode(images))


def encoder_config_dict(cfg) -> dict:
    return asdict(cfg)

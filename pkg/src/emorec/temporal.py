"""Segment-level sequence models: TCN, transformer encoder, task heads.

A segment of ``w`` frame features runs through a stack of dilated
convolutions (time axis preserved), then a transformer encoder that only
attends within the segment, then a small MLP head producing per-frame
predictions: 2 tanh-bounded values for VA, 8 class logits for Expr, 12
unit logits for AU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as A
from . import nn
from . import tasks
from .autodiff import Tensor
from .errors import ConfigError


@dataclass(frozen=True)
class TcnConfig:
    """Stack description: one (kernel, dilation, channels) triple per layer."""

    layers: tuple = ((3, 1, 64), (3, 2, 64), (3, 4, 64), (3, 8, 64))
    dropout: float = 0.1
    residual: bool = True
    project_residual: bool = True  # 1x1 conv when channel counts differ

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("TCN needs at least one layer")
        for kernel, dilation, channels in self.layers:
            if kernel % 2 == 0:
                raise ConfigError(f"TCN kernel {kernel} must be odd")
            if dilation < 1 or channels < 1:
                raise ConfigError(f"bad TCN layer ({kernel}, {dilation}, {channels})")

    @classmethod
    def uniform(cls, channels=64, kernel=3, dilations=(1, 2, 4, 8), **kwargs):
        return cls(tuple((kernel, d, channels) for d in dilations), **kwargs)

    @property
    def receptive_field(self):
        return 1 + sum((k - 1) * d for k, d, _ in self.layers)

    @property
    def out_channels(self):
        return self.layers[-1][2]


class TcnBlock(nn.Module):
    def __init__(self, in_channels, kernel, dilation, out_channels, dropout_p, residual,
                 project_residual, rng):
        super().__init__()
        scale = 1.0 / np.sqrt(in_channels * kernel)
        self.weight = Tensor(
            rng.normal(0.0, scale, (out_channels, in_channels, kernel)), requires_grad=True
        )
        self.bias = Tensor(np.zeros((out_channels, 1)), requires_grad=True)
        self.dilation = dilation
        self.residual = residual
        self.drop = nn.Dropout(dropout_p, rng)
        self.proj = None
        if residual and in_channels != out_channels:
            if not project_residual:
                raise ConfigError(
                    f"residual channel mismatch {in_channels} -> {out_channels} "
                    "and projections are disabled"
                )
            self.proj = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(in_channels), (out_channels, in_channels, 1)),
                requires_grad=True,
            )

    def forward(self, x):
        y = A.add(A.conv1d_dilated(x, self.weight, self.dilation), self.bias)
        y = self.drop(A.relu(y))
        if not self.residual:
            return y
        shortcut = x if self.proj is None else A.conv1d_dilated(x, self.proj, 1)
        return A.add(shortcut, y)


class Tcn(nn.Module):
    """Dilated convolution stack over ``[batch, w, channels]`` sequences."""

    def __init__(self, in_dim, cfg: TcnConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.blocks = []
        channels = in_dim
        for kernel, dilation, out_channels in cfg.layers:
            self.blocks.append(
                TcnBlock(channels, kernel, dilation, out_channels, cfg.dropout,
                         cfg.residual, cfg.project_residual, rng)
            )
            channels = out_channels

    def forward(self, x):
        # conv kernels run on [batch, channels, time]
        y = A.transpose(x, (0, 2, 1))
        for block in self.blocks:
            y = block(y)
        return A.transpose(y, (0, 2, 1))


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int | None = None  # defaults to 4 * model_dim
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("encoder depth must be >= 1")

    @property
    def ffn(self):
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.model_dim


class PredictionHead(nn.Module):
    """Per-frame MLP: one hidden layer plus the task-specific output layer.

    VA outputs go through tanh so predictions land in the [-1, 1] label
    range; Expr and AU heads emit raw logits.
    """

    def __init__(self, task, in_dim, rng, hidden=None, dropout_p=0.3):
        super().__init__()
        tasks.check_task(task)
        self.task = task
        self.out_dim = tasks.OUTPUT_DIMS[task]
        hidden = hidden or in_dim
        self.lin1 = nn.Linear(in_dim, hidden, rng)
        self.drop = nn.Dropout(dropout_p, rng)
        self.lin2 = nn.Linear(hidden, self.out_dim, rng)

    def forward(self, h):
        y = self.lin2(self.drop(A.relu(self.lin1(h))))
        if self.task == tasks.VA:
            y = A.tanh(y)
        return y


class SegmentModel(nn.Module):
    """features -> TCN -> transformer encoder -> task head, per segment.

    Input is ``[batch, w, feature_dim]`` with an optional boolean pad mask
    (True on real frames); every stage preserves the time axis, so output
    is ``[batch, w, out_dim]``.
    """

    def __init__(self, feature_dim, task, tcn_cfg: TcnConfig, enc_cfg: EncoderConfig,
                 rng, head_hidden=None, head_dropout=None):
        super().__init__()
        self.task = tasks.check_task(task)
        self.feature_dim = feature_dim
        self.tcn = Tcn(feature_dim, tcn_cfg, rng)
        self.input_proj = None
        if tcn_cfg.out_channels != enc_cfg.model_dim:
            self.input_proj = nn.Linear(tcn_cfg.out_channels, enc_cfg.model_dim, rng)
        self.encoder = nn.TransformerEncoder(
            enc_cfg.model_dim, enc_cfg.depth, enc_cfg.heads, enc_cfg.ffn, enc_cfg.dropout, rng
        )
        self.head = PredictionHead(
            task, enc_cfg.model_dim, rng, hidden=head_hidden,
            dropout_p=enc_cfg.dropout if head_dropout is None else head_dropout,
        )
        self.model_dim = enc_cfg.model_dim
        self._positions = {}

    def _position_encoding(self, length):
        if length not in self._positions:
            self._positions[length] = nn.sinusoidal_positions(length, self.model_dim)
        return self._positions[length]

    def forward(self, frames, pad_mask=None):
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        if x.ndim == 2:
            x = A.reshape(x, (1,) + x.shape)
            if pad_mask is not None:
                pad_mask = np.asarray(pad_mask, dtype=bool).reshape(1, -1)
            squeeze = True
        else:
            squeeze = False
        if pad_mask is not None:
            # convolutions see zeros at padded positions no matter what the
            # caller stored there; attention masks the same positions
            pad_mask = np.asarray(pad_mask, dtype=bool)
            x = A.mul(x, pad_mask[:, :, None].astype(x.dtype))
        g = self.tcn(x)
        if self.input_proj is not None:
            g = self.input_proj(g)
        g = A.add(g, self._position_encoding(g.shape[1]))
        h = self.encoder(g, key_valid=pad_mask)
        y = self.head(h)
        if squeeze:
            y = A.reshape(y, y.shape[1:])
        return y

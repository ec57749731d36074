"""Pore-count CNN and the factorised ViViT with a dense fusion head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter
from .autodiff.tensor import Tensor, broadcast_to, concat, no_grad
from .errors import ConfigError, ShapeError


def _as_batch(x, frames: int, hw: int) -> tuple:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (frames, hw, hw):
        raise ShapeError(f"expected (N, {frames}, {hw}, {hw}) input, got {x.shape}")
    return x, single


# ---------------------------------------------------------------------------
# Counting CNN
# ---------------------------------------------------------------------------

@dataclass
class CnnConfig:
    in_frames: int = 200
    hw: int = 64
    kernel: int = 3
    stride: int = 2
    pad: int = 1
    n_conv: int = 4
    fc_hidden: int = 64
    # fixed affine map from kelvin to roughly unit scale
    input_offset: float = 300.0
    input_scale: float = 1000.0

    @property
    def channel_schedule(self) -> list:
        chans = [self.in_frames]
        for _ in range(self.n_conv):
            chans.append(max(1, chans[-1] // 2))
        return chans

    @property
    def spatial_schedule(self) -> list:
        sizes = [self.hw]
        for _ in range(self.n_conv):
            sizes.append(F.conv_output_size(sizes[-1], self.kernel, self.stride, self.pad))
        return sizes

    @property
    def flat_features(self) -> int:
        return self.channel_schedule[-1] * self.spatial_schedule[-1] ** 2


def cnn_parameter_count(cfg: CnnConfig) -> int:
    chans = cfg.channel_schedule
    total = 0
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        total += c_out * c_in * cfg.kernel ** 2 + c_out  # conv weight + bias
        total += 2 * c_out  # batch-norm gamma, beta
    total += cfg.flat_features * cfg.fc_hidden + cfg.fc_hidden
    total += cfg.fc_hidden + 1
    return total


class PoreCountCNN(Module):
    """Frames-as-channels 2-D CNN: 4 x (conv 3x3/s2/p1 -> batch norm -> ReLU),
    flatten, FC -> ReLU -> FC to one scalar per sequence."""

    def __init__(self, cfg: Optional[CnnConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or CnnConfig()
        rng = np.random.default_rng(seed)
        chans = cfg.channel_schedule
        self.convs = [Conv2d(a, b, rng, kernel=cfg.kernel, stride=cfg.stride, pad=cfg.pad)
                      for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [BatchNorm2d(b) for b in chans[1:]]
        self.fc1 = Linear(cfg.flat_features, cfg.fc_hidden, rng)
        self.fc2 = Linear(cfg.fc_hidden, 1, rng)

    def features(self, x) -> list:
        """Activations after each conv stage (used for shape tracing)."""
        x, _ = _as_batch(x, self.cfg.in_frames, self.cfg.hw)
        h = (x - self.cfg.input_offset) * (1.0 / self.cfg.input_scale)
        trace = []
        for conv, norm in zip(self.convs, self.norms):
            h = F.relu(norm(conv(h)))
            trace.append(h)
        return trace

    def forward(self, x) -> Tensor:
        x, single = _as_batch(x, self.cfg.in_frames, self.cfg.hw)
        h = self.features(x)[-1]
        h = h.reshape((h.shape[0], -1))
        out = self.fc2(F.relu(self.fc1(h))).reshape((h.shape[0],))
        return out.reshape(()) if single else out

    def predict(self, x) -> np.ndarray:
        """Eval-mode forward pass rounded to whole pores."""
        was_training = self.training
        self.eval()
        with no_grad():
            out = self.forward(x).data
        self.train(was_training)
        return np.rint(out).astype(np.int64)


# ---------------------------------------------------------------------------
# ViViT dense model
# ---------------------------------------------------------------------------

@dataclass
class VivitConfig:
    frames: int = 200
    hw: int = 64
    patch_px: int = 16
    dim: int = 256
    heads: int = 8
    spatial_layers: int = 4
    temporal_layers: int = 5
    mlp_ratio: int = 4
    head_channels: tuple = field(default=())
    input_offset: float = 300.0
    input_scale: float = 1000.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide dim ({self.dim})")
        if self.hw % self.patch_px:
            raise ConfigError(f"patch size {self.patch_px} does not divide frame size {self.hw}")
        if not self.head_channels:
            self.head_channels = (max(1, self.dim // 2), max(1, self.dim // 4),
                                  max(1, self.dim // 8))
        self.head_channels = tuple(int(c) for c in self.head_channels)

    @property
    def grid(self) -> int:
        return self.hw // self.patch_px

    @property
    def tokens_per_frame(self) -> int:
        return self.grid ** 2

    @property
    def out_grid(self) -> int:
        return 4 * self.grid


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple:
    """Softmax(Q K^T / sqrt(d_k)) V over the last two axes; returns (output, weights)."""
    d_k = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_k))
    weights = F.softmax(scores, axis=-1)
    return weights @ v, weights


class AttentionBlock(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp_in = Linear(dim, mlp_ratio * dim, rng)
        self.mlp_out = Linear(mlp_ratio * dim, dim, rng)
        self.keep_attention = False
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.reshape((b, n, self.heads, self.dim // self.heads)).transpose((0, 2, 1, 3))

    def self_attention(self, h: Tensor) -> Tensor:
        b, n, _ = h.shape
        q, k, v = self._split(self.w_q(h)), self._split(self.w_k(h)), self._split(self.w_v(h))
        out, weights = attention(q, k, v)
        if self.keep_attention:
            self.last_attention = weights.data
        out = out.transpose((0, 2, 1, 3)).reshape((b, n, self.dim))
        return self.w_o(out)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.self_attention(self.norm1(x))
        return x + self.mlp_out(F.gelu(self.mlp_in(self.norm2(x))))


class TransformerEncoder(Module):
    """A stack of blocks over (batch, tokens, dim) with a learned class token
    prepended on entry and stripped on exit."""

    def __init__(self, depth: int, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4):
        super().__init__()
        self.cls_token = Parameter((0.02 * rng.standard_normal((1, 1, dim))).astype(np.float32))
        self.blocks = [AttentionBlock(dim, heads, rng, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        b, _, d = x.shape
        cls = broadcast_to(self.cls_token, (b, 1, d))
        h = concat([cls, x], axis=1)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)[:, 1:, :]


class ResidualConvUnit(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, rng, stride=1, pad=1)
        self.conv2 = Conv2d(channels, channels, rng, stride=1, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class FusionHead(Module):
    """Token grid (N, dim, g, g) -> probabilities (N, 4g, 4g)."""

    def __init__(self, dim: int, head_channels: tuple, rng: np.random.Generator):
        super().__init__()
        self.fuse1 = ResidualConvUnit(dim, rng)
        self.fuse2 = ResidualConvUnit(dim, rng)
        chans = (dim,) + tuple(head_channels) + (1,)
        self.convs = [Conv2d(a, b, rng, stride=1, pad=1) for a, b in zip(chans[:-1], chans[1:])]

    def logits(self, grid: Tensor) -> Tensor:
        h = F.upsample_nearest2d(self.fuse1(grid), 2)
        h = F.upsample_nearest2d(self.fuse2(h), 2)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return h.reshape((h.shape[0], h.shape[2], h.shape[3]))

    def forward(self, grid: Tensor) -> Tensor:
        return F.sigmoid(self.logits(grid))


class VivitDense(Module):
    def __init__(self, cfg: Optional[VivitConfig] = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or VivitConfig()
        rng = np.random.default_rng(seed)
        self.patch_embed = Linear(cfg.patch_px ** 2, cfg.dim, rng)
        self.pos_spatial = Parameter(
            (0.02 * rng.standard_normal((cfg.tokens_per_frame, cfg.dim))).astype(np.float32))
        self.pos_temporal = Parameter(
            (0.02 * rng.standard_normal((cfg.frames, 1, cfg.dim))).astype(np.float32))
        self.spatial = TransformerEncoder(cfg.spatial_layers, cfg.dim, cfg.heads, rng,
                                          cfg.mlp_ratio)
        self.temporal = TransformerEncoder(cfg.temporal_layers, cfg.dim, cfg.heads, rng,
                                           cfg.mlp_ratio)
        self.head = FusionHead(cfg.dim, cfg.head_channels, rng)

    def blocks(self) -> list:
        return self.spatial.blocks + self.temporal.blocks

    def patchify(self, x: Tensor) -> Tensor:
        """(N, T, H, W) -> (N, T, g*g, p*p); patches in row-major grid order."""
        n, t = x.shape[:2]
        g, p = self.cfg.grid, self.cfg.patch_px
        x = x.reshape((n, t, g, p, g, p)).transpose((0, 1, 2, 4, 3, 5))
        return x.reshape((n, t, g * g, p * p))

    def tokenize(self, x) -> Tensor:
        x, _ = _as_batch(x, self.cfg.frames, self.cfg.hw)
        h = (x - self.cfg.input_offset) * (1.0 / self.cfg.input_scale)
        tokens = self.patch_embed(self.patchify(h))
        return tokens + self.pos_spatial + self.pos_temporal

    def spatial_encode(self, tokens: Tensor) -> Tensor:
        n, t, s, d = tokens.shape
        out = self.spatial(tokens.reshape((n * t, s, d)))
        return out.reshape((n, t, s, d))

    def temporal_encode(self, tokens: Tensor) -> Tensor:
        """(N, T, S, D) -> (N, S, D), attending over time at each spatial position."""
        n, t, s, d = tokens.shape
        seq = tokens.transpose((0, 2, 1, 3)).reshape((n * s, t, d))
        out = self.temporal(seq).mean(axis=1)
        return out.reshape((n, s, d))

    def to_grid(self, encoded: Tensor) -> Tensor:
        n, s, d = encoded.shape
        g = self.cfg.grid
        return encoded.reshape((n, g, g, d)).transpose((0, 3, 1, 2))

    def forward(self, x) -> Tensor:
        single = (x.ndim if isinstance(x, Tensor) else np.ndim(x)) == 3
        tokens = self.tokenize(x)
        encoded = self.temporal_encode(self.spatial_encode(tokens))
        out = self.head(self.to_grid(encoded))
        return out.reshape(out.shape[1:]) if single else out

    def predict(self, x, threshold: float = 0.5) -> np.ndarray:
        was_training = self.training
        self.eval()
        with no_grad():
            probs = self.forward(x).data
        self.train(was_training)
        return (probs >= threshold).astype(np.uint8)


def config_to_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}

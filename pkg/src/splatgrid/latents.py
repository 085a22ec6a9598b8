"""Splat-latent codecs: an exact identity codec and a trainable linear patch codec.

The linear-patch codec folds each f x f x 12 patch into one vector, subtracts a
learned offset and applies a linear map; the decoder maps back and hard-clamps
each channel to its valid range with a straight-through gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tape
from .losses import LossWeights, View, vae_loss
from .optim import Adam, Schedule
from .splat import N_CHANNELS, ROTATION, SplatGrid, raw_lower_upper
from .tape import ShapeError, Tensor

log = logging.getLogger(__name__)

IDENTITY = "identity"
LINEAR_PATCH = "linear-patch"
VARIANTS = (IDENTITY, LINEAR_PATCH)


class CodecError(ValueError):
    pass


class CodecDivergence(CodecError, FloatingPointError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    variant: str = IDENTITY
    patch: int = 1
    latent_dim: int = 12
    steps: int = 300
    lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise CodecError(f"unknown codec variant {self.variant!r}")
        if self.variant == IDENTITY and (self.patch != 1 or self.latent_dim != N_CHANNELS):
            raise CodecError("identity codec requires patch 1 and latent_dim 12")
        if self.patch < 1 or not 1 <= self.latent_dim <= N_CHANNELS * self.patch ** 2:
            raise CodecError(f"latent_dim must be in [1, 12*f^2] = [1, {N_CHANNELS * self.patch ** 2}]")

    @property
    def patch_dim(self) -> int:
        return N_CHANNELS * self.patch ** 2


def _patch_offset(f: int) -> np.ndarray:
    mu = np.full((N_CHANNELS, f, f), 0.5)
    mu[ROTATION] = 0.0
    return mu.reshape(-1)


@dataclass
class Codec:
    config: CodecConfig
    enc: np.ndarray | None = None      # (d, 12 f^2)
    dec: np.ndarray | None = None      # (12 f^2, d)
    offset: np.ndarray | None = None   # (12 f^2,)
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, config: CodecConfig) -> "Codec":
        """Identity codec, or a linear codec initialized with orthonormal rows."""
        if config.variant == IDENTITY:
            return cls(config)
        rng = np.random.default_rng(config.seed)
        q, r = np.linalg.qr(rng.normal(size=(config.patch_dim, config.patch_dim)))
        q = q * np.sign(np.diag(r))
        e = q[:config.latent_dim].copy()
        return cls(config, e, e.T.copy(), _patch_offset(config.patch))

    @property
    def params(self) -> list[np.ndarray]:
        return [] if self.config.variant == IDENTITY else [self.enc, self.dec, self.offset]

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        f = self.config.patch
        if h % f or w % f:
            raise CodecError(f"grid {h}x{w} is not divisible by patch {f}")
        return (self.config.latent_dim, h // f, w // f)

    # tape versions ------------------------------------------------------------------

    def encode_t(self, x: Tensor, params=None) -> Tensor:
        if x.ndim != 3 or x.shape[0] != N_CHANNELS:
            raise ShapeError("encode", x.shape)
        if self.config.variant == IDENTITY:
            return x
        enc, _, off = params or [Tensor(p) for p in self.params]
        f = self.config.patch
        d, h, w = self.latent_shape(*x.shape[1:])
        y = tape.reshape(x, (N_CHANNELS, h, f, w, f))
        y = tape.transpose(y, (1, 3, 0, 2, 4))
        y = tape.reshape(y, (h * w, self.config.patch_dim))
        y = y - tape.broadcast_to(off, (h * w, self.config.patch_dim))
        z = y @ tape.transpose(enc)
        return tape.reshape(tape.transpose(z), (d, h, w))

    def decode_t(self, z: Tensor, params=None) -> Tensor:
        d = self.config.latent_dim
        if z.ndim != 3 or z.shape[0] != d:
            raise ShapeError("decode", z.shape, (d, "h", "w"))
        if self.config.variant == IDENTITY:
            x = z
        else:
            _, dec, off = params or [Tensor(p) for p in self.params]
            f = self.config.patch
            _, h, w = z.shape
            y = tape.transpose(tape.reshape(z, (d, h * w))) @ tape.transpose(dec)
            y = y + tape.broadcast_to(off, (h * w, self.config.patch_dim))
            y = tape.reshape(y, (h, w, N_CHANNELS, f, f))
            x = tape.reshape(tape.transpose(y, (2, 0, 3, 1, 4)), (N_CHANNELS, h * f, w * f))
        lo, hi = raw_lower_upper(x.shape)
        return tape.clamp_st(x, lo, hi)

    # numpy conveniences ---------------------------------------------------------------

    def encode(self, raw: np.ndarray) -> np.ndarray:
        with tape.no_grad():
            return self.encode_t(Tensor(np.asarray(raw, dtype=np.float64))).data

    def decode(self, latent: np.ndarray) -> np.ndarray:
        with tape.no_grad():
            return self.decode_t(Tensor(np.asarray(latent, dtype=np.float64))).data


@dataclass
class CodecSample:
    """One object: its input-view grids and the views used for the render term."""

    grids: list[SplatGrid]
    views: list[View]


def codec_loss(codec: Codec, data: Sequence[CodecSample], weights: LossWeights, params=None,
               background=(0.0, 0.0, 0.0)):
    """Mean over objects of the auto-encoding objective; returns (total, recon, render)."""
    enc = lambda x: codec.encode_t(x, params)  # noqa: E731
    dec = lambda z: codec.decode_t(z, params)  # noqa: E731
    parts = [vae_loss(s.grids, enc, dec, s.views, weights, background) for s in data]
    k = 1.0 / len(parts)
    tot, rec, ren = parts[0]
    for a, b, c in parts[1:]:
        tot, rec, ren = tot + a, rec + b, ren + c
    return tape.scale(tot, k), tape.scale(rec, k), tape.scale(ren, k)


def train_codec(data: Sequence[CodecSample], config: CodecConfig, weights: LossWeights = LossWeights(),
                background=(0.0, 0.0, 0.0)) -> Codec:
    """Train a linear-patch codec with Adam; ``codec.history`` logs (step, total, recon, render)."""
    if config.variant != LINEAR_PATCH:
        raise CodecError("only the linear-patch codec is trainable")
    if not data:
        raise CodecError("training set is empty")
    codec = Codec.create(config)
    opt = Adam(codec.params)
    sched = Schedule(config.lr, max(1, config.steps // 20), config.steps, 0.05 * config.lr)
    for step in range(config.steps):
        leaves = [Tensor(p, requires_grad=True) for p in codec.params]
        total, rec, ren = codec_loss(codec, data, weights, leaves, background)
        vals = (float(total.data), float(rec.data), float(ren.data))
        if not all(math.isfinite(v) for v in vals):
            raise CodecDivergence(f"codec training diverged at step {step}: total={vals[0]} recon={vals[1]} "
                             f"render={vals[2]} seed={config.seed}")
        codec.history.append((step,) + vals)
        tape.backward(total)
        opt.step([p.grad for p in leaves], sched(step))
    return codec


def with_params(codec: Codec, enc, dec, offset) -> Codec:
    return replace(codec, enc=np.asarray(enc, float), dec=np.asarray(dec, float),
                   offset=np.asarray(offset, float), history=[])

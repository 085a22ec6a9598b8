"""Diffusion over packed splat latents.

Two schedule families:

* variance-preserving: ``z_t = sqrt(abar) z + sqrt(1 - abar) eps`` with a cosine
  ``abar`` over ``T`` integer steps, sampled with the ancestral (DDPM) update;
* rectified flow: ``z_t = (1 - t) z + t eps`` for continuous ``t`` in [0, 1],
  sampled with Euler steps on the velocity ``eps - z``.

The denoiser is a small residual conv net with an additive timestep embedding,
one global attention layer over every position of every view, and a
time-gated skip from the noisy latent to the output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tape
from .camera import Camera
from .latents import Codec
from .losses import LossWeights, View, diffsplat_loss
from .optim import Adam, Schedule
from .splat import (SPATIAL_CONCAT, VIEW_CONCAT, PackedLatentBatch, SplatGrid, latents_from_layout,
                    latents_to_layout, pack, plucker_stack)
from .tape import Tensor

log = logging.getLogger(__name__)

VP = "vp"
FLOW = "flow"
PARAMETERIZATIONS = ("x0", "eps", "velocity")
MAX_LOSS_WEIGHT = 100.0


class DiffusionError(ValueError):
    pass


# schedules -----------------------------------------------------------------------------


class VPSchedule:
    """Cosine schedule; ``abar[0] = 1`` and ``t`` ranges over integers 0..T."""

    family = VP
    sampler = "ancestral"

    def __init__(self, steps: int = 1000, offset: float = 0.008, max_beta: float = 0.999):
        if steps < 1:
            raise DiffusionError("schedule needs at least one step")
        self.steps = steps
        f = lambda s: math.cos((s / steps + offset) / (1 + offset) * math.pi / 2) ** 2  # noqa: E731
        betas = np.array([min(1 - f(i + 1) / f(i), max_beta) for i in range(steps)])
        self.betas = betas
        self.abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    def check_t(self, t) -> int:
        if not (float(t) == int(t) and 0 <= int(t) <= self.steps):
            raise DiffusionError(f"t={t} outside integer range [0, {self.steps}]")
        return int(t)

    def coefficients(self, t) -> tuple[float, float]:
        a = self.abar[self.check_t(t)]
        return math.sqrt(a), math.sqrt(1.0 - a)

    def snr(self, t) -> float:
        a = self.abar[self.check_t(t)]
        return math.inf if a >= 1.0 else a / (1.0 - a)

    def signal_weight(self, t) -> float:
        return float(self.abar[self.check_t(t)])

    def velocity_weight(self, t) -> float:
        a = self.abar[self.check_t(t)]
        return MAX_LOSS_WEIGHT if a >= 1.0 else min(1.0 / (1.0 - a), MAX_LOSS_WEIGHT)

    def sample_t(self, rng: np.random.Generator) -> int:
        return int(rng.integers(1, self.steps + 1))

    def time_input(self, t) -> float:
        return self.check_t(t) / self.steps

    def to_dict(self) -> dict:
        return {"family": VP, "steps": self.steps}


class FlowSchedule:
    """Rectified-flow interpolation with continuous t in [0, 1]."""

    family = FLOW
    sampler = "flow-euler"
    steps = None

    def check_t(self, t) -> float:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise DiffusionError(f"t={t} outside [0, 1]")
        return t

    def coefficients(self, t) -> tuple[float, float]:
        t = self.check_t(t)
        return 1.0 - t, t

    def snr(self, t) -> float:
        t = self.check_t(t)
        return math.inf if t == 0 else (1.0 - t) ** 2 / (t * t)

    def signal_weight(self, t) -> float:
        # snr / (1 + snr), the same signal fraction that abar is for VP
        t = self.check_t(t)
        return (1.0 - t) ** 2 / ((1.0 - t) ** 2 + t * t)

    def velocity_weight(self, t) -> float:
        t = self.check_t(t)
        return MAX_LOSS_WEIGHT if t == 0 else min(1.0 / (t * t), MAX_LOSS_WEIGHT)

    def sample_t(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(0.0, 1.0))

    def time_input(self, t) -> float:
        return self.check_t(t)

    def to_dict(self) -> dict:
        return {"family": FLOW}


def make_schedule(family: str = FLOW, steps: int = 1000):
    if family == VP:
        return VPSchedule(steps)
    if family == FLOW:
        return FlowSchedule()
    raise DiffusionError(f"unknown schedule family {family!r}")


def add_noise(z, eps, t, schedule):
    """Corrupt ``z`` with ``eps`` at level ``t`` (numpy arrays or tape tensors)."""
    if np.shape(z) != np.shape(eps):
        raise DiffusionError(f"noise shape {np.shape(eps)} does not match latent {np.shape(z)}")
    a, b = schedule.coefficients(t)
    return a * z + b * eps


def target(z, eps, t, schedule, parameterization: str):
    """Regression target for a parameterization."""
    a, b = schedule.coefficients(t)
    if parameterization == "x0":
        return z
    if parameterization == "eps":
        return eps
    if parameterization == "velocity":
        return a * eps - b * z if schedule.family == VP else eps - z
    raise DiffusionError(f"unknown parameterization {parameterization!r}")


def to_x0(pred, zt, t, schedule, parameterization: str):
    """x0 estimate from a prediction (works on arrays and tape tensors)."""
    a, b = schedule.coefficients(t)
    if parameterization == "x0":
        return pred
    if parameterization == "eps":
        if a <= 0:
            raise DiffusionError("x0 is undefined from an eps prediction at zero signal")
        return (zt - b * pred) * (1.0 / a)
    if parameterization == "velocity":
        return a * zt - b * pred if schedule.family == VP else zt - t * pred
    raise DiffusionError(f"unknown parameterization {parameterization!r}")


def to_eps(pred, zt, t, schedule, parameterization: str):
    a, b = schedule.coefficients(t)
    if parameterization == "eps":
        return pred
    if parameterization == "velocity":
        return b * zt + a * pred if schedule.family == VP else zt + (1.0 - t) * pred
    x0 = to_x0(pred, zt, t, schedule, parameterization)
    if b <= 0:
        raise DiffusionError("eps is undefined at zero noise")
    return (zt - a * x0) * (1.0 / b)


# denoiser ------------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    layout: str = VIEW_CONCAT
    n_views: int = 4
    latent_dim: int = 12
    rows: int = 2
    cols: int = 2
    conditional: bool = True
    parameterization: str = "velocity"
    width: int = 64
    blocks: int = 4
    attention: bool = True
    time_dim: int = 32
    cond_dropout: float = 0.1
    input_skip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.layout not in (VIEW_CONCAT, SPATIAL_CONCAT):
            raise DiffusionError(f"unknown layout {self.layout!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise DiffusionError(f"unknown parameterization {self.parameterization!r}")
        if self.width < 1 or self.blocks < 1 or self.time_dim < 2:
            raise DiffusionError("width, blocks must be >= 1 and time_dim >= 2")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise DiffusionError("condition dropout is a probability")
        if self.layout == SPATIAL_CONCAT and self.rows * self.cols != self.n_views:
            raise DiffusionError("spatial-concat needs rows * cols == n_views")

    @property
    def in_channels(self) -> int:
        d = self.latent_dim
        if self.layout == VIEW_CONCAT:
            return d + 6 + (1 if self.conditional else 0)
        return d + 6 + (d + 1 if self.conditional else 0)


def _he(rng, shape, fan_in, gain=1.0):
    return rng.normal(scale=gain * math.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: DenoiserConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    w, c = cfg.width, cfg.in_channels
    p: dict[str, np.ndarray] = {
        "in.w": _he(rng, (w, c, 3, 3), c * 9), "in.b": np.zeros(w),
        "time.w1": _he(rng, (cfg.time_dim, w), cfg.time_dim), "time.b1": np.zeros(w),
        "time.w2": _he(rng, (w, w), w), "time.b2": np.zeros(w),
    }
    for i in range(cfg.blocks):
        p[f"b{i}.t"] = _he(rng, (w, w), w, 0.5)
        p[f"b{i}.c1.w"] = _he(rng, (w, w, 3, 3), w * 9)
        p[f"b{i}.c1.b"] = np.zeros(w)
        p[f"b{i}.c2.w"] = _he(rng, (w, w, 3, 3), w * 9, 0.2)
        p[f"b{i}.c2.b"] = np.zeros(w)
    if cfg.attention:
        for n in ("q", "k", "v"):
            p[f"attn.{n}"] = rng.normal(scale=1.0 / math.sqrt(w), size=(w, w))
        p["attn.o"] = rng.normal(scale=0.2 / math.sqrt(w), size=(w, w))
    p["out.w"] = _he(rng, (cfg.latent_dim, w, 3, 3), w * 9, 0.1)
    p["out.b"] = np.zeros(cfg.latent_dim)
    if cfg.input_skip:
        # per-channel, time-dependent gain on the noisy latent; starts as the identity for
        # eps/velocity targets, which equal the noise in the pure-noise limit
        p["skip.w"] = np.zeros((w, cfg.latent_dim))
        p["skip.b"] = np.full(cfg.latent_dim, 0.0 if cfg.parameterization == "x0" else 1.0)
    return p


def time_features(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(1, half - 1))
    ang = 1000.0 * t * freqs
    out = np.zeros(dim)
    out[:half] = np.sin(ang)
    out[half:2 * half] = np.cos(ang)
    return out


class Denoiser:
    """F(z_t, t, condition) over a packed (V[+1], C, h, w) or (C, H, W) payload."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, payload: np.ndarray, t_input: float, leaves: dict[str, Tensor] | None = None) -> Tensor:
        """Prediction in latent layout: (V, d, h, w) for view-concat, (d, H, W) for spatial."""
        cfg = self.config
        P = leaves if leaves is not None else self.leaves(False)
        x = np.asarray(payload, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] != cfg.in_channels:
            raise DiffusionError(f"payload has {x.shape[1]} channels, model expects {cfg.in_channels}")
        n, _, hh, ww = x.shape
        w = cfg.width
        temb = Tensor(time_features(t_input, cfg.time_dim)[None])
        temb = tape.relu(temb @ P["time.w1"] + tape.reshape(P["time.b1"], (1, w)))
        temb = tape.relu(temb @ P["time.w2"] + tape.reshape(P["time.b2"], (1, w)))
        h = tape.conv2d(Tensor(x), P["in.w"], P["in.b"])
        for i in range(cfg.blocks):
            tb = tape.broadcast_to(tape.reshape(temb @ P[f"b{i}.t"], (1, w, 1, 1)), (n, w, hh, ww))
            r = tape.conv2d(tape.relu(h), P[f"b{i}.c1.w"], P[f"b{i}.c1.b"]) + tb
            r = tape.conv2d(tape.relu(r), P[f"b{i}.c2.w"], P[f"b{i}.c2.b"])
            h = h + r
            if cfg.attention and i == cfg.blocks // 2 - 1:
                h = h + self._attend(h, P)
        out = tape.conv2d(tape.relu(h), P["out.w"], P["out.b"])
        if cfg.input_skip:
            d = cfg.latent_dim
            gain = temb @ P["skip.w"] + tape.reshape(P["skip.b"], (1, d))
            out = out + tape.broadcast_to(tape.reshape(gain, (1, d, 1, 1)), (n, d, hh, ww)) * Tensor(x[:, :d])
        if cfg.layout == VIEW_CONCAT:
            return out[:cfg.n_views] if n > cfg.n_views else out
        return tape.reshape(out, out.shape[1:])

    def _attend(self, h: Tensor, P) -> Tensor:
        n, w, hh, ww = h.shape
        tok = tape.reshape(tape.transpose(h, (0, 2, 3, 1)), (n * hh * ww, w))
        tok = tape.layer_norm(tok)
        a = tape.attention(tok @ P["attn.q"], tok @ P["attn.k"], tok @ P["attn.v"]) @ P["attn.o"]
        return tape.transpose(tape.reshape(a, (n, hh, ww, w)), (0, 3, 1, 2))


# conditioning and packing ------------------------------------------------------------------


def area_resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Box-average (C, H, W) down to (C, h, w); H, W must be multiples of h, w."""
    c, H, W = image.shape
    if H % h or W % w:
        raise DiffusionError(f"image {H}x{W} cannot be area-resized to {h}x{w}")
    return image.reshape(c, h, H // h, w, W // w).mean(axis=(2, 4))


def condition_image(image: np.ndarray, camera: Camera, latent_shape: tuple[int, int, int],
                    resolution: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Condition payload (image latent (d, h, w), Plücker map (6, h, w)).

    The image is area-downsampled to the latent grid and zero-padded to d
    channels. ``resolution`` is the expected training image size.
    """
    image = np.asarray(image, dtype=np.float64)
    d, h, w = latent_shape
    if image.ndim != 3 or image.shape[0] != 3:
        raise DiffusionError(f"condition image must be 3xHxW, got {image.shape}")
    if resolution is not None and image.shape[1:] != tuple(resolution):
        raise DiffusionError(f"condition image {image.shape[1:]} does not match training resolution {resolution}")
    small = area_resize(image, h, w)
    lat = np.zeros((d, h, w))
    lat[:min(3, d)] = small[:min(3, d)]
    return lat, plucker_stack([camera], h, w)[0]


def zero_condition(latent_shape) -> tuple[np.ndarray, np.ndarray]:
    d, h, w = latent_shape
    return np.zeros((d, h, w)), np.zeros((6, h, w))


def build_payload(cfg: DenoiserConfig, zt_views: np.ndarray, pluckers: np.ndarray, condition) -> PackedLatentBatch:
    """Pack noisy per-view latents; ``condition`` None means the all-zero payload."""
    if not cfg.conditional:
        return pack(zt_views, pluckers, cfg.layout, cfg.rows, cfg.cols)
    cond = condition if condition is not None else zero_condition(zt_views.shape[1:])
    batch = pack(zt_views, pluckers, cfg.layout, cfg.rows, cfg.cols, condition=cond)
    if condition is None:
        _zero_condition_mask(batch)
    return batch


def _zero_condition_mask(batch: PackedLatentBatch) -> None:
    d = batch.latent_dim
    if batch.layout == VIEW_CONCAT:
        batch.payload[batch.n_views:] = 0.0
    else:
        batch.payload[d + 6:] = 0.0
    batch.meta["unconditional"] = True


# training ---------------------------------------------------------------------------------


@dataclass
class TrainObject:
    """One training object: clean per-view latents, grid cameras, GT views, condition."""

    latents: np.ndarray
    cameras: list[Camera]
    views: list[View]
    condition: tuple[np.ndarray, np.ndarray] | None = None


@dataclass
class StepResult:
    step: int
    t: float
    total: float
    diff: float
    render: float
    dropped: bool
    grads: dict | None = None


class NumericalError(FloatingPointError):
    pass


@dataclass
class Trainer:
    model: Denoiser
    codec: Codec
    schedule: object
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-3
    total_steps: int = 3000
    warmup: int = 100
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        names = sorted(self.model.params)
        self._names = names
        self.opt = Adam([self.model.params[k] for k in names], betas=(0.9, 0.99))
        self.sched = Schedule(self.lr, self.warmup, self.total_steps, 0.05 * self.lr)
        self.step = 0
        self.log: list[StepResult] = []

    def loss_terms(self, obj: TrainObject, t, eps: np.ndarray, dropped: bool, leaves=None):
        """(total, diff, render) tensors for given noise level, noise and dropout."""
        cfg = self.model.config
        zt = add_noise(obj.latents, eps, t, self.schedule)
        pl = plucker_stack(obj.cameras, *obj.latents.shape[2:])
        cond = None if dropped else obj.condition
        batch = build_payload(cfg, zt, pl, cond)
        pred = self.model.forward(batch.payload, self.schedule.time_input(t), leaves)
        zt_l = Tensor(latents_to_layout(zt, cfg.layout, cfg.rows, cfg.cols))
        x0 = to_x0(pred, zt_l, t, self.schedule, cfg.parameterization)
        x0 = latents_from_layout(x0, cfg.layout, cfg.rows, cfg.cols)
        return diffsplat_loss(x0, Tensor(obj.latents), t, self.codec.decode_t, obj.cameras, obj.views,
                              self.schedule, self.weights, cfg.parameterization, self.background)

    def draw(self, obj: TrainObject):
        t = self.schedule.sample_t(self.rng)
        eps = self.rng.standard_normal(obj.latents.shape)
        dropped = bool(self.rng.random() < self.model.config.cond_dropout) if self.model.config.conditional else False
        return t, eps, dropped

    def train_step(self, obj: TrainObject, keep_grads: bool = False) -> StepResult:
        t, eps, dropped = self.draw(obj)
        leaves = self.model.leaves()
        total, d, r = self.loss_terms(obj, t, eps, dropped, leaves)
        vals = (float(total.data), float(d.data), float(r.data))
        if not all(math.isfinite(v) for v in vals):
            raise NumericalError(f"non-finite loss at step {self.step}: t={t} seed={self.seed} "
                                 f"total={vals[0]} diff={vals[1]} render={vals[2]}")
        tape.backward(total)
        grads = [leaves[k].grad for k in self._names]
        self.opt.step(grads, self.sched(min(self.step, self.total_steps - 1)))
        res = StepResult(self.step, float(t), *vals, dropped,
                         {k: g.copy() for k, g in zip(self._names, grads) if g is not None} if keep_grads else None)
        self.log.append(res)
        self.step += 1
        return res

    def fit(self, obj: TrainObject, steps: int, log_every: int = 0) -> list[StepResult]:
        out = []
        for _ in range(steps):
            r = self.train_step(obj)
            out.append(r)
            if log_every and r.step % log_every == 0:
                log.info("step %d t=%.3f total=%.5f diff=%.5f render=%.5f", r.step, r.t, r.total, r.diff, r.render)
        return out


# sampling ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleConfig:
    sampler: str = "flow-euler"
    steps: int = 28
    guidance_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.sampler not in ("ancestral", "flow-euler"):
            raise DiffusionError(f"unknown sampler {self.sampler!r}")
        if self.steps < 1:
            raise DiffusionError("sampling needs at least one step")
        if not self.guidance_scale >= 0:
            raise DiffusionError("guidance scale must be >= 0")


def guided_prediction(model: Denoiser, zt_views: np.ndarray, pluckers: np.ndarray, t_input: float,
                      condition, scale: float) -> np.ndarray:
    """(1 - s) * uncond + s * cond, in latent layout; exact at s = 0 and s = 1."""
    cfg = model.config
    with tape.no_grad():
        if not cfg.conditional:
            return model.forward(build_payload(cfg, zt_views, pluckers, None).payload, t_input).data
        unc = model.forward(build_payload(cfg, zt_views, pluckers, None).payload, t_input).data
        if condition is None:
            return unc
        con = model.forward(build_payload(cfg, zt_views, pluckers, condition).payload, t_input).data
    return (1.0 - scale) * unc + scale * con


def sample_latents(model: Denoiser, cameras: Sequence[Camera], schedule, config: SampleConfig = SampleConfig(),
                   condition=None, latent_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Per-view clean latents (V, d, h, w) drawn from the model."""
    cfg = model.config
    if config.sampler != schedule.sampler:
        raise DiffusionError(f"sampler {config.sampler!r} does not match the {schedule.family} schedule")
    if len(cameras) != cfg.n_views:
        raise DiffusionError(f"model expects {cfg.n_views} cameras, got {len(cameras)}")
    h, w = latent_hw or (cameras[0].height, cameras[0].width)
    rng = np.random.default_rng(config.seed)
    z = rng.standard_normal((cfg.n_views, cfg.latent_dim, h, w))
    pl = plucker_stack(cameras, h, w)
    par = cfg.parameterization

    def predict(zv, t):
        p = guided_prediction(model, zv, pl, schedule.time_input(t), condition, config.guidance_scale)
        return latents_from_layout(p, cfg.layout, cfg.rows, cfg.cols)

    if schedule.family == FLOW:
        ts = np.linspace(1.0, 0.0, config.steps + 1)
        for t, s in zip(ts[:-1], ts[1:]):
            p = predict(z, t)
            v = p if par == "velocity" else (z - to_x0(p, z, t, schedule, par)) / t
            z = z + (s - t) * v
        return z
    ts = np.unique(np.round(np.linspace(0, schedule.steps, config.steps + 1)).astype(int))[::-1]
    for t, s in zip(ts[:-1], ts[1:]):
        p = predict(z, int(t))
        x0 = to_x0(p, z, int(t), schedule, par)
        ab_t, ab_s = schedule.abar[t], schedule.abar[s]
        a_ts = ab_t / ab_s
        c0 = math.sqrt(ab_s) * (1.0 - a_ts) / (1.0 - ab_t)
        ct = math.sqrt(a_ts) * (1.0 - ab_s) / (1.0 - ab_t)
        z = c0 * x0 + ct * z
        if s > 0:
            var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - a_ts)
            z = z + math.sqrt(max(var, 0.0)) * rng.standard_normal(z.shape)
    return z


def sample(model: Denoiser, codec: Codec, cameras: Sequence[Camera], schedule,
           config: SampleConfig = SampleConfig(), condition=None, latent_hw=None) -> list[SplatGrid]:
    """Sample latents and decode them into valid splat grids."""
    z = sample_latents(model, cameras, schedule, config, condition, latent_hw)
    grids = [SplatGrid(codec.decode(z[i]), cam) for i, cam in enumerate(cameras)]
    for g in grids:
        g.validate()
    return grids


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)

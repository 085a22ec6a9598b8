"""Per-scene fitting of pixel-aligned splat grids to posed images.

Optimization runs on unconstrained logits: unit-range channels pass through a
sigmoid and the quaternion channels are renormalized after every step, so each
iterate is a valid grid by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tape
from .losses import LossWeights, View, psnr, render_loss
from .optim import Adam, Schedule
from .raster import rasterize
from .splat import (COLOR, DEPTH, OPACITY, ROTATION, SCALE, SplatGrid, concat_tape_primitives, lift_grids,
                    lift_tensor, normalize_rotations)
from .tape import Tensor

log = logging.getLogger(__name__)

INIT_EPS = 1e-3
MAX_LOGIT = 30.0  # sigmoid(30) < 1 in float64, so activations never reach their endpoints


class FitError(FloatingPointError):
    """Raised on a non-finite loss; carries the last finite grids."""

    def __init__(self, message: str, grids=None, step: int = -1, history=None):
        super().__init__(message)
        self.grids = grids
        self.step = step
        self.history = history or []


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    peak_lr: float = 0.05
    warmup: int = 50
    lr_floor: float = 0.0025
    perceptual_start: float = 0.25
    seed: int = 0
    views_per_step: int | None = None
    eval_every: int = 25
    target_psnr: float | None = None
    stop_at_target: bool = False
    guidance: bool = True
    align_normals: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak learning rate must be positive")
        if not 0.0 <= self.perceptual_start <= 1.0:
            raise ValueError("perceptual_start is a fraction of the run in [0, 1]")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.warmup, self.iterations, self.lr_floor)


@dataclass
class FitResult:
    grids: list[SplatGrid]
    losses: list[float]
    evals: list[tuple[int, float]] = field(default_factory=list)
    reached: int | None = None

    def psnr_at(self, step: int) -> float | None:
        for s, p in self.evals:
            if s == step:
                return p
        return None


def _quat_to_z(normals: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) rotating +z onto each normal (..., 3)."""
    n = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
    z = np.array([0.0, 0.0, 1.0])
    w = 1.0 + n @ z
    xyz = np.cross(z, n)
    q = np.concatenate([w[..., None], xyz], axis=-1)
    flip = w < 1e-9
    q[flip] = np.array([0.0, 1.0, 0.0, 0.0])
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def init_grid(views: Sequence[View], guidance: bool = True, align_normals: bool = False) -> list[SplatGrid]:
    """Initial grids from input views: color from pixels, opacity from the mask.

    With ``guidance`` and a coordinate map, depth is the inverse depth
    activation of each pixel's coordinate z-depth (clamped); otherwise 0.5.
    """
    grids = []
    for v in views:
        cam = v.camera
        h, w = cam.height, cam.width
        raw = np.zeros((12, h, w))
        raw[COLOR] = np.clip(v.image, 0.0, 1.0)
        raw[OPACITY] = np.clip(v.mask, 0.0, 1.0)
        raw[SCALE] = 0.5
        raw[ROTATION.start] = 1.0
        raw[DEPTH] = 0.5
        if guidance and v.coords is not None:
            if v.coords.shape != (3, h, w):
                raise ValueError(f"coordinate map {v.coords.shape} does not match view {h}x{w}")
            valid = np.abs(v.coords).sum(0) > 0
            zc = (v.coords.transpose(1, 2, 0) @ cam.R.T + cam.t)[..., 2]
            sig = np.clip((zc - cam.distance + 1.0) / 2.0, INIT_EPS, 1.0 - INIT_EPS)
            raw[DEPTH] = np.where(valid, sig, 0.5)
        if align_normals and v.normals is not None:
            if v.normals.shape != (3, h, w):
                raise ValueError(f"normal map {v.normals.shape} does not match view {h}x{w}")
            n = v.normals.transpose(1, 2, 0)
            ok = np.linalg.norm(n, axis=-1) > 0.5
            q = _quat_to_z(np.where(ok[..., None], n, [0.0, 0.0, 1.0]))
            raw[ROTATION] = np.where(ok[None], q.transpose(2, 0, 1), raw[ROTATION])
        grids.append(SplatGrid(raw, cam))
    return grids


def _logit(p):
    p = np.clip(p, INIT_EPS, 1.0 - INIT_EPS)
    return np.log(p) - np.log1p(-p)


def _to_params(grid: SplatGrid) -> np.ndarray:
    p = _logit(grid.raw)
    p[ROTATION] = grid.raw[ROTATION]
    return p


def _raw_tensor(p: Tensor) -> Tensor:
    return tape.concat([tape.sigmoid(p[0:7]), p[7:11], tape.sigmoid(p[11:12])], axis=0)


def _raw_numpy(p: np.ndarray) -> np.ndarray:
    raw = tape.sigmoid_np(p)
    raw[ROTATION] = p[ROTATION]
    return raw


def _project_params(p: np.ndarray) -> None:
    """Bound the logits and renormalize quaternions, in place."""
    np.clip(p[:ROTATION.start], -MAX_LOGIT, MAX_LOGIT, out=p[:ROTATION.start])
    np.clip(p[DEPTH], -MAX_LOGIT, MAX_LOGIT, out=p[DEPTH])
    q = p[ROTATION].reshape(4, -1).T
    qn, _ = normalize_rotations(q)
    p[ROTATION] = qn.T.reshape(p[ROTATION].shape)


def evaluate(grids: Sequence[SplatGrid], views: Sequence[View], background=(0.0, 0.0, 0.0)) -> float:
    """Mean image PSNR of the rendered grids over ``views``."""
    prims = lift_grids(grids)
    return float(np.mean([psnr(rasterize(prims, v.camera, background=background).image, v.image)
                          for v in views]))


def fit(input_views: Sequence[View], supervision: Sequence[View], config: FitConfig = FitConfig(),
        weights: LossWeights = LossWeights(), background=(0.0, 0.0, 0.0),
        eval_views: Sequence[View] | None = None, init: Sequence[SplatGrid] | None = None) -> FitResult:
    """Fit one grid per input view to ``supervision`` (which should include the inputs)."""
    if len(supervision) < len(input_views):
        raise ValueError("need at least as many supervision views as input views")
    grids = list(init) if init is not None else init_grid(input_views, config.guidance, config.align_normals)
    cams = [g.camera for g in grids]
    params = [_to_params(g) for g in grids]
    for p in params:
        _project_params(p)
    opt = Adam(params)
    sched = config.schedule
    rng = np.random.default_rng(config.seed)
    start_p = int(math.ceil(config.perceptual_start * config.iterations))
    result = FitResult([], [])

    def snapshot():
        return [SplatGrid(_raw_numpy(p), c) for p, c in zip(params, cams)]

    def do_eval(step):
        if not eval_views:
            return
        val = evaluate(snapshot(), eval_views, background)
        result.evals.append((step, val))
        if result.reached is None and config.target_psnr is not None and val >= config.target_psnr:
            result.reached = step

    do_eval(0)
    n_steps = config.iterations if config.max_steps is None else min(config.iterations, config.max_steps)
    for it in range(n_steps):
        sup = list(supervision)
        if config.views_per_step and config.views_per_step < len(sup):
            sup = [sup[i] for i in sorted(rng.choice(len(sup), config.views_per_step, replace=False))]
        leaves = [Tensor(p, requires_grad=True) for p in params]
        prims = concat_tape_primitives([lift_tensor(_raw_tensor(x), c) for x, c in zip(leaves, cams)])
        loss = render_loss(prims, sup, weights, background, use_perceptual=it >= start_p)
        val = float(loss.data)
        if not math.isfinite(val):
            raise FitError(f"non-finite loss at iteration {it}", snapshot(), it, result.losses)
        tape.backward(loss)
        opt.step([x.grad for x in leaves], sched(it))
        for p in params:
            _project_params(p)
        result.losses.append(val)
        step = it + 1
        if eval_views and (step % config.eval_every == 0 or step == n_steps):
            do_eval(step)
            if config.stop_at_target and result.reached is not None:
                break
    result.grids = snapshot()
    for g in result.grids:
        g.validate()
    return result

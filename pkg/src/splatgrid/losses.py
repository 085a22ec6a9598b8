"""Objectives and image metrics.

Every loss takes and returns tape tensors so it can be differentiated; the
image metrics (:func:`psnr`, :func:`ssim`) return plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tape
from .camera import Camera
from .raster import render_tensor
from .splat import DEFAULT_BOUNDS, ScaleBounds, TapePrimitives, concat_tape_primitives, lift_tensor
from .tape import ShapeError, Tensor

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PROXY_SCALES = 3


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Loss coefficients. ``omega=None`` picks the default for the parameterization."""

    lambda_p: float = 1.0
    lambda_alpha: float = 1.0
    lambda_r: float = 1.0
    lambda_diff: float = 1.0
    lambda_render: float = 1.0
    omega: str | None = None
    omega_r: str = "signal"

    def __post_init__(self):
        for name in ("lambda_p", "lambda_alpha", "lambda_r", "lambda_diff", "lambda_render"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise LossError(f"{name} must be a finite non-negative number, got {v}")
        if self.omega is not None and self.omega not in OMEGA:
            raise LossError(f"unknown noise weighting {self.omega!r}")
        if self.omega_r not in OMEGA_R:
            raise LossError(f"unknown render weighting {self.omega_r!r}")


@dataclass
class View:
    """A posed ground-truth view: image (3,H,W), mask (H,W), optional guidance maps."""

    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    coords: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (3, h, w) or self.mask.shape != (h, w):
            raise LossError(f"view arrays {self.image.shape}/{self.mask.shape} do not match camera {h}x{w}")


# noise-level weightings. Each takes (schedule, t). The diffusion loss is always
# measured on x0 estimates, so these are the x0-space equivalents of the usual
# per-parameterization losses.


def _w_unit(schedule, t):
    return 1.0


def _w_snr_ratio(schedule, t):
    s = schedule.snr(t)
    return 1.0 if math.isinf(s) else s / (1.0 + s)


def _w_min_snr(schedule, t, gamma: float = 5.0):
    # min(SNR, g)/SNR on the eps loss equals min(SNR, g) on the x0 loss
    return min(schedule.snr(t), gamma)


def _w_velocity(schedule, t):
    return schedule.velocity_weight(t)


OMEGA: dict[str, Callable] = {
    "unit": _w_unit,
    "snr-ratio": _w_snr_ratio,
    "min-snr": _w_min_snr,
    "velocity": _w_velocity,
}

DEFAULT_OMEGA = {"x0": "unit", "eps": "min-snr", "velocity": "velocity"}


def _wr_signal(schedule, t):
    return schedule.signal_weight(t)


OMEGA_R: dict[str, Callable] = {"signal": _wr_signal, "unit": _w_unit}


def omega(weights: LossWeights, parameterization: str) -> Callable:
    return OMEGA[weights.omega or DEFAULT_OMEGA[parameterization]]


# pixel losses -------------------------------------------------------------------------


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def mse(a, b) -> Tensor:
    a, b = _pair("mse", a, b)
    d = a - b
    return tape.mean(d * d)


def _ssim_map(a: Tensor, b: Tensor, window: int) -> Tensor:
    k = min(window, a.shape[-1], a.shape[-2])
    mu_a = tape.box_filter(a, k)
    mu_b = tape.box_filter(b, k)
    aa = tape.box_filter(a * a, k)
    bb = tape.box_filter(b * b, k)
    ab = tape.box_filter(a * b, k)
    mab = mu_a * mu_b
    va = aa - mu_a * mu_a
    vb = bb - mu_b * mu_b
    cov = ab - mab
    num = (tape.scale(mab, 2.0) + SSIM_C1) * (tape.scale(cov, 2.0) + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2)
    return num / den


def ssim_tensor(a, b, window: int = SSIM_WINDOW) -> Tensor:
    a, b = _pair("ssim", a, b)
    return tape.mean(_ssim_map(a, b, window))


def _halve(x: Tensor) -> Tensor:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if (h, w) != (2 * h2, 2 * w2):
        x = x[:, :2 * h2, :2 * w2]
    y = tape.reshape(x, (c, h2, 2, w2, 2))
    return tape.scale(tape.sum_(y, axis=(2, 4)), 0.25)


def _grad_l1(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    terms = []
    if d.shape[2] > 1:
        terms.append(tape.mean(tape.abs_(d[:, :, 1:] - d[:, :, :-1])))
    if d.shape[1] > 1:
        terms.append(tape.mean(tape.abs_(d[:, 1:, :] - d[:, :-1, :])))
    if not terms:
        return tape.scale(tape.sum_(d), 0.0)
    return tape.scale(terms[0] if len(terms) == 1 else terms[0] + terms[1], 1.0 / len(terms))


def perceptual_proxy(a, b, scales: int = PROXY_SCALES) -> Tensor:
    """Weight-free stand-in for a learned perceptual distance.

    Mean over dyadic scales of (1 - SSIM)/2, plus the mean absolute difference
    of horizontal and vertical finite-difference gradients.
    """
    a, b = _pair("perceptual_proxy", a, b)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ShapeError("perceptual_proxy (need 3xHxW)", a.shape)
    terms = []
    x, y = a, b
    for s in range(scales):
        terms.append(tape.scale(1.0 - ssim_tensor(x, y), 0.5))
        if s + 1 < scales:
            if min(x.shape[1:]) < 2:
                break
            x, y = _halve(x), _halve(y)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return tape.scale(total, 1.0 / len(terms)) + _grad_l1(a, b)


PERCEPTUAL: dict[str, Callable] = {"ssim-grad": perceptual_proxy}


def _render_prims(prims) -> TapePrimitives:
    if isinstance(prims, TapePrimitives):
        return prims
    return TapePrimitives(*(Tensor(getattr(prims, f)) for f in
                            ("colors", "positions", "scales", "rotations", "opacities")))


def view_loss(render: Tensor, view: View, weights: LossWeights, use_perceptual: bool = True) -> Tensor:
    """Per-view term: mse(I) + lambda_p * proxy(I) + lambda_alpha * mse(M)."""
    img = render[:3]
    m = render[3]
    loss = mse(img, view.image)
    if use_perceptual and weights.lambda_p > 0:
        loss = loss + tape.scale(perceptual_proxy(img, tape.Tensor(view.image)), weights.lambda_p)
    if weights.lambda_alpha > 0:
        loss = loss + tape.scale(mse(m, view.mask), weights.lambda_alpha)
    return loss


def render_loss(primitives, views: Sequence[View], weights: LossWeights = LossWeights(),
                background=(0.0, 0.0, 0.0), use_perceptual: bool = True) -> Tensor:
    """Mean over views of the per-view rendering term."""
    if len(views) < 1:
        raise LossError("render_loss needs at least one view")
    prims = _render_prims(primitives)
    total = None
    for v in views:
        r = render_tensor(prims, v.camera, background)
        term = view_loss(r, v, weights, use_perceptual)
        total = term if total is None else total + term
    return tape.scale(total, 1.0 / len(views))


def lift_many(grids: Sequence[Tensor], cameras: Sequence[Camera],
              bounds: ScaleBounds = DEFAULT_BOUNDS) -> TapePrimitives:
    if len(grids) != len(cameras):
        raise LossError(f"{len(grids)} grids but {len(cameras)} cameras")
    return concat_tape_primitives([lift_tensor(g, c, bounds) for g, c in zip(grids, cameras)])


def vae_loss(grids: Sequence, encode: Callable, decode: Callable, views: Sequence[View],
             weights: LossWeights = LossWeights(), background=(0.0, 0.0, 0.0),
             bounds: ScaleBounds = DEFAULT_BOUNDS) -> tuple[Tensor, Tensor, Tensor]:
    """Auto-encoding objective; returns (total, reconstruction term, render term).

    ``grids`` are SplatGrids; ``encode``/``decode`` map a 12xHxW tensor to a
    latent and back.
    """
    recon = None
    decoded = []
    for g in grids:
        x = Tensor(g.raw)
        y = decode(encode(x))
        if y.shape != x.shape:
            raise ShapeError("vae_loss (decoded grid)", y.shape, x.shape)
        decoded.append(y)
        term = mse(y, x)
        recon = term if recon is None else recon + term
    recon = tape.scale(recon, 1.0 / len(grids))
    if weights.lambda_r > 0:
        rend = render_loss(lift_many(decoded, [g.camera for g in grids], bounds), views, weights, background)
        total = recon + tape.scale(rend, weights.lambda_r)
    else:
        rend = tape.scale(tape.sum_(decoded[0]), 0.0)
        total = recon
    return total, recon, rend


def diff_loss(denoised, clean, weight: float) -> Tensor:
    """weight * mean squared error between the x0 estimate and the clean latent."""
    if not (weight >= 0 and math.isfinite(weight)):
        raise LossError(f"noise-level weight must be finite and >= 0, got {weight}")
    return tape.scale(mse(denoised, clean), weight)


def diffsplat_loss(denoised: Tensor, clean: Tensor, t: float, decode: Callable, cameras: Sequence[Camera],
                   views: Sequence[View], schedule, weights: LossWeights = LossWeights(),
                   parameterization: str = "velocity", background=(0.0, 0.0, 0.0),
                   bounds: ScaleBounds = DEFAULT_BOUNDS) -> tuple[Tensor, Tensor, Tensor]:
    """Combined objective; returns (total, diffusion term, rendering term).

    ``denoised``/``clean`` are per-view latents (V, d, h, w); ``decode`` maps one
    latent (d, h, w) to a 12xHxW grid; ``cameras`` are the grid cameras.
    The rendering term is reported unweighted; the total applies
    lambda_render * omega_r(t).
    """
    schedule.check_t(t)
    zero = tape.scale(tape.sum_(denoised), 0.0)
    if weights.lambda_diff > 0:
        d = diff_loss(denoised, clean, omega(weights, parameterization)(schedule, t))
        total = tape.scale(d, weights.lambda_diff)
    else:
        d = zero
        total = zero
    if weights.lambda_render > 0:
        grids = [decode(denoised[i]) for i in range(denoised.shape[0])]
        r = render_loss(lift_many(grids, cameras, bounds), views, weights, background)
        total = total + tape.scale(r, weights.lambda_render * OMEGA_R[weights.omega_r](schedule, t))
    else:
        r = zero
    return total, d, r


# metrics ------------------------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr", a.shape, b.shape)
    err = float(np.mean((a - b) ** 2))
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("ssim", a.shape, b.shape)
    if a.ndim == 2:
        a, b = a[None], b[None]
    with tape.no_grad():
        return float(ssim_tensor(Tensor(a), Tensor(b), window).data)

"""Splat grids: activations, lifting pixel-aligned grids to 3D Gaussians, latent layouts.

A splat grid stores one Gaussian per pixel in 12 channels::

    0-2  color         [0, 1]
    3    opacity       [0, 1]
    4-6  sigmoid(scale logit)  [0, 1]
    7-10 quaternion (w, x, y, z), raw, [-1, 1]
    11   sigmoid(depth logit)  [0, 1]
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tape
from .camera import Camera, camera_rays, pixel_centers, plucker_map
from .tape import Tensor

log = logging.getLogger(__name__)

N_CHANNELS = 12
COLOR = slice(0, 3)
OPACITY = 3
SCALE = slice(4, 7)
ROTATION = slice(7, 11)
DEPTH = 11
UNIT_CHANNELS = [0, 1, 2, 3, 4, 5, 6, 11]

S_MIN = 5e-4
S_MAX = 2e-2

VIEW_CONCAT = "view-concat"
SPATIAL_CONCAT = "spatial-concat"
LAYOUTS = (VIEW_CONCAT, SPATIAL_CONCAT)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleBounds:
    s_min: float = S_MIN
    s_max: float = S_MAX

    def __post_init__(self):
        if not (0 < self.s_min < self.s_max):
            raise GridError(f"need 0 < s_min < s_max, got {self.s_min}, {self.s_max}")


DEFAULT_BOUNDS = ScaleBounds()


def _check_unit(x, what: str):
    x = np.asarray(x)
    if np.any(x < 0) or np.any(x > 1) or np.any(~np.isfinite(x)):
        raise GridError(f"{what} must lie in [0, 1]")


def activate_scale(raw_sigmoid, bounds: ScaleBounds = DEFAULT_BOUNDS):
    """s = s_min * x + s_max * (1 - x); decreasing in x."""
    _check_unit(raw_sigmoid, "scale input")
    x = np.asarray(raw_sigmoid, dtype=np.float64)
    return bounds.s_min * x + bounds.s_max * (1.0 - x)


def inverse_scale(scale, bounds: ScaleBounds = DEFAULT_BOUNDS):
    return (bounds.s_max - np.asarray(scale, dtype=np.float64)) / (bounds.s_max - bounds.s_min)


def activate_depth(raw_sigmoid, camera_distance: float):
    """z-depth d = 2x - 1 + ||t||, i.e. within one unit of the camera distance."""
    _check_unit(raw_sigmoid, "depth input")
    if camera_distance <= 1:
        raise GridError(f"camera distance must exceed 1, got {camera_distance}")
    return 2.0 * np.asarray(raw_sigmoid, dtype=np.float64) - 1.0 + camera_distance


def inverse_depth(depth, camera_distance: float, eps: float = 1e-3):
    return np.clip((np.asarray(depth, dtype=np.float64) - camera_distance + 1.0) / 2.0, eps, 1.0 - eps)


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_rotation(raw) -> tuple[np.ndarray, bool]:
    """Unit quaternion and a flag set when the input norm was degenerate."""
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw)
    if not n > 1e-8:
        log.warning("degenerate quaternion %s replaced by identity", raw)
        return IDENTITY_QUAT.copy(), True
    return raw / n, False


def normalize_rotations(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`normalize_rotation` over the last axis."""
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    bad = ~(n[..., 0] > 1e-8)
    out = raw / np.where(bad[..., None], 1.0, n)
    out[bad] = IDENTITY_QUAT
    return out, bad


@dataclass(frozen=True)
class GaussianPrimitive:
    color: np.ndarray
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float


@dataclass
class Primitives:
    """A batch of Gaussians stored as arrays (N,3), (N,3), (N,3), (N,4), (N,)."""

    colors: np.ndarray
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        n = len(self.colors)
        if not all(len(a) == n for a in (self.positions, self.scales, self.rotations, self.opacities)):
            raise GridError("primitive arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.colors)

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(self.colors[i], self.positions[i], self.scales[i],
                                 self.rotations[i], float(self.opacities[i]))

    @classmethod
    def empty(cls) -> "Primitives":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def concatenate(cls, parts: Sequence["Primitives"]) -> "Primitives":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("colors", "positions", "scales", "rotations", "opacities")))

    def subset(self, idx) -> "Primitives":
        return Primitives(self.colors[idx], self.positions[idx], self.scales[idx],
                          self.rotations[idx], self.opacities[idx])

    def validate(self, bounds: ScaleBounds | None = DEFAULT_BOUNDS, quat_tol: float = 1e-6) -> None:
        """Raise GridError on the first primitive violating an invariant."""
        checks = [
            ("color in [0,1]", (self.colors >= 0).all(1) & (self.colors <= 1).all(1)),
            ("opacity in [0,1]", (self.opacities >= 0) & (self.opacities <= 1)),
            ("unit quaternion", np.abs(np.linalg.norm(self.rotations, axis=1) - 1) <= quat_tol),
            ("finite position", np.isfinite(self.positions).all(1)),
        ]
        if bounds is not None:
            checks.append(("scale in (s_min, s_max)",
                           (self.scales > bounds.s_min).all(1) & (self.scales < bounds.s_max).all(1)))
        for name, ok in checks:
            if not ok.all():
                raise GridError(f"primitive {int(np.argmin(ok))} violates {name}")


@dataclass
class SplatGrid:
    raw: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 3 or self.raw.shape[0] != N_CHANNELS:
            raise GridError(f"grid must be 12xHxW, got {self.raw.shape}")

    @property
    def height(self) -> int:
        return self.raw.shape[1]

    @property
    def width(self) -> int:
        return self.raw.shape[2]

    def validate(self) -> None:
        unit = self.raw[UNIT_CHANNELS]
        if not np.isfinite(self.raw).all():
            raise GridError("grid contains non-finite values")
        if unit.min() < 0 or unit.max() > 1:
            raise GridError("unit-range channel outside [0, 1]")
        q = self.raw[ROTATION]
        if q.min() < -1 or q.max() > 1:
            raise GridError("quaternion channel outside [-1, 1]")
        if self.camera.width != self.width or self.camera.height != self.height:
            raise GridError("grid extent does not match its camera")


def clamp_raw(raw: np.ndarray) -> np.ndarray:
    out = np.array(raw, dtype=np.float64, copy=True)
    out[UNIT_CHANNELS] = np.clip(out[UNIT_CHANNELS], 0.0, 1.0)
    out[ROTATION] = np.clip(out[ROTATION], -1.0, 1.0)
    return out


INTERIOR_EPS = 1e-6  # keeps decoded scale/depth sigmoids off the interval endpoints


def raw_lower_upper(shape) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel clamp range for decoded grids.

    Scale and depth stay strictly inside (0, 1) so lifted scales and depths
    never touch the ends of their activation ranges.
    """
    lo = np.zeros(shape)
    hi = np.ones(shape)
    lo[ROTATION] = -1.0
    for ch in (SCALE, DEPTH):
        lo[ch] = INTERIOR_EPS
        hi[ch] = 1.0 - INTERIOR_EPS
    return lo, hi


def lift_grid(grid: SplatGrid, bounds: ScaleBounds = DEFAULT_BOUNDS) -> Primitives:
    """One Gaussian per pixel, placed by unprojecting its activated depth."""
    grid.validate()
    raw = grid.raw
    h, w = grid.height, grid.width
    cam = grid.camera
    depth = activate_depth(raw[DEPTH], cam.distance)
    rays = camera_rays(cam, pixel_centers(w, h))
    pos = depth[..., None] * rays - cam.R.T @ cam.t
    quats, bad = normalize_rotations(raw[ROTATION].reshape(4, -1).T)
    if bad.any():
        log.warning("%d degenerate quaternions replaced by identity", int(bad.sum()))
    return Primitives(
        colors=raw[COLOR].reshape(3, -1).T,
        positions=pos.reshape(-1, 3),
        scales=activate_scale(raw[SCALE], bounds).reshape(3, -1).T,
        rotations=quats,
        opacities=raw[OPACITY].reshape(-1),
    )


def lift_grids(grids: Sequence[SplatGrid], bounds: ScaleBounds = DEFAULT_BOUNDS) -> Primitives:
    return Primitives.concatenate([lift_grid(g, bounds) for g in grids])


@dataclass
class TapePrimitives:
    colors: Tensor
    positions: Tensor
    scales: Tensor
    rotations: Tensor
    opacities: Tensor

    def __len__(self):
        return self.colors.shape[0]

    def numpy(self) -> Primitives:
        return Primitives(self.colors.data, self.positions.data, self.scales.data,
                          self.rotations.data, self.opacities.data)


def lift_tensor(raw: Tensor, camera: Camera, bounds: ScaleBounds = DEFAULT_BOUNDS) -> TapePrimitives:
    """Differentiable :func:`lift_grid` on a 12xHxW tape tensor (no range checks)."""
    _, h, w = raw.shape
    n = h * w

    def channels(sl):
        part = raw[sl]
        c = part.shape[0] if part.ndim == 3 else 1
        return tape.transpose(tape.reshape(part, (c, n)))

    colors = channels(COLOR)
    opac = tape.reshape(raw[OPACITY], (n,))
    sig_s = channels(SCALE)
    scales = tape.add(tape.scale(sig_s, bounds.s_min - bounds.s_max), bounds.s_max)
    quats = tape.l2_normalize(channels(ROTATION), axis=1)
    depth = tape.add(tape.scale(tape.reshape(raw[DEPTH], (n, 1)), 2.0), camera.distance - 1.0)
    rays = camera_rays(camera, pixel_centers(w, h)).reshape(n, 3)
    offset = np.broadcast_to(-camera.R.T @ camera.t, (n, 3))
    pos = tape.add(tape.mul(tape.broadcast_to(depth, (n, 3)), Tensor(rays)), Tensor(np.array(offset)))
    return TapePrimitives(colors, pos, scales, quats, opac)


def concat_tape_primitives(parts: Sequence[TapePrimitives]) -> TapePrimitives:
    if len(parts) == 1:
        return parts[0]
    return TapePrimitives(*(tape.concat([getattr(p, f) for p in parts], axis=0) for f in
                            ("colors", "positions", "scales", "rotations", "opacities")))


# multi-view latent layouts ---------------------------------------------------------


@dataclass
class PackedLatentBatch:
    """Latents with Plücker (and optional condition) channels in one layout.

    view-concat payload: (V [+1], d + 6 [+1], h, w)
    spatial-concat payload: (d + 6 [+ d_img + 1], rows*h, cols*w)
    """

    layout: str
    payload: np.ndarray
    n_views: int
    latent_dim: int
    rows: int = 1
    cols: int = 1
    condition_dim: int = 0
    has_condition: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        if self.layout == VIEW_CONCAT:
            return (self.n_views, self.latent_dim) + self.payload.shape[2:]
        return (self.latent_dim,) + self.payload.shape[1:]


def tile_views(x, rows: int, cols: int):
    """(V, C, h, w) -> (C, rows*h, cols*w), row-major view order."""
    v, c, h, w = x.shape
    if v != rows * cols:
        raise GridError(f"rows*cols={rows * cols} does not match {v} views")
    if isinstance(x, Tensor):
        y = tape.reshape(x, (rows, cols, c, h, w))
        y = tape.transpose(y, (2, 0, 3, 1, 4))
        return tape.reshape(y, (c, rows * h, cols * w))
    return x.reshape(rows, cols, c, h, w).transpose(2, 0, 3, 1, 4).reshape(c, rows * h, cols * w)


def untile_views(x, rows: int, cols: int):
    """Inverse of :func:`tile_views`."""
    c, H, W = x.shape
    if H % rows or W % cols:
        raise GridError(f"extent {H}x{W} not divisible into {rows}x{cols} cells")
    h, w = H // rows, W // cols
    if isinstance(x, Tensor):
        y = tape.reshape(x, (c, rows, h, cols, w))
        y = tape.transpose(y, (1, 3, 0, 2, 4))
        return tape.reshape(y, (rows * cols, c, h, w))
    return x.reshape(c, rows, h, cols, w).transpose(1, 3, 0, 2, 4).reshape(rows * cols, c, h, w)


def plucker_stack(cameras: Sequence[Camera], h: int, w: int) -> np.ndarray:
    return np.stack([plucker_map(c.scaled(w, h)) for c in cameras])


def pack(latents: np.ndarray, pluckers: np.ndarray, layout: str = VIEW_CONCAT, rows: int = 2,
         cols: int = 2, condition: tuple[np.ndarray, np.ndarray] | None = None,
         with_mask: bool | None = None) -> PackedLatentBatch:
    """Combine per-view latents (V, d, h, w) with Plücker maps (V, 6, h, w).

    ``condition`` is ``(image_latent, plucker)``: for view-concat the image latent
    (d, h, w) fills an extra view slot; for spatial-concat it is (d_img, h, w)
    and is placed in cell 0 of an otherwise blank canvas. ``with_mask`` forces
    the mask channel even without a condition (zero-payload unconditional form).
    """
    latents = np.asarray(latents, dtype=np.float64)
    pluckers = np.asarray(pluckers, dtype=np.float64)
    if latents.ndim != 4:
        raise GridError(f"latents must be (V, d, h, w), got {latents.shape}")
    v, d, h, w = latents.shape
    if pluckers.shape != (v, 6, h, w):
        raise GridError(f"plucker maps {pluckers.shape} do not match latents {latents.shape}")
    if layout not in LAYOUTS:
        raise GridError(f"unknown layout {layout!r}")
    masked = condition is not None if with_mask is None else with_mask
    if layout == VIEW_CONCAT:
        slots = [np.concatenate([latents, pluckers], axis=1)]
        if masked:
            slots[0] = np.concatenate([slots[0], np.zeros((v, 1, h, w))], axis=1)
        if condition is not None:
            img, cpl = condition
            img = np.asarray(img, dtype=np.float64)
            if img.shape != (d, h, w) or np.shape(cpl) != (6, h, w):
                raise GridError(f"condition latent {img.shape} does not match view latent {(d, h, w)}")
            slots.append(np.concatenate([img, cpl, np.ones((1, h, w))])[None])
        return PackedLatentBatch(VIEW_CONCAT, np.concatenate(slots, axis=0), v, d,
                                 condition_dim=d if condition is not None else 0,
                                 has_condition=condition is not None, meta={"masked": masked})
    if v != rows * cols:
        raise GridError(f"spatial-concat needs rows*cols == views, got {rows}x{cols} for {v}")
    parts = [tile_views(latents, rows, cols), tile_views(pluckers, rows, cols)]
    dc = 0
    if condition is not None:
        img = np.asarray(condition[0], dtype=np.float64)
        if img.ndim != 3 or img.shape[1:] != (h, w):
            raise GridError(f"condition image {img.shape} does not match cell {(h, w)}")
        dc = img.shape[0]
        canvas = np.zeros((v, dc + 1, h, w))
        canvas[0, :dc] = img
        canvas[0, dc] = 1.0
        parts.append(tile_views(canvas, rows, cols))
    return PackedLatentBatch(SPATIAL_CONCAT, np.concatenate(parts, axis=0), v, d, rows, cols,
                             condition_dim=dc, has_condition=condition is not None)


def unpack(batch: PackedLatentBatch) -> np.ndarray:
    """Per-view latents (V, d, h, w) from a packed batch."""
    d = batch.latent_dim
    if batch.layout == VIEW_CONCAT:
        return batch.payload[:batch.n_views, :d].copy()
    return untile_views(batch.payload[:d], batch.rows, batch.cols)


def unpack_pluckers(batch: PackedLatentBatch) -> np.ndarray:
    d = batch.latent_dim
    if batch.layout == VIEW_CONCAT:
        return batch.payload[:batch.n_views, d:d + 6].copy()
    return untile_views(batch.payload[d:d + 6], batch.rows, batch.cols)


def latents_to_layout(x, layout: str, rows: int = 2, cols: int = 2):
    """Per-view latents (V, d, h, w) to the denoiser's latent layout."""
    return x if layout == VIEW_CONCAT else tile_views(x, rows, cols)


def latents_from_layout(x, layout: str, rows: int = 2, cols: int = 2):
    return x if layout == VIEW_CONCAT else untile_views(x, rows, cols)

"""Procedural scenes rendered by this package's own rasterizer.

Each scene comes with posed views (4 evenly spaced input views, extra random
supervision views, separate held-out views), coordinate maps from the
expected-depth output, and normal maps from coordinate-map gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, CameraIntrinsics, orbit_cameras, pixel_centers, random_cameras, unproject
from .losses import View
from .raster import rasterize
from .splat import DEFAULT_BOUNDS, Primitives, activate_scale, normalize_rotations

KINDS = ("gaussian-cloud", "shell-sphere", "two-object")
COORD_MASK = 0.5


@dataclass
class SynthScene:
    kind: str
    seed: int
    primitives: Primitives
    views: list[View]
    roles: list[str]
    background: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def by_role(self, role: str) -> list[View]:
        return [v for v, r in zip(self.views, self.roles) if r == role]

    @property
    def supervision(self) -> list[View]:
        """Input views followed by the extra supervision views."""
        return self.by_role("input") + self.by_role("supervision")


def _random_quats(rng, n):
    q, _ = normalize_rotations(rng.normal(size=(n, 4)))
    return q


CLOUD_RADIUS = 0.9  # a ball this size stays inside every default orbit camera's view cone


def _cloud(rng, n):
    pos = rng.normal(scale=0.35, size=(n, 3))
    r = np.linalg.norm(pos, axis=1, keepdims=True)
    pos = np.where(r > CLOUD_RADIUS, pos * (CLOUD_RADIUS / np.maximum(r, 1e-12)), pos)
    col = rng.uniform(0.1, 0.95, size=(n, 3))
    opa = rng.uniform(0.6, 0.99, size=n)
    scl = activate_scale(rng.uniform(0.0, 0.5, size=(n, 3)))
    return Primitives(col, pos, scl, _random_quats(rng, n), opa)


def _shell(rng, n, center=(0.0, 0.0, 0.0), radius=0.6, tint=None):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = np.asarray(center) + radius * d
    base = np.asarray(tint) if tint is not None else np.array([0.8, 0.5, 0.3])
    # smooth albedo variation so the object has readable structure
    col = np.clip(base + 0.25 * d[:, [2, 0, 1]] * np.array([1.0, -1.0, 1.0]), 0.05, 0.95)
    opa = rng.uniform(0.85, 0.99, size=n)
    s = activate_scale(np.stack([rng.uniform(0.0, 0.1, n)] * 2 + [np.full(n, 0.9)], axis=1))
    # orient the thin axis (z) along the radial direction
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, d)
    sin = np.linalg.norm(axis, axis=1)
    cos = d @ z
    ang = np.arctan2(sin, cos)
    axis = np.where(sin[:, None] > 1e-9, axis / np.maximum(sin, 1e-12)[:, None], np.array([1.0, 0, 0]))
    q = np.concatenate([np.cos(ang / 2)[:, None], np.sin(ang / 2)[:, None] * axis], axis=1)
    return Primitives(col, pos, s, q, opa)


def make_primitives(kind: str, count: int, rng: np.random.Generator) -> Primitives:
    if count < 1:
        raise ValueError("splat count must be >= 1")
    if kind == "gaussian-cloud":
        return _cloud(rng, count)
    if kind == "shell-sphere":
        return _shell(rng, count)
    if kind == "two-object":
        a = count // 2
        return Primitives.concatenate([
            _shell(rng, max(a, 1), center=(-0.4, 0.0, 0.0), radius=0.35, tint=(0.8, 0.3, 0.2)),
            _shell(rng, max(count - a, 1), center=(0.45, 0.1, 0.0), radius=0.3, tint=(0.2, 0.5, 0.8)),
        ]) if count > 1 else _shell(rng, 1)
    raise ValueError(f"unknown scene kind {kind!r}; expected one of {KINDS}")


def coordinate_map(camera: Camera, depth: np.ndarray, mask: np.ndarray, threshold: float = COORD_MASK):
    """World coordinates of the expected-depth surface; zero where mask <= threshold."""
    valid = mask > threshold
    d = np.where(valid, depth, 1.0)
    pts = unproject(pixel_centers(camera.width, camera.height), d, camera).transpose(2, 0, 1)
    return np.where(valid[None], pts, 0.0)


def normal_map(camera: Camera, coords: np.ndarray, mask: np.ndarray, threshold: float = COORD_MASK):
    """Unit normals from central differences of the coordinate map, facing the camera."""
    valid = mask > threshold
    p = coords.transpose(1, 2, 0)
    du = np.zeros_like(p)
    dv = np.zeros_like(p)
    du[:, 1:-1] = p[:, 2:] - p[:, :-2]
    dv[1:-1] = p[2:] - p[:-2]
    ok = valid.copy()
    ok[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    ok[1:-1] &= valid[2:] & valid[:-2]
    ok[:, [0, -1]] = False
    ok[[0, -1], :] = False
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n = n / np.maximum(norm, 1e-12)[..., None]
    view = p - camera.center
    flip = (n * view).sum(-1) > 0
    n[flip] *= -1
    return np.where(ok[None], n.transpose(2, 0, 1), 0.0)


def render_view(prims: Primitives, camera: Camera, background=(0.0, 0.0, 0.0)) -> View:
    out = rasterize(prims, camera, background=background)
    coords = coordinate_map(camera, out.depth, out.mask)
    return View(camera, out.image, out.mask, coords, normal_map(camera, coords, out.mask))


def synth_scene(kind: str = "gaussian-cloud", count: int = 256, seed: int = 0, resolution: int = 64,
                n_input: int = 4, n_supervision: int = 4, n_heldout: int = 4, radius: float = 2.5,
                fov: float = 50.0, elevation: float = 10.0, background=(0.0, 0.0, 0.0)) -> SynthScene:
    """Sample a scene and render its views. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    prims = make_primitives(kind, count, rng)
    prims.validate(DEFAULT_BOUNDS)
    k = CameraIntrinsics.from_fov(resolution, resolution, fov)
    cams = orbit_cameras(n_input, radius, elevation, k)
    roles = ["input"] * n_input
    cams += random_cameras(rng, n_supervision, radius, k)
    roles += ["supervision"] * n_supervision
    cams += random_cameras(rng, n_heldout, radius, k)
    roles += ["heldout"] * n_heldout
    views = [render_view(prims, c, background) for c in cams]
    return SynthScene(kind, seed, prims, views, roles, tuple(float(b) for b in background),
                      {"count": count, "resolution": resolution, "radius": radius, "fov": fov})

"""Tile-based differentiable Gaussian splatting with an analytic backward pass.

Forward: perspective (EWA) projection of each Gaussian, a 2-D covariance
eigenvalue floor, 16x16 tile binning, then front-to-back alpha compositing of
color, silhouette and expected depth. Backward: the compositing derivative
chained through the conic, the covariance floor, the projection Jacobian and
the quaternion/scale covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tape
from .camera import Camera, pixel_centers
from .splat import Primitives, TapePrimitives
from .tape import Tensor

EPS_COV = 0.09
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
NEAR = 0.01
TILE = 16
DEPTH_FLOOR = 1e-6


class RasterError(ValueError):
    pass


@dataclass
class RenderOutput:
    image: np.ndarray    # (3, H, W)
    mask: np.ndarray     # (H, W)
    depth: np.ndarray    # (H, W)

    def stack(self) -> np.ndarray:
        return np.concatenate([self.image, self.mask[None], self.depth[None]])


@dataclass
class ProjectedSplat:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class PrimitiveGrads:
    colors: np.ndarray
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "PrimitiveGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n))

    def __iadd__(self, other: "PrimitiveGrads"):
        for f in ("colors", "positions", "scales", "rotations", "opacities"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        return self

    def flat(self) -> np.ndarray:
        return np.concatenate([self.colors.ravel(), self.positions.ravel(), self.scales.ravel(),
                               self.rotations.ravel(), self.opacities.ravel()])


# covariance ------------------------------------------------------------------------


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) quaternions (w,x,y,z) to (N,3,3) rotation matrices (no normalization)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=1)


def _covariances(scales: np.ndarray, quats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Rq = quat_to_rotmat(quats)
    RS = Rq * (scales * scales)[:, None, :]
    return RS @ np.swapaxes(Rq, 1, 2), Rq


def covariance_3d(scale, rotation) -> np.ndarray:
    """R_q diag(s^2) R_q^T for one Gaussian."""
    q = np.asarray(rotation, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-4:
        raise RasterError(f"quaternion {q} is not unit within 1e-4")
    cov, _ = _covariances(np.asarray(scale, dtype=np.float64)[None], q[None])
    return cov[0]


def _eigh2(cov2: np.ndarray):
    """Closed-form eigen-decomposition of symmetric 2x2 matrices, ascending."""
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    m = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    lam = np.stack([m - r, m + r], axis=1)
    th = 0.5 * np.arctan2(2.0 * b, a - c)
    cs, sn = np.cos(th), np.sin(th)
    vec = np.empty_like(cov2)
    vec[:, 0, 0], vec[:, 1, 0] = -sn, cs
    vec[:, 0, 1], vec[:, 1, 1] = cs, sn
    return lam, vec


def _floor_eigen(cov2: np.ndarray):
    """Raise both eigenvalues of each 2x2 covariance to at least EPS_COV."""
    lam, vec = _eigh2(cov2)
    clamped = lam < EPS_COV
    out = cov2.copy()
    any_c = clamped.any(axis=1)
    if any_c.any():
        lc = np.maximum(lam[any_c], EPS_COV)
        v = vec[any_c]
        out[any_c] = (v * lc[:, None, :]) @ np.swapaxes(v, 1, 2)
    return out, lam, vec, any_c


def _floor_eigen_vjp(g: np.ndarray, lam: np.ndarray, vec: np.ndarray, any_c: np.ndarray) -> np.ndarray:
    """Daleckii-Krein derivative of the eigenvalue floor (identity where unclamped)."""
    out = g.copy()
    if not any_c.any():
        return out
    l, v, gs = lam[any_c], vec[any_c], g[any_c]
    f = np.maximum(l, EPS_COV)
    d = (l > EPS_COV).astype(float)
    diff = l[:, 0] - l[:, 1]
    safe = np.abs(diff) > 1e-12
    off = np.where(safe, (f[:, 0] - f[:, 1]) / np.where(safe, diff, 1.0), d[:, 0])
    G = np.empty_like(gs)
    G[:, 0, 0], G[:, 1, 1] = d[:, 0], d[:, 1]
    G[:, 0, 1] = G[:, 1, 0] = off
    inner = np.swapaxes(v, 1, 2) @ gs @ v
    out[any_c] = v @ (G * inner) @ np.swapaxes(v, 1, 2)
    return out


# projection --------------------------------------------------------------------------


@dataclass
class _Projection:
    """Screen-space quantities for the live splats ``idx`` (arrays are per live splat)."""

    idx: np.ndarray
    pc: np.ndarray
    z: np.ndarray
    mean: np.ndarray
    J: np.ndarray
    M: np.ndarray
    cov3: np.ndarray
    Rq: np.ndarray
    cov2: np.ndarray
    cov2c: np.ndarray
    conic: np.ndarray
    eig: tuple
    half_extent: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def _live(prims: Primitives, camera: Camera) -> np.ndarray:
    """Indices of splats in front of the near plane that can reach alpha >= 1/255."""
    z = prims.positions @ camera.R[2] + camera.t[2]
    return np.flatnonzero((z > NEAR) & (prims.opacities * 255.0 >= 1.0))


def _project_all(prims: Primitives, camera: Camera, idx: np.ndarray | None = None) -> _Projection:
    if idx is None:
        idx = _live(prims, camera)
    W, t = camera.R, camera.t
    k = camera.intrinsics
    opac = prims.opacities[idx]
    pc = prims.positions[idx] @ W.T + t
    z = pc[:, 2]
    X, Y = pc[:, 0], pc[:, 1]
    mean = np.stack([k.fx * X / z + k.cx, k.fy * Y / z + k.cy], axis=1)
    n = len(idx)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = k.fx / z
    J[:, 0, 2] = -k.fx * X / (z * z)
    J[:, 1, 1] = k.fy / z
    J[:, 1, 2] = -k.fy * Y / (z * z)
    M = J @ W
    cov3, Rq = _covariances(prims.scales[idx], prims.rotations[idx])
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    cov2c, lam, vec, any_c = _floor_eigen(cov2)
    det = cov2c[:, 0, 0] * cov2c[:, 1, 1] - cov2c[:, 0, 1] * cov2c[:, 1, 0]
    conic = np.empty_like(cov2c)
    conic[:, 0, 0] = cov2c[:, 1, 1] / det
    conic[:, 1, 1] = cov2c[:, 0, 0] / det
    conic[:, 0, 1] = -cov2c[:, 0, 1] / det
    conic[:, 1, 0] = -cov2c[:, 1, 0] / det
    qmax = 2.0 * np.log(np.maximum(opac * 255.0, 1.0))
    half = np.sqrt(qmax[:, None] * np.stack([cov2c[:, 0, 0], cov2c[:, 1, 1]], axis=1)) + 1e-3
    return _Projection(idx, pc, z, mean, J, M, cov3, Rq, cov2, cov2c, conic, (lam, vec, any_c), half,
                       np.ascontiguousarray(opac), np.ascontiguousarray(prims.colors[idx]))


def project_splat(primitive, camera: Camera) -> ProjectedSplat | None:
    """Screen-space Gaussian of one primitive, or None when culled behind the camera."""
    p = Primitives(primitive.color, primitive.position, primitive.scale, primitive.rotation,
                   [primitive.opacity])
    z = (camera.R @ p.positions[0] + camera.t)[2]
    if z <= NEAR:
        return None
    pr = _project_all(p, camera, np.array([0]))
    return ProjectedSplat(pr.mean[0], pr.cov2c[0], float(pr.z[0]),
                          p.colors[0] * p.opacities[0], float(p.opacities[0]))


# forward -------------------------------------------------------------------------------


@njit(cache=True)
def _footprint(i, x0, x1, y0, y1, means, half):
    """Pixel range of splat i inside [x0, x1) x [y0, y1), conservative."""
    ax = int(np.floor(means[i, 0] - half[i, 0] - 0.5))
    bx = int(np.ceil(means[i, 0] + half[i, 0] - 0.5))
    ay = int(np.floor(means[i, 1] - half[i, 1] - 0.5))
    by = int(np.ceil(means[i, 1] + half[i, 1] - 0.5))
    return max(ax, x0), min(bx + 1, x1), max(ay, y0), min(by + 1, y1)


@njit(cache=True)
def _forward_kernel(offsets, splats, tiles_x, width, height, means, conics, half, opac, colors, z, bg):
    # Splats are visited front to back per tile and only touch their own
    # footprint; per pixel this is the same sequence as a pixel-major loop.
    image = np.zeros((3, height, width))
    t_final = np.ones((height, width))
    dnum = np.zeros((height, width))
    n_used = np.zeros((height, width), dtype=np.int64)
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        x0, y0 = tx * TILE, ty * TILE
        x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
        for j in range(offsets[tile], offsets[tile + 1]):
            i = splats[j]
            ax, bx, ay, by = _footprint(i, x0, x1, y0, y1, means, half)
            for py in range(ay, by):
                dy = py + 0.5 - means[i, 1]
                if abs(dy) > half[i, 1]:
                    continue
                for px in range(ax, bx):
                    dx = px + 0.5 - means[i, 0]
                    if abs(dx) > half[i, 0]:
                        continue
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    a = opac[i] * np.exp(-0.5 * q)
                    if a < ALPHA_MIN:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    T = t_final[py, px]
                    wgt = a * T
                    image[0, py, px] += wgt * colors[i, 0]
                    image[1, py, px] += wgt * colors[i, 1]
                    image[2, py, px] += wgt * colors[i, 2]
                    dnum[py, px] += wgt * z[i]
                    t_final[py, px] = T * (1.0 - a)
                    n_used[py, px] += 1
    for py in range(height):
        for px in range(width):
            T = t_final[py, px]
            for c in range(3):
                image[c, py, px] += bg[c] * T
    return image, t_final, dnum, n_used


@njit(cache=True)
def _backward_kernel(offsets, splats, tiles_x, width, height, means, conics, half, opac, colors, z, bg,
                     t_final, n_used, g_img, g_dn, g_mt):
    n = means.shape[0]
    g_col = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_con = np.zeros((n, 3))
    g_z = np.zeros(n)
    T = t_final.copy()
    suffix = np.zeros((height, width))
    n_tiles = offsets.shape[0] - 1
    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        x0, y0 = tx * TILE, ty * TILE
        x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
        for j in range(offsets[tile + 1] - 1, offsets[tile] - 1, -1):
            i = splats[j]
            ax, bx, ay, by = _footprint(i, x0, x1, y0, y1, means, half)
            for py in range(ay, by):
                dy = py + 0.5 - means[i, 1]
                if abs(dy) > half[i, 1]:
                    continue
                for px in range(ax, bx):
                    dx = px + 0.5 - means[i, 0]
                    if abs(dx) > half[i, 0]:
                        continue
                    q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
                    G = np.exp(-0.5 * q)
                    a_raw = opac[i] * G
                    if a_raw < ALPHA_MIN:
                        continue
                    a = a_raw if a_raw <= ALPHA_MAX else ALPHA_MAX
                    gr = g_img[0, py, px]
                    gg = g_img[1, py, px]
                    gb = g_img[2, py, px]
                    gd = g_dn[py, px]
                    TN = t_final[py, px]
                    inv = 1.0 / (1.0 - a)
                    Tk = T[py, px] * inv
                    T[py, px] = Tk
                    wgt = a * Tk
                    e = colors[i, 0] * gr + colors[i, 1] * gg + colors[i, 2] * gb + z[i] * gd
                    g_col[i, 0] += wgt * gr
                    g_col[i, 1] += wgt * gg
                    g_col[i, 2] += wgt * gb
                    g_z[i] += wgt * gd
                    bgterm = (bg[0] * gr + bg[1] * gg + bg[2] * gb) * TN
                    g_a = Tk * e - (suffix[py, px] + bgterm) * inv + g_mt[py, px] * TN * inv
                    suffix[py, px] += wgt * e
                    if a_raw >= ALPHA_MAX:
                        continue
                    g_op[i] += g_a * G
                    gq = -0.5 * g_a * a_raw
                    g_con[i, 0] += gq * dx * dx
                    g_con[i, 1] += gq * dx * dy
                    g_con[i, 2] += gq * dy * dy
                    g_mean[i, 0] += -2.0 * gq * (conics[i, 0] * dx + conics[i, 1] * dy)
                    g_mean[i, 1] += -2.0 * gq * (conics[i, 1] * dx + conics[i, 2] * dy)
    return g_col, g_op, g_mean, g_con, g_z


@dataclass
class RenderState:
    scene: tuple
    camera: Camera
    background: np.ndarray
    proj: _Projection | None
    bins: tuple | None
    t_final: np.ndarray
    n_used: np.ndarray
    output: RenderOutput


_FIELDS = ("colors", "positions", "scales", "rotations", "opacities")


def _scene_key(prims: Primitives) -> tuple:
    return tuple(getattr(prims, f).copy() for f in _FIELDS)


def _same_scene(key: tuple, prims: Primitives) -> bool:
    return all(np.array_equal(a, getattr(prims, f)) for a, f in zip(key, _FIELDS))


def _check_finite(prims: Primitives):
    for name in ("colors", "positions", "scales", "rotations", "opacities"):
        a = getattr(prims, name)
        bad = ~np.isfinite(a).all(axis=tuple(range(1, a.ndim)))
        if bad.any():
            raise RasterError(f"non-finite {name} at primitive {int(np.argmax(bad))}")


def _resolve_camera(camera: Camera, resolution) -> Camera:
    if resolution is None:
        return camera
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    h, w = resolution
    if h < 1 or w < 1:
        raise RasterError("resolution must be at least 1x1")
    if (h, w) == (camera.height, camera.width):
        return camera
    return camera.scaled(w, h)


def _bin_tiles(proj: _Projection, width: int, height: int):
    """Per-tile splat lists (CSR), each ordered front to back with index tie-break."""
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    local = np.arange(len(proj.idx))
    order = local[np.lexsort((local, proj.z))]
    lo = proj.mean[order] - proj.half_extent[order]
    hi = proj.mean[order] + proj.half_extent[order]
    keep = (hi[:, 0] >= 0) & (lo[:, 0] <= width) & (hi[:, 1] >= 0) & (lo[:, 1] <= height)
    order, lo, hi = order[keep], lo[keep], hi[keep]
    x0 = np.clip(np.floor(lo[:, 0] / TILE), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor(hi[:, 0] / TILE), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor(lo[:, 1] / TILE), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor(hi[:, 1] / TILE), 0, tiles_y - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[owner] + local % nx[owner]
    ty = y0[owner] + local // nx[owner]
    tile_id = ty * tiles_x + tx
    perm = np.argsort(tile_id, kind="stable")
    splats = order[owner[perm]]
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=offsets[1:])
    return offsets, np.ascontiguousarray(splats, dtype=np.int64), tiles_x


def _conic3(proj: _Projection) -> np.ndarray:
    return np.ascontiguousarray(np.stack([proj.conic[:, 0, 0], proj.conic[:, 0, 1], proj.conic[:, 1, 1]], axis=1))


def rasterize(primitives: Primitives, camera: Camera, resolution=None, background=(0.0, 0.0, 0.0),
              return_state: bool = False):
    """Render color, silhouette and expected depth.

    Returns a RenderOutput, or (RenderOutput, RenderState) with ``return_state``.
    """
    camera = _resolve_camera(camera, resolution)
    _check_finite(primitives)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = camera.height, camera.width
    proj = _project_all(primitives, camera) if len(primitives) else None
    bins = None
    if proj is not None and len(proj.idx):
        bins = _bin_tiles(proj, w, h)
        offsets, splats, tiles_x = bins
        image, t_final, dnum, n_used = _forward_kernel(
            offsets, splats, tiles_x, w, h, proj.mean, _conic3(proj), proj.half_extent, proj.opacities,
            proj.colors, proj.z, bg)
    else:
        image = np.broadcast_to(bg[:, None, None], (3, h, w)).copy()
        t_final = np.ones((h, w))
        dnum = np.zeros((h, w))
        n_used = np.zeros((h, w), dtype=np.int64)
    mask = 1.0 - t_final
    out = RenderOutput(image, mask, dnum / np.maximum(mask, DEPTH_FLOOR))
    if not return_state:
        return out
    state = RenderState(_scene_key(primitives), camera, bg, proj, bins, t_final, n_used, out)
    return out, state


def rasterize_dense(primitives: Primitives, camera: Camera, resolution=None,
                    background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Brute-force reference: every splat at every pixel, no tiling or bounds."""
    camera = _resolve_camera(camera, resolution)
    bg = np.asarray(background, dtype=np.float64)
    h, w = camera.height, camera.width
    centers = pixel_centers(w, h)
    splats = []
    for i, prim in enumerate(primitives):
        ps = project_splat(prim, camera)
        if ps is not None:
            splats.append((ps.depth, i, ps))
    splats.sort(key=lambda s: (s[0], s[1]))
    T = np.ones((h, w))
    color = np.zeros((3, h, w))
    dnum = np.zeros((h, w))
    for z, i, ps in splats:
        inv = np.linalg.inv(ps.cov)
        d = centers - ps.mean
        q = inv[0, 0] * d[..., 0] ** 2 + (inv[0, 1] + inv[1, 0]) * d[..., 0] * d[..., 1] + inv[1, 1] * d[..., 1] ** 2
        a_raw = ps.opacity * np.exp(-0.5 * q)
        a = np.where(a_raw >= ALPHA_MIN, np.minimum(a_raw, ALPHA_MAX), 0.0)
        wgt = a * T
        color += primitives.colors[i][:, None, None] * wgt
        dnum += z * wgt
        T = T * (1.0 - a)
    color += bg[:, None, None] * T
    m = 1.0 - T
    return RenderOutput(color, m, dnum / np.maximum(m, DEPTH_FLOOR))


# backward -------------------------------------------------------------------------------


def rasterize_backward(primitives: Primitives, camera: Camera, grad_image, grad_mask, grad_depth,
                       state: RenderState) -> PrimitiveGrads:
    """Gradients of <upstream, render> with respect to every primitive parameter."""
    if not _same_scene(state.scene, primitives):
        raise RasterError("backward called with a scene that does not match the forward state")
    if not (np.array_equal(camera.R, state.camera.R) and np.array_equal(camera.t, state.camera.t)):
        raise RasterError("backward called with a camera that does not match the forward state")
    n = len(primitives)
    grads = PrimitiveGrads.zeros(n)
    if state.bins is None:
        return grads
    cam = state.camera
    h, w = cam.height, cam.width
    gI = np.ascontiguousarray(np.asarray(grad_image, dtype=np.float64).reshape(3, h, w))
    gM = np.asarray(grad_mask, dtype=np.float64).reshape(h, w)
    gD = np.asarray(grad_depth, dtype=np.float64).reshape(h, w)
    mask = state.output.mask
    mc = np.maximum(mask, DEPTH_FLOOR)
    dn = state.output.depth * mc
    g_dn = np.ascontiguousarray(gD / mc)
    g_mt = np.ascontiguousarray(gM - np.where(mask > DEPTH_FLOOR, gD * dn / (mc * mc), 0.0))
    proj = state.proj
    prims = primitives
    offsets, splats, tiles_x = state.bins
    g_col, g_op, g_mean, g_con, g_z = _backward_kernel(
        offsets, splats, tiles_x, w, h, proj.mean, _conic3(proj), proj.half_extent, proj.opacities, proj.colors,
        proj.z, state.background, state.t_final, state.n_used, gI, g_dn, g_mt)
    idx = proj.idx
    grads.colors[idx] = g_col
    grads.opacities[idx] = g_op
    m = len(idx)
    g_conic = np.empty((m, 2, 2))
    g_conic[:, 0, 0] = g_con[:, 0]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = g_con[:, 1]
    g_conic[:, 1, 1] = g_con[:, 2]

    A = proj.conic
    g_cov2c = -A @ g_conic @ A
    lam, vec, any_c = proj.eig
    g_cov2 = _floor_eigen_vjp(g_cov2c, lam, vec, any_c)
    g_cov2 = 0.5 * (g_cov2 + np.swapaxes(g_cov2, 1, 2))
    M, cov3 = proj.M, proj.cov3
    g_M = 2.0 * g_cov2 @ M @ cov3
    g_cov3 = np.swapaxes(M, 1, 2) @ g_cov2 @ M
    Wr = cam.R
    g_J = g_M @ Wr.T

    k = cam.intrinsics
    X, Y, Z = proj.pc[:, 0], proj.pc[:, 1], proj.z
    gX = -g_J[:, 0, 2] * k.fx / Z**2 + g_mean[:, 0] * k.fx / Z
    gY = -g_J[:, 1, 2] * k.fy / Z**2 + g_mean[:, 1] * k.fy / Z
    gZ = (-g_J[:, 0, 0] * k.fx / Z**2 + g_J[:, 0, 2] * 2 * k.fx * X / Z**3
          - g_J[:, 1, 1] * k.fy / Z**2 + g_J[:, 1, 2] * 2 * k.fy * Y / Z**3
          - g_mean[:, 0] * k.fx * X / Z**2 - g_mean[:, 1] * k.fy * Y / Z**2 + g_z)
    grads.positions[idx] = np.stack([gX, gY, gZ], axis=1) @ Wr

    Rq = proj.Rq
    s = prims.scales[idx]
    g_Rq = 2.0 * g_cov3 @ Rq * (s * s)[:, None, :]
    grads.scales[idx] = 2.0 * s * np.einsum("nik,nij,njk->nk", Rq, g_cov3, Rq)
    grads.rotations[idx] = quat_to_rotmat_vjp(prims.rotations[idx], g_Rq)
    return grads


# tape integration ------------------------------------------------------------------------


def render_tensor(prims: TapePrimitives, camera: Camera, background=(0.0, 0.0, 0.0),
                  resolution=None) -> Tensor:
    """Render on the tape; returns a (5, H, W) tensor [R, G, B, mask, depth]."""
    p = prims.numpy()
    out, state = rasterize(p, camera, resolution, background, return_state=True)

    def vjp(g):
        gr = rasterize_backward(p, state.camera, g[:3], g[3], g[4], state)
        return gr.colors, gr.positions, gr.scales, gr.rotations, gr.opacities

    inputs = (prims.colors, prims.positions, prims.scales, prims.rotations, prims.opacities)
    return tape.custom(inputs, out.stack(), vjp, op="rasterize")

"""Reusable experiment recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .camera import CameraIntrinsics, orbit_cameras
from .diffusion import (Denoiser, DenoiserConfig, SampleConfig, TrainObject, Trainer, condition_image,
                        make_schedule, sample)
from .latents import Codec, CodecConfig
from .losses import LossWeights, View, psnr, render_loss
from .raster import rasterize
from .reconstruct import FitConfig, fit, init_grid
from .splat import COLOR, DEPTH, OPACITY, ROTATION, SCALE, SplatGrid, lift_grids, lift_tensor
from .synth import render_view, synth_scene


@dataclass
class ToyObject:
    """A single object for overfit diffusion runs.

    ``grids`` are the clean input-view grids; every GT view (``train.views`` and
    ``heldout``) is rendered from those grids so the objective can reach zero.
    """

    grids: list[SplatGrid]
    train: TrainObject
    heldout: list[View]
    codec: Codec


def toy_object(seed: int = 0, grid_res: int = 16, render_res: int = 16, kind: str = "shell-sphere",
               count: int = 3000, n_heldout: int = 4, codec: Codec | None = None) -> ToyObject:
    sc = synth_scene(kind, count, seed=seed, resolution=grid_res, n_heldout=n_heldout)
    grids = init_grid(sc.by_role("input"), guidance=True)
    prims = lift_grids(grids)
    views = [render_view(prims, v.camera.scaled(render_res)) for v in sc.supervision]
    held = [render_view(prims, v.camera.scaled(render_res)) for v in sc.by_role("heldout")]
    codec = codec or Codec.create(CodecConfig())
    lat = np.stack([codec.encode(g.raw) for g in grids])
    cond = condition_image(views[0].image, views[0].camera, lat.shape[1:])
    obj = TrainObject(lat, [g.camera for g in grids], views, cond)
    return ToyObject(grids, obj, held, codec)


def train_toy(toy: ToyObject, steps: int, weights: LossWeights = LossWeights(), seed: int = 0,
              model_config: DenoiserConfig | None = None, family: str = "flow", lr: float = 2e-3):
    cfg = model_config or DenoiserConfig(seed=seed, latent_dim=toy.train.latents.shape[1])
    model = Denoiser(cfg)
    sched = make_schedule(family)
    tr = Trainer(model, toy.codec, sched, weights, lr=lr, total_steps=steps, seed=seed)
    tr.fit(toy.train, steps)
    return tr


def sample_toy(toy: ToyObject, trainer: Trainer, config: SampleConfig = SampleConfig()) -> list[SplatGrid]:
    return sample(trainer.model, toy.codec, toy.train.cameras, trainer.schedule, config, toy.train.condition,
                  toy.train.latents.shape[2:])


def render_metrics(grids, views) -> dict:
    prims = lift_grids(grids)
    ps, ms = [], []
    for v in views:
        out = rasterize(prims, v.camera)
        ps.append(psnr(out.image, v.image))
        ms.append(float(np.mean((out.mask - v.mask) ** 2)))
    return {"psnr": float(np.mean(ps)), "mask_mse": float(np.mean(ms)), "psnr_views": ps}


def fit_scene(seed: int = 0, guidance: bool = True, iterations: int = 2000, count: int = 256,
              resolution: int = 64, target: float | None = None, stop_at_target: bool = False,
              eval_every: int = 25, kind: str = "gaussian-cloud", max_steps: int | None = None):
    sc = synth_scene(kind, count, seed=seed, resolution=resolution)
    cfg = FitConfig(iterations=iterations, guidance=guidance, seed=seed, eval_every=eval_every,
                    target_psnr=target, stop_at_target=stop_at_target, max_steps=max_steps)
    res = fit(sc.by_role("input"), sc.supervision, cfg, eval_views=sc.by_role("heldout"))
    return sc, res


GRADCHECK_FOV = 8.0


def gradcheck_scene(seed: int, n_side: int = 2, resolution: int = 16, step: float = 1e-6) -> float:
    """Max relative error of the analytic gradient of the rendering loss.

    A random ``n_side`` x ``n_side`` grid (so n_side**2 splats) is lifted and rendered
    into two narrow-field views, one from the grid camera and one orbited 4 degrees,
    and compared against renders of a second random grid. The derivative covers
    activation, lift, projection and compositing of the full loss.
    """
    rng = np.random.default_rng(seed)
    k_grid = CameraIntrinsics.from_fov(n_side, fov_deg=GRADCHECK_FOV)
    k_view = CameraIntrinsics.from_fov(resolution, fov_deg=GRADCHECK_FOV)
    az = rng.uniform(0.0, 360.0)
    grid_cam = orbit_cameras(1, intrinsics=k_grid, azimuth_offset=az)[0]
    cams = [grid_cam.scaled(resolution)] + orbit_cameras(1, intrinsics=k_view, azimuth_offset=az + 4.0)

    def random_raw():
        raw = np.empty((12, n_side, n_side))
        raw[COLOR] = rng.uniform(0.1, 0.9, (3, n_side, n_side))
        raw[OPACITY] = rng.uniform(0.3, 0.8, (1, n_side, n_side))
        raw[SCALE] = rng.uniform(0.1, 0.6, (3, n_side, n_side))
        q = rng.normal(size=(4, n_side, n_side))
        raw[ROTATION] = q / np.linalg.norm(q, axis=0)
        raw[DEPTH] = rng.uniform(0.3, 0.7, (1, n_side, n_side))
        return raw

    raw = random_raw()
    target = lift_grids([SplatGrid(random_raw(), grid_cam)])
    views = [render_view(target, c) for c in cams]

    def loss(x):
        return render_loss(lift_tensor(x, grid_cam), views, LossWeights())

    return tape.grad_check(loss, raw, step)

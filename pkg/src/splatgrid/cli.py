"""Command-line workbench: ``splatgrid <subcommand> [flags]``.

Every subcommand writes ``record.json`` (full config, seed, version) into
``--out`` and prints tab-delimited results to stdout. Figures are written as
PNG files next to the text outputs.

Exit codes: 0 success, 2 usage, 3 invariant violation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, formats, report
from .camera import CameraError
from .diffusion import (FLOW, DenoiserConfig, Denoiser, SampleConfig, TrainObject, Trainer, condition_image,
                        make_schedule, sample)
from .experiments import gradcheck_scene
from .latents import IDENTITY, LINEAR_PATCH, Codec, CodecConfig, CodecSample, train_codec
from .losses import LossWeights, psnr, ssim
from .raster import rasterize
from .reconstruct import FitConfig, fit, init_grid
from .splat import SPATIAL_CONCAT, VIEW_CONCAT, GridError, SplatGrid, lift_grids
from .synth import KINDS, render_view, synth_scene

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERICAL = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def version_string() -> str:
    """``v<version>-g<short hash>`` when run from a git checkout, else ``v<version>``."""
    here = Path(__file__).resolve().parent
    try:
        sha = subprocess.run(["git", "-C", str(here), "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, check=True).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"v{__version__}-g{sha}" if sha else f"v{__version__}"


def write_record(out: Path, args: argparse.Namespace) -> Path:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func")}
    rec = {"command": args.command, "seed": args.seed, "version": version_string(), "config": cfg}
    path = out / "record.json"
    path.write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")
    return path


def emit(rows, header=None) -> None:
    if header:
        print("\t".join(header))
    for r in rows:
        print("\t".join(_cell(x) for x in r))


def _cell(x) -> str:
    if isinstance(x, float):
        return f"{x:.3e}" if x != 0 and abs(x) < 1e-3 else f"{x:.6f}"
    return str(x)


def write_table(path: Path, header, rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(_cell(x) for x in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights(args) -> LossWeights:
    return LossWeights(lambda_diff=args.lambda_diff, lambda_render=args.lambda_render)


def _scene_grids(args, manifest) -> list[SplatGrid]:
    if getattr(args, "grids", None):
        grids, _ = formats.load_grids(args.grids)
        return grids
    return init_grid(manifest.load_views("input"), guidance=True)


def _codec(args) -> Codec:
    if getattr(args, "codec", None):
        return formats.load_codec(args.codec)
    return Codec.create(CodecConfig())


# subcommands ------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out(args)
    sc = synth_scene(args.kind, args.count, seed=args.seed, resolution=args.resolution, n_input=args.views)
    order = sc.roles
    path = formats.write_views(out, sc.views, order, sc.background, meta={"kind": args.kind, "seed": args.seed})
    formats.export_ply(sc.primitives, out / "scene.ply")
    report.image_grid(out / "views.png", [[v.image for v in sc.views], [v.mask for v in sc.views]],
                      ["image", "mask"], list(order))
    write_record(out, args)
    emit([("manifest", str(path.name)), ("views", len(sc.views)), ("splats", len(sc.primitives))],
         ("key", "value"))
    return EXIT_OK


def cmd_fit(args) -> int:
    out = _out(args)
    m = formats.load_manifest(args.scene)
    inputs = m.load_views("input")
    sup = inputs + m.load_views("supervision")
    held = m.load_views("heldout") or None
    cfg = FitConfig(iterations=args.steps, seed=args.seed, guidance=not args.no_guidance,
                    eval_every=args.eval_every)
    res = fit(inputs, sup, cfg, background=m.background, eval_views=held)
    formats.save_grids(out / "grids.splg", res.grids)
    write_table(out / "fit_log.tsv", ("step", "loss"), list(enumerate(res.losses)))
    report.curves(out / "loss.png", {"loss": (np.arange(len(res.losses)), res.losses)}, ylabel="loss", logy=True)
    rows = [("steps", len(res.losses)), ("final_loss", res.losses[-1])]
    if res.evals:
        write_table(out / "eval_log.tsv", ("step", "heldout_psnr"), res.evals)
        s, p = zip(*res.evals)
        report.curves(out / "psnr.png", {"held-out": (s, p)}, ylabel="PSNR (dB)")
        rows.append(("heldout_psnr", res.evals[-1][1]))
    write_record(out, args)
    emit(rows, ("key", "value"))
    return EXIT_OK


def cmd_render(args) -> int:
    out = _out(args)
    if bool(args.grids) == bool(args.ply):
        raise UsageError("render needs exactly one of --grids or --ply")
    prims = lift_grids(formats.load_grids(args.grids)[0]) if args.grids else formats.import_ply(args.ply)
    m = formats.load_manifest(args.scene)
    entries = [v for v in m.views if args.role == "all" or v.role == args.role]
    if not entries:
        raise UsageError(f"scene has no views with role {args.role!r}")
    views, roles = [], []
    for e in entries:
        cam = e.camera.scaled(args.resolution) if args.resolution else e.camera
        views.append(render_view(prims, cam, m.background))
        roles.append(e.role)
    path = formats.write_views(out, views, roles, m.background, m.object_radius, name="render.manifest")
    report.image_grid(out / "renders.png", [[v.image for v in views]], col_labels=roles)
    write_record(out, args)
    emit([(i, r, v.camera.width, v.camera.height) for i, (r, v) in enumerate(zip(roles, views))],
         ("view", "role", "width", "height"))
    print(f"manifest\t{path.name}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out(args)
    gt = formats.load_manifest(args.scene)
    gt_views = [gt.load_view(v) for v in gt.views if args.role == "all" or v.role == args.role]
    if args.pred and args.grids:
        raise UsageError("eval takes --pred or --grids, not both")
    if args.pred:
        pm = formats.load_manifest(args.pred)
        pred = [pm.load_view(v) for v in pm.views if args.role == "all" or v.role == args.role]
        if len(pred) != len(gt_views):
            raise GridError(f"prediction has {len(pred)} views, ground truth has {len(gt_views)}")
        images = [p.image for p in pred]
    elif args.grids:
        prims = lift_grids(formats.load_grids(args.grids)[0])
        images = [rasterize(prims, v.camera, background=gt.background).image for v in gt_views]
    else:
        raise UsageError("eval needs --pred <manifest> or --grids <file>")
    rows = []
    for i, (im, v) in enumerate(zip(images, gt_views)):
        if im.shape != v.image.shape:
            raise GridError(f"view {i}: prediction {im.shape} does not match ground truth {v.image.shape}")
        rows.append((i, psnr(im, v.image), ssim(im, v.image)))
    if not rows:
        raise UsageError(f"scene has no views with role {args.role!r}")
    mean = ("mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])))
    write_table(out / "eval.tsv", ("view", "psnr", "ssim"), rows + [mean])
    report.bars(out / "psnr.png", [str(r[0]) for r in rows], [r[1] for r in rows], ylabel="PSNR (dB)")
    write_record(out, args)
    emit(rows + [mean], ("view", "psnr", "ssim"))
    return EXIT_OK


def cmd_export_ply(args) -> int:
    out = _out(args)
    grids, _ = formats.load_grids(args.grids)
    prims = lift_grids(grids)
    formats.export_ply(prims, out / "splats.ply")
    write_record(out, args)
    emit([("file", "splats.ply"), ("splats", len(prims))], ("key", "value"))
    return EXIT_OK


def cmd_train_ae(args) -> int:
    out = _out(args)
    data = []
    for scene in args.scene:
        m = formats.load_manifest(scene)
        data.append(CodecSample(init_grid(m.load_views("input"), guidance=True),
                                m.load_views("input") + m.load_views("supervision")))
    if args.identity:
        variant, cfg = IDENTITY, CodecConfig()
    else:
        variant = LINEAR_PATCH
        cfg = CodecConfig(variant, args.patch, args.latent_dim, args.steps, args.lr, args.seed)
    weights = LossWeights(lambda_r=args.lambda_render)
    codec = Codec.create(cfg) if variant == IDENTITY else train_codec(data, cfg, weights)
    formats.save_codec(out / "codec.splc", codec)
    rows = [("variant", variant), ("latent_dim", cfg.latent_dim), ("patch", cfg.patch)]
    if codec.history:
        write_table(out / "codec_log.tsv", ("step", "total", "recon", "render"), codec.history)
        h = np.array(codec.history)
        report.curves(out / "loss.png", {"total": (h[:, 0], h[:, 1]), "recon": (h[:, 0], h[:, 2]),
                                         "render": (h[:, 0], h[:, 3])}, ylabel="loss", logy=True)
        rows += [("final_total", float(h[-1, 1])), ("final_recon", float(h[-1, 2]))]
    write_record(out, args)
    emit(rows, ("key", "value"))
    return EXIT_OK


def _train_object(m, grids, codec) -> TrainObject:
    lat = np.stack([codec.encode(g.raw) for g in grids])
    views = m.load_views("input") + m.load_views("supervision")
    cond = condition_image(views[0].image, views[0].camera, lat.shape[1:])
    return TrainObject(lat, [g.camera for g in grids], views, cond)


def cmd_train_diff(args) -> int:
    out = _out(args)
    m = formats.load_manifest(args.scene)
    codec = _codec(args)
    grids = _scene_grids(args, m)
    obj = _train_object(m, grids, codec)
    cfg = DenoiserConfig(layout=args.layout, n_views=len(grids), latent_dim=obj.latents.shape[1],
                         width=args.width, seed=args.seed, parameterization=args.parameterization)
    schedule = make_schedule(args.family)
    tr = Trainer(Denoiser(cfg), codec, schedule, _weights(args), lr=args.lr, total_steps=args.steps,
                 seed=args.seed, background=m.background)
    log = tr.fit(obj, args.steps)
    formats.save_denoiser(out / "denoiser.spld", tr.model, schedule)
    with open(out / "train_log.jsonl", "w") as fh:
        for r in log:
            fh.write(json.dumps({"step": r.step, "t": r.t, "diff": r.diff, "render": r.render,
                                 "total": r.total}) + "\n")
    steps = [r.step for r in log]
    report.curves(out / "loss.png", {"diff": (steps, [r.diff for r in log]),
                                     "render": (steps, [r.render for r in log])}, ylabel="loss", logy=True)
    write_record(out, args)
    emit([("params", tr.model.n_params), ("steps", len(log)), ("final_diff", log[-1].diff),
          ("final_render", log[-1].render)], ("key", "value"))
    return EXIT_OK


def cmd_sample(args) -> int:
    out = _out(args)
    model, schedule = formats.load_denoiser(args.model)
    codec = _codec(args)
    m = formats.load_manifest(args.scene)
    inputs = m.load_views("input")
    d = model.config.latent_dim
    if codec.config.latent_dim != d:
        raise GridError(f"codec latent_dim {codec.config.latent_dim} does not match model latent_dim {d}")
    cams = [v.camera for v in inputs]
    lat_shape = codec.latent_shape(cams[0].height, cams[0].width)
    cond = None if args.unconditional else condition_image(inputs[0].image, inputs[0].camera, lat_shape)
    sampler = "flow-euler" if schedule.family == FLOW else "ancestral"
    scfg = SampleConfig(sampler, args.steps, args.guidance_scale, args.seed)
    grids = sample(model, codec, cams, schedule, scfg, cond, lat_shape[1:])
    formats.save_grids(out / "grids.splg", grids)
    prims = lift_grids(grids)
    formats.export_ply(prims, out / "splats.ply")
    renders = [rasterize(prims, v.camera, background=m.background) for v in inputs]
    report.image_grid(out / "samples.png", [[r.image for r in renders], [v.image for v in inputs]],
                      ["sample", "input"])
    write_record(out, args)
    emit([(i, psnr(r.image, v.image)) for i, (r, v) in enumerate(zip(renders, inputs))], ("view", "psnr_vs_input"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out(args)
    rows = [(args.seed + k, gradcheck_scene(args.seed + k, resolution=args.resolution)) for k in range(args.scenes)]
    worst = max(e for _, e in rows)
    write_table(out / "gradcheck.tsv", ("seed", "max_rel_error"), rows)
    write_record(out, args)
    emit(rows + [("max", worst)], ("seed", "max_rel_error"))
    if worst > GRADCHECK_TOL:
        print(f"error: gradient check failed ({worst:.3e} > {GRADCHECK_TOL:g})", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatgrid", description="Splat-grid reconstruction and diffusion workbench.")
    sub = p.add_subparsers(dest="command", metavar="subcommand", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file of flag defaults (explicit flags win)")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic scene with GT views")
    sp.add_argument("--kind", choices=KINDS, default="gaussian-cloud")
    sp.add_argument("--count", type=int, default=256, help="number of splats")
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--views", type=int, default=4, help="number of input views")

    sp = add("fit", cmd_fit, "fit splat grids to a scene manifest")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--eval-every", type=int, default=100)
    sp.add_argument("--no-guidance", action="store_true", help="ignore coordinate maps at init")

    sp = add("render", cmd_render, "render grids or a PLY at a scene's cameras")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--grids")
    sp.add_argument("--ply")
    sp.add_argument("--role", default="heldout", choices=("input", "supervision", "heldout", "all"))
    sp.add_argument("--resolution", type=int, default=None)

    sp = add("eval", cmd_eval, "PSNR/SSIM of renders against a scene's GT views")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--pred", help="manifest of predicted views")
    sp.add_argument("--grids", help="grids to render at the scene's cameras")
    sp.add_argument("--role", default="all", choices=("input", "supervision", "heldout", "all"))

    sp = add("export-ply", cmd_export_ply, "write fitted grids as a 3DGS PLY")
    sp.add_argument("--grids", required=True)

    sp = add("train-ae", cmd_train_ae, "train a splat-latent codec")
    sp.add_argument("--scene", required=True, nargs="+")
    sp.add_argument("--patch", type=int, default=2)
    sp.add_argument("--latent-dim", type=int, default=12)
    sp.add_argument("--identity", action="store_true", help="write the identity codec instead of training")
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--lambda-render", type=float, default=1.0, help="weight of the decoded-render term")

    sp = add("train-diff", cmd_train_diff, "train a multi-view splat-latent denoiser")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--grids", help="clean grids (default: initialized from the input views)")
    sp.add_argument("--codec")
    sp.add_argument("--layout", choices=(VIEW_CONCAT, SPATIAL_CONCAT), default=VIEW_CONCAT)
    sp.add_argument("--family", choices=("flow", "vp"), default="flow")
    sp.add_argument("--parameterization", choices=("x0", "eps", "velocity"), default="velocity")
    sp.add_argument("--lambda-diff", type=float, default=1.0)
    sp.add_argument("--lambda-render", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=3000)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--lr", type=float, default=2e-3)

    sp = add("sample", cmd_sample, "sample splat grids from a trained denoiser")
    sp.add_argument("--model", required=True)
    sp.add_argument("--codec")
    sp.add_argument("--scene", required=True, help="manifest supplying cameras and the condition view")
    sp.add_argument("--guidance-scale", type=float, default=2.0)
    sp.add_argument("--steps", type=int, default=28, help="sampling steps")
    sp.add_argument("--unconditional", action="store_true")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the rendering-loss gradient")
    sp.add_argument("--scenes", type=int, default=20)
    sp.add_argument("--resolution", type=int, default=16)
    return p


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        known = {k for k in vars(args) if k not in ("func", "command", "config")}
        bad = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if bad:
            parser.error(f"unknown config key(s) for {args.command}: {', '.join(bad)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, CameraError, OSError) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

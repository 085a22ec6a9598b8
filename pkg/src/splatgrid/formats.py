"""On-disk formats: splat-grid, codec and denoiser binaries, 3DGS PLY, scene manifests, images.

All binary payloads are little-endian; array bodies are float32.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .camera import Camera, CameraError, CameraIntrinsics, CameraPose
from .diffusion import Denoiser, DenoiserConfig, init_params, make_schedule
from .latents import IDENTITY, LINEAR_PATCH, Codec, CodecConfig
from .losses import View
from .splat import Primitives, ScaleBounds, SplatGrid

SH_C0 = 0.2820947917738781
OPACITY_CLAMP = 1e-4
GRID_VERSION = 1
CODEC_VERSION = 1
DENOISER_VERSION = 1
CHANNEL_LAYOUT = 0  # [color, opacity, scale, rotation, depth]

PLY_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                  "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


class FormatError(ValueError):
    pass


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (need {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _magic(r: _Reader, magic: bytes):
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.what}: bad magic {got!r}, expected {magic!r}")


# splat grids ---------------------------------------------------------------------------------


def _camera_block(cam: Camera) -> bytes:
    k = cam.intrinsics
    return struct.pack("<4d", k.fx, k.fy, k.cx, k.cy) + struct.pack("<9d", *cam.R.reshape(-1)) + \
        struct.pack("<3d", *cam.t)


def grids_to_bytes(grids: Sequence[SplatGrid], bounds: ScaleBounds = ScaleBounds()) -> bytes:
    if not grids:
        raise FormatError("no grids to write")
    h, w = grids[0].height, grids[0].width
    if any((g.height, g.width) != (h, w) for g in grids):
        raise FormatError("all grids in a file must share H x W")
    out = [b"SPLG", struct.pack("<HHHHB", GRID_VERSION, len(grids), h, w, CHANNEL_LAYOUT),
           struct.pack("<2d", bounds.s_min, bounds.s_max)]
    for g in grids:
        out.append(_camera_block(g.camera))
        out.append(_f32(g.raw))
    return b"".join(out)


def grids_from_bytes(data: bytes) -> tuple[list[SplatGrid], ScaleBounds]:
    r = _Reader(data, "SPLG")
    _magic(r, b"SPLG")
    version, v, h, w, layout = r.unpack("HHHHB")
    if version != GRID_VERSION:
        raise FormatError(f"SPLG: unsupported version {version}")
    if layout != CHANNEL_LAYOUT:
        raise FormatError(f"SPLG: unknown channel layout id {layout}")
    s_min, s_max = r.unpack("2d")
    bounds = ScaleBounds(s_min, s_max)
    grids = []
    for _ in range(v):
        fx, fy, cx, cy = r.unpack("4d")
        R = np.array(r.unpack("9d")).reshape(3, 3)
        t = np.array(r.unpack("3d"))
        cam = Camera(CameraIntrinsics(fx, fy, cx, cy, w, h), CameraPose(R, t))
        g = SplatGrid(r.floats((12, h, w)), cam)
        g.validate()
        grids.append(g)
    r.done()
    return grids, bounds


def save_grids(path, grids, bounds=ScaleBounds()) -> None:
    Path(path).write_bytes(grids_to_bytes(grids, bounds))


def load_grids(path) -> tuple[list[SplatGrid], ScaleBounds]:
    return grids_from_bytes(Path(path).read_bytes())


# codec --------------------------------------------------------------------------------------

_VARIANT_IDS = {IDENTITY: 0, LINEAR_PATCH: 1}


def codec_to_bytes(codec: Codec) -> bytes:
    c = codec.config
    head = b"SPLC" + struct.pack("<HBHH", CODEC_VERSION, _VARIANT_IDS[c.variant], c.patch, c.latent_dim)
    return head + b"".join(_f32(p) for p in codec.params)


def codec_from_bytes(data: bytes) -> Codec:
    r = _Reader(data, "SPLC")
    _magic(r, b"SPLC")
    version, vid, f, d = r.unpack("HBHH")
    if version != CODEC_VERSION:
        raise FormatError(f"SPLC: unsupported version {version}")
    variant = {v: k for k, v in _VARIANT_IDS.items()}.get(vid)
    if variant is None:
        raise FormatError(f"SPLC: unknown variant id {vid}")
    cfg = CodecConfig(variant=variant, patch=f, latent_dim=d)
    if variant == IDENTITY:
        r.done()
        return Codec(cfg)
    p = cfg.patch_dim
    enc, dec, off = r.floats((d, p)), r.floats((p, d)), r.floats((p,))
    r.done()
    return Codec(cfg, enc, dec, off)


def save_codec(path, codec: Codec) -> None:
    Path(path).write_bytes(codec_to_bytes(codec))


def load_codec(path) -> Codec:
    return codec_from_bytes(Path(path).read_bytes())


# denoiser checkpoint -------------------------------------------------------------------------


def denoiser_to_bytes(model: Denoiser, schedule) -> bytes:
    block = json.dumps({"model": asdict(model.config), "schedule": schedule.to_dict()},
                       sort_keys=True).encode()
    body = b"".join(_f32(model.params[k]) for k in sorted(model.params))
    return b"SPLD" + struct.pack("<HI", DENOISER_VERSION, len(block)) + block + body


def denoiser_from_bytes(data: bytes):
    r = _Reader(data, "SPLD")
    _magic(r, b"SPLD")
    version, n = r.unpack("HI")
    if version != DENOISER_VERSION:
        raise FormatError(f"SPLD: unsupported version {version}")
    try:
        block = json.loads(r.take(n).decode())
        cfg = DenoiserConfig(**block["model"])
        sched = make_schedule(**block["schedule"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"SPLD: bad config block ({e})") from None
    shapes = {k: v.shape for k, v in init_params(cfg).items()}
    params = {k: r.floats(shapes[k]) for k in sorted(shapes)}
    r.done()
    return Denoiser(cfg, params), sched


def save_denoiser(path, model, schedule) -> None:
    Path(path).write_bytes(denoiser_to_bytes(model, schedule))


def load_denoiser(path):
    return denoiser_from_bytes(Path(path).read_bytes())


# PLY --------------------------------------------------------------------------------------


def _logit(o):
    o = np.clip(o, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    return np.log(o) - np.log1p(-o)


def ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in PLY_PROPERTIES]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def ply_to_bytes(prims: Primitives) -> bytes:
    n = len(prims)
    cols = np.concatenate([
        prims.positions, np.zeros((n, 3)), (prims.colors - 0.5) / SH_C0, _logit(prims.opacities)[:, None],
        np.log(prims.scales), prims.rotations], axis=1)
    return ply_header(n) + _f32(cols)


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4", "short": "<i2",
              "ushort": "<u2", "char": "i1"}


def ply_from_bytes(data: bytes) -> Primitives:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("PLY: missing 'ply' magic or end_header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    n = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"PLY: unsupported format {' '.join(parts[1:])}")
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
            elif n is not None:
                raise FormatError(f"PLY: unsupported element {parts[1]!r} after vertex")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise FormatError(f"PLY: unsupported type for property {parts[-1]!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if n is None:
        raise FormatError("PLY: no vertex element")
    names = [p for p, _ in props]
    for req in PLY_PROPERTIES:
        if req not in names:
            raise FormatError(f"PLY: missing property {req!r}")
    if len(set(names)) != len(names):
        dup = next(p for p in names if names.count(p) > 1)
        raise FormatError(f"PLY: duplicate property {dup!r}")
    dtype = np.dtype(props)
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"PLY: body has {len(body)} bytes, expected {n * dtype.itemsize}")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    col = lambda *ks: np.stack([rec[k].astype(np.float64) for k in ks], axis=1)  # noqa: E731
    op = rec["opacity"].astype(np.float64)
    return Primitives(
        colors=col("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5,
        positions=col("x", "y", "z"),
        scales=np.exp(col("scale_0", "scale_1", "scale_2")),
        rotations=col("rot_0", "rot_1", "rot_2", "rot_3"),
        opacities=1.0 / (1.0 + np.exp(-op)),
    )


def export_ply(prims: Primitives, path) -> None:
    Path(path).write_bytes(ply_to_bytes(prims))


def import_ply(path) -> Primitives:
    return ply_from_bytes(Path(path).read_bytes())


# images ----------------------------------------------------------------------------------


def to_png_bytes(img: np.ndarray) -> bytes:
    """8-bit PNG of a (3,H,W) image or (H,W) map with values in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    a = a.transpose(1, 2, 0) if a.ndim == 3 else a
    u8 = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, img) -> None:
    Path(path).write_bytes(to_png_bytes(img))


def save_raw(path, arr) -> None:
    np.save(path, np.asarray(arr, dtype=np.float32), allow_pickle=False)


def load_raw(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)


# scene manifest ---------------------------------------------------------------------------


class ManifestError(ValueError):
    pass


@dataclass
class ManifestView:
    camera: Camera
    image: str
    mask: str
    coords: str | None = None
    normals: str | None = None
    role: str = "input"
    png: str | None = None


@dataclass
class Manifest:
    views: list[ManifestView]
    object_radius: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)
    root: Path = Path(".")

    def by_role(self, role: str) -> list[ManifestView]:
        return [v for v in self.views if v.role == role]

    def load_view(self, v: ManifestView) -> View:
        get = lambda p: None if p is None else load_raw(self.root / p)  # noqa: E731
        return View(v.camera, get(v.image), get(v.mask), get(v.coords), get(v.normals))

    def load_views(self, role: str | None = None) -> list[View]:
        return [self.load_view(v) for v in self.views if role is None or v.role == role]


def _fmt(x) -> str:
    return repr(float(x))


def manifest_text(m: Manifest) -> str:
    lines = ["# splat scene manifest", "version = 1", f"object_radius = {_fmt(m.object_radius)}",
             "background = " + " ".join(_fmt(b) for b in m.background)]
    for k in sorted(m.meta):
        lines.append(f"{k} = {m.meta[k]}")
    for v in m.views:
        k = v.camera.intrinsics
        lines += ["", "[view]", f"role = {v.role}", f"width = {k.width}", f"height = {k.height}",
                  f"fx = {_fmt(k.fx)}", f"fy = {_fmt(k.fy)}", f"cx = {_fmt(k.cx)}", f"cy = {_fmt(k.cy)}",
                  "R = " + " ".join(_fmt(x) for x in v.camera.R.reshape(-1)),
                  "t = " + " ".join(_fmt(x) for x in v.camera.t),
                  f"image = {v.image}", f"mask = {v.mask}"]
        for key in ("coords", "normals", "png"):
            if getattr(v, key) is not None:
                lines.append(f"{key} = {getattr(v, key)}")
    return "\n".join(lines) + "\n"


def save_manifest(path, m: Manifest) -> None:
    Path(path).write_text(manifest_text(m))


def _parse_view(block: dict, lineno: int) -> ManifestView:
    try:
        w, h = int(block["width"]), int(block["height"])
        k = CameraIntrinsics(float(block["fx"]), float(block["fy"]), float(block["cx"]), float(block["cy"]), w, h)
        R = np.array([float(x) for x in block["R"].split()]).reshape(3, 3)
        t = np.array([float(x) for x in block["t"].split()]).reshape(3)
        cam = Camera(k, CameraPose(R, t))
    except KeyError as e:
        raise ManifestError(f"view at line {lineno}: missing key {e.args[0]!r}") from None
    except CameraError as e:
        raise ManifestError(f"view at line {lineno}: camera invariant violated: {e}") from None
    except ValueError as e:
        raise ManifestError(f"view at line {lineno}: malformed camera ({e})") from None
    for key in ("image", "mask"):
        if key not in block:
            raise ManifestError(f"view at line {lineno}: missing key {key!r}")
    return ManifestView(cam, block["image"], block["mask"], block.get("coords"), block.get("normals"),
                        block.get("role", "input"), block.get("png"))


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    top: dict[str, str] = {}
    blocks: list[tuple[int, dict]] = []
    cur = top
    for i, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[view]":
            cur = {}
            blocks.append((i, cur))
            continue
        if "=" not in line:
            raise ManifestError(f"line {i}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        cur[k] = v
    if not blocks:
        raise ManifestError("manifest must contain at least one [view]")
    views = [_parse_view(b, ln) for ln, b in blocks]
    root = path.parent
    for v in views:
        for key in ("image", "mask", "coords", "normals"):
            p = getattr(v, key)
            if p is not None and not (root / p).exists():
                raise ManifestError(f"referenced file {p!r} does not exist")
    try:
        bg = tuple(float(x) for x in top.get("background", "0 0 0").split())
        radius = float(top.get("object_radius", "1.0"))
    except ValueError as e:
        raise ManifestError(f"malformed header value ({e})") from None
    if len(bg) != 3:
        raise ManifestError("background must have 3 components")
    meta = {k: v for k, v in top.items() if k not in ("version", "background", "object_radius")}
    m = Manifest(views, radius, bg, meta, root)
    for v in views:
        img, mask = np.load(root / v.image, mmap_mode="r"), np.load(root / v.mask, mmap_mode="r")
        h, w = v.camera.height, v.camera.width
        if img.shape != (3, h, w) or mask.shape != (h, w):
            raise ManifestError(f"view image {v.image!r} shape {img.shape} does not match camera {h}x{w}")
    return m


def write_views(out_dir, views: Sequence[View], roles: Sequence[str], background=(0.0, 0.0, 0.0),
                object_radius: float = 1.0, meta: dict | None = None, name: str = "scene.manifest") -> Path:
    """Write raw arrays, PNGs and a manifest for ``views``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mv = []
    for i, (v, role) in enumerate(zip(views, roles)):
        stem = f"view{i:03d}"
        save_raw(out / f"{stem}_image.npy", v.image)
        save_raw(out / f"{stem}_mask.npy", v.mask)
        save_png(out / f"{stem}.png", v.image)
        entry = ManifestView(v.camera, f"{stem}_image.npy", f"{stem}_mask.npy", role=role, png=f"{stem}.png")
        if v.coords is not None:
            save_raw(out / f"{stem}_coords.npy", v.coords)
            entry.coords = f"{stem}_coords.npy"
        if v.normals is not None:
            save_raw(out / f"{stem}_normals.npy", v.normals)
            entry.normals = f"{stem}_normals.npy"
        mv.append(entry)
    path = out / name
    save_manifest(path, Manifest(mv, object_radius, tuple(background), meta or {}, out))
    return path


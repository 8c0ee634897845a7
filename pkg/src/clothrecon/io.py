"""Scene bundles, config files, mesh/image I/O and the synthetic scene generator.

Bundle layout::

    scene.yaml            frame count, simulator and renderer settings
    camera.yaml           intrinsics and world-to-camera extrinsics
    template.obj          rest mesh with per-vertex uvs
    texture.png
    background.png        plate behind the cloth (optional)
    frames/frame_0001.png ...
    masks/mask_0001.png   ... values {0, 255}
    ground_truth/         mesh_0001.obj ..., params.yaml, correctives.npy (synthetic scenes)
"""
from __future__ import annotations

import dataclasses
import io as _io
import os
import platform
import re
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .errors import CountMismatch, MissingFile, ParseError, ShapeMismatch
from .geometry import Camera, SurfaceState, TemplateMesh, TextureMap, build_template, grid_template
from .objective import FrameObservation
from .physics.integrator import simulate
from .physics.params import CollisionObstacle, PhysicsParams, SimConfig, default_params
from .softrender import RenderConfig, rasterize

FRAME_FMT = "frame_{:04d}.png"
MASK_FMT = "mask_{:04d}.png"
MESH_FMT = "mesh_{:04d}.obj"


# ---------------------------------------------------------------- atomic writes

@contextmanager
def _atomic(path, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    with _atomic(path, "w") as fh:
        fh.write(text)


def atomic_write_bytes(path, data: bytes):
    with _atomic(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------- yaml

def save_yaml(path, data):
    atomic_write_text(path, yaml.safe_dump(data, sort_keys=False))


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ParseError(path, f"invalid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ParseError(path, "expected a mapping at the top level")
    return data


def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def camera_to_dict(cam: Camera) -> dict:
    return {"fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
            "width": int(cam.width), "height": int(cam.height),
            "rotation": [_floats(r) for r in cam.rotation], "translation": _floats(cam.translation)}


_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"}


def camera_from_dict(d: dict, path="<camera>") -> Camera:
    unknown = set(d) - _CAMERA_KEYS
    if unknown:
        raise ParseError(path, f"unknown camera fields: {sorted(unknown)}")
    try:
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]),
                      int(d["height"]), np.array(d["rotation"], dtype=np.float64),
                      np.array(d["translation"], dtype=np.float64))
    except KeyError as exc:
        raise ParseError(path, f"camera is missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(path, f"invalid camera: {exc}") from exc


def sim_config_to_dict(cfg: SimConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["gravity"] = list(cfg.gravity)
    d["pinned"] = [int(i) for i in cfg.pinned]
    return d


def sim_config_from_dict(d: dict, path="<sim>") -> SimConfig:
    return _build(SimConfig, d, path)


def render_config_to_dict(cfg: RenderConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["background_color"] = list(cfg.background_color)
    return d


def render_config_from_dict(d: dict, path="<render>") -> RenderConfig:
    d = dict(d)
    if "background_color" in d:
        d["background_color"] = tuple(d["background_color"])
    return _build(RenderConfig, d, path)


def _build(cls, d, path):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ParseError(path, f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ParseError(path, f"invalid {cls.__name__}: {exc}") from exc


def params_to_dict(p: PhysicsParams) -> dict:
    return {"density": float(p.density), "stretch": _floats(p.stretch), "bend": _floats(p.bend),
            "wind": _floats(p.wind), "air_density": float(p.air_density)}


def params_from_dict(d: dict, correctives=None, path="<params>") -> PhysicsParams:
    try:
        return PhysicsParams(density=d.get("density", 0.15), stretch=d["stretch"], bend=d["bend"],
                             wind=d.get("wind", (0.0, 0.0, 0.0)), correctives=correctives,
                             air_density=d.get("air_density", 1.0))
    except KeyError as exc:
        raise ParseError(path, f"parameters are missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(path, f"invalid parameters: {exc}") from exc


def save_params(directory, p: PhysicsParams):
    directory = Path(directory)
    save_yaml(directory / "params.yaml", params_to_dict(p))
    if p.correctives is not None:
        buf = _io.BytesIO()
        np.save(buf, p.correctives)
        atomic_write_bytes(directory / "correctives.npy", buf.getvalue())


def load_params(directory) -> PhysicsParams:
    directory = Path(directory)
    d = load_yaml(directory / "params.yaml")
    cpath = directory / "correctives.npy"
    corr = None
    if cpath.is_file():
        try:
            corr = np.load(cpath)
        except ValueError as exc:
            raise ParseError(cpath, f"unreadable array: {exc}") from exc
    return params_from_dict(d, corr, directory / "params.yaml")


# ---------------------------------------------------------------- meshes and images

def write_obj(path, positions, faces, uvs=None):
    """OBJ with ``v``/``vt``/``f``; floats are written with ``repr`` so they read back exactly."""
    x = np.asarray(positions, dtype=np.float64)
    lines = [f"v {x0!r} {x1!r} {x2!r}" for x0, x1, x2 in x.tolist()]
    if uvs is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in np.asarray(uvs, dtype=np.float64).tolist()]
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (np.asarray(faces) + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (np.asarray(faces) + 1).tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_obj(path):
    """Returns ``(positions, faces, uvs or None)``; uvs are taken per vertex."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    v, vt, f, ft = [], [], [], []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                v.append([float(s) for s in parts[1:4]])
            elif parts[0] == "vt":
                vt.append([float(s) for s in parts[1:3]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ParseError(path, f"line {ln}: only triangles are supported")
                idx = [p.split("/") for p in parts[1:]]
                f.append([int(i[0]) - 1 for i in idx])
                if all(len(i) > 1 and i[1] for i in idx):
                    ft.append([int(i[1]) - 1 for i in idx])
        except ValueError as exc:
            raise ParseError(path, f"line {ln}: {exc}") from exc
    x = np.array(v, dtype=np.float64).reshape(-1, 3)
    faces = np.array(f, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(x)):
        raise ParseError(path, "face index out of range")
    uvs = None
    if vt and len(ft) == len(f):
        uvs = np.zeros((len(x), 2))
        vt = np.array(vt, dtype=np.float64)
        uvs[faces.ravel()] = vt[np.array(ft).ravel()]
    return x, faces, uvs


def load_template(path) -> TemplateMesh:
    x, f, uv = read_obj(path)
    try:
        return build_template(x, f, uv)
    except ValueError as exc:
        raise ParseError(path, str(exc)) from exc


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    """Float image in [0, 1] (H, W[, 3]) or uint8."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    buf = _io.BytesIO()
    Image.fromarray(a).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_mask(path, mask):
    write_png(path, np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8))


def read_png(path, mode="RGB") -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ParseError(path, f"unreadable image: {exc}") from exc


def read_mask(path) -> np.ndarray:
    return (read_png(path, "L") > 0.5).astype(np.float64)


# ---------------------------------------------------------------- procedural content

def procedural_texture(size: int = 128, seed: int = 0) -> TextureMap:
    """Smooth multi-frequency colour pattern; gives the photometric term something to lock on to."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    chans = []
    for c in range(3):
        acc = np.full_like(xx, 0.5)
        for _ in range(3):
            fx, fy = rng.integers(1, 5, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            acc += 0.13 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        chans.append(acc)
    return TextureMap(np.clip(np.stack(chans, axis=-1), 0.0, 1.0))


def background_plate(height: int, width: int, seed: int = 1) -> np.ndarray:
    """Dim low-frequency plate, visually distinct from the cloth texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    base = 0.15 + 0.05 * np.sin(2 * np.pi * (xx + rng.uniform())) * np.cos(2 * np.pi * (yy + rng.uniform()))
    tint = np.array([0.9, 1.0, 1.1])
    return np.clip(base[..., None] * tint, 0.0, 1.0)


# ---------------------------------------------------------------- scene bundles

@dataclass
class SceneBundle:
    template: TemplateMesh
    texture: TextureMap
    camera: Camera
    observations: list  # FrameObservation for frames 1..T; frame 1 is the template frame
    sim_config: SimConfig
    render_config: RenderConfig
    background: np.ndarray | None = None
    ground_truth: list | None = None  # per-frame (N, 3) positions
    true_params: PhysicsParams | None = None
    root: Path | None = None

    @property
    def n_frames(self) -> int:
        return len(self.observations)

    def observation_dict(self, start: int = 2) -> dict:
        return {o.index: o for o in self.observations if o.index >= start}


def render_observation(state, template, texture, camera, render_config, background, index) -> FrameObservation:
    r = rasterize(state, template, texture, camera, render_config)
    plate = background if background is not None else np.broadcast_to(
        np.asarray(render_config.background_color, dtype=np.float64), r.color.shape)
    a = r.alpha[..., None]
    img = np.clip(a * r.color + (1.0 - a) * plate, 0.0, 1.0)
    return FrameObservation(img, (r.alpha > 0.5).astype(np.float64), index,
                            None if background is None else np.asarray(background, dtype=np.float64))


def generate_synthetic(template: TemplateMesh, true_params: PhysicsParams, sim_config: SimConfig, camera: Camera,
                       n_frames: int, out_dir=None, texture: TextureMap | None = None, background=None,
                       render_config: RenderConfig | None = None,
                       obstacle: CollisionObstacle | None = None) -> SceneBundle:
    """Simulate with ``true_params``, render every frame and (optionally) write the bundle.

    The returned bundle carries the exact floating-point renders; the PNGs on
    disk are quantised to 8 bits.
    """
    texture = texture or procedural_texture()
    render_config = render_config or RenderConfig()
    params = true_params.with_frames(n_frames, template.n_vertices)
    states = simulate(template, params, sim_config, n_frames, obstacle)
    obs = [render_observation(s, template, texture, camera, render_config, background, s.time_index)
           for s in states]
    bundle = SceneBundle(template, texture, camera, obs, sim_config, render_config,
                         None if background is None else np.asarray(background, dtype=np.float64),
                         [s.positions.copy() for s in states], params,
                         None if out_dir is None else Path(out_dir))
    if out_dir is not None:
        write_scene(bundle, out_dir)
    return bundle


def write_scene(bundle: SceneBundle, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_yaml(out / "scene.yaml", {"n_frames": bundle.n_frames, "version": __version__,
                                   "sim": sim_config_to_dict(bundle.sim_config),
                                   "render": render_config_to_dict(bundle.render_config)})
    save_yaml(out / "camera.yaml", camera_to_dict(bundle.camera))
    write_obj(out / "template.obj", bundle.template.vertices, bundle.template.faces, bundle.template.uvs)
    write_png(out / "texture.png", bundle.texture.image)
    if bundle.background is not None:
        write_png(out / "background.png", bundle.background)
    for o in bundle.observations:
        write_png(out / "frames" / FRAME_FMT.format(o.index), o.image)
        write_mask(out / "masks" / MASK_FMT.format(o.index), o.mask)
    if bundle.ground_truth is not None:
        gt = out / "ground_truth"
        for t, x in enumerate(bundle.ground_truth, start=1):
            write_obj(gt / MESH_FMT.format(t), x, bundle.template.faces)
        if bundle.true_params is not None:
            save_params(gt, bundle.true_params)


def _numbered(directory: Path, pattern: str):
    rx = re.compile(pattern)
    found = {}
    for p in directory.iterdir():
        m = rx.fullmatch(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def load_scene(directory) -> SceneBundle:
    """Read a bundle; images come back in [0, 1] and masks binarised at 0.5."""
    root = Path(directory)
    if not root.is_dir():
        raise MissingFile(root)
    for name in ("scene.yaml", "camera.yaml", "template.obj", "texture.png", "frames", "masks"):
        if not (root / name).exists():
            raise MissingFile(root / name)
    meta = load_yaml(root / "scene.yaml")
    camera = camera_from_dict(load_yaml(root / "camera.yaml"), root / "camera.yaml")
    sim = sim_config_from_dict(meta.get("sim", {}), root / "scene.yaml")
    render = render_config_from_dict(meta.get("render", {}), root / "scene.yaml")
    template = load_template(root / "template.obj")
    texture = TextureMap(read_png(root / "texture.png"))
    background = read_png(root / "background.png") if (root / "background.png").is_file() else None

    frames = _numbered(root / "frames", r"frame_(\d+)\.png")
    masks = _numbered(root / "masks", r"mask_(\d+)\.png")
    if len(frames) != len(masks):
        raise CountMismatch(root / "masks", f"{len(frames)} frames but {len(masks)} masks")
    n = len(frames)
    if n == 0:
        raise CountMismatch(root / "frames", "no frames found")
    if sorted(frames) != list(range(1, n + 1)):
        raise CountMismatch(root / "frames", "frames must be numbered 1..T without gaps")
    if sorted(masks) != sorted(frames):
        raise CountMismatch(root / "masks", "mask numbering does not match frame numbering")
    if "n_frames" in meta and int(meta["n_frames"]) != n:
        raise CountMismatch(root / "frames", f"scene.yaml declares {meta['n_frames']} frames, found {n}")

    obs = []
    for t in range(1, n + 1):
        img = read_png(frames[t])
        m = read_mask(masks[t])
        if img.shape[:2] != (camera.height, camera.width) or m.shape != img.shape[:2]:
            raise ParseError(frames[t], f"image size {img.shape[:2]} does not match the camera")
        obs.append(FrameObservation(img, m, t, background))

    gt, true_params = None, None
    gdir = root / "ground_truth"
    if gdir.is_dir():
        meshes = _numbered(gdir, r"mesh_(\d+)\.obj")
        if len(meshes) != n:
            raise CountMismatch(gdir, f"{len(meshes)} ground-truth meshes for {n} frames")
        gt = []
        for t in range(1, n + 1):
            x, _, _ = read_obj(meshes[t])
            if x.shape != template.vertices.shape:
                raise ParseError(meshes[t], "vertex count differs from the template")
            gt.append(x)
        if (gdir / "params.yaml").is_file():
            true_params = load_params(gdir)
    return SceneBundle(template, texture, camera, obs, sim, render, background, gt, true_params, root)


# ---------------------------------------------------------------- replay

EDITABLE = ("density", "stretch", "bend", "wind")


def apply_edits(params: PhysicsParams, edits: dict | None) -> PhysicsParams:
    """Override any of density/stretch/bend/wind; ``corrective_scale`` scales F; ``*_scale`` scales a block."""
    p = params.copy()
    for key, val in (edits or {}).items():
        if key in EDITABLE:
            setattr(p, key, float(val) if key == "density" else np.asarray(val, dtype=np.float64))
        elif key == "corrective_scale":
            if p.correctives is not None:
                p.correctives = p.correctives * float(val)
        elif key.endswith("_scale") and key[:-6] in EDITABLE:
            name = key[:-6]
            cur = getattr(p, name)
            setattr(p, name, cur * float(val) if name == "density" else np.asarray(cur) * float(val))
        else:
            raise ValueError(f"unknown edit {key!r}")
    # re-run validation on the edited values
    return PhysicsParams(p.density, p.stretch, p.bend, p.wind, p.correctives, p.air_density)


def replay_with_edits(params: PhysicsParams, edits, template: TemplateMesh, sim_config: SimConfig,
                      n_frames: int | None = None, camera: Camera | None = None, texture=None,
                      render_config: RenderConfig | None = None, obstacle=None):
    """Re-simulate (and render when a camera is given) with edited parameters.

    Returns ``(states, renders)``; ``renders`` is empty without a camera.
    """
    p = apply_edits(params, edits)
    n_frames = n_frames or p.n_frames
    if n_frames is None:
        raise ValueError("n_frames is required when the parameters carry no correctives")
    states = simulate(template, p, sim_config, n_frames, obstacle)
    renders = []
    if camera is not None:
        if texture is None:
            raise ValueError("rendering needs a texture")
        renders = [rasterize(s, template, texture, camera, render_config) for s in states]
    return states, renders


def write_states(directory, states, template: TemplateMesh):
    for s in states:
        x = s.positions if isinstance(s, SurfaceState) else s
        t = s.time_index if isinstance(s, SurfaceState) else None
        write_obj(Path(directory) / MESH_FMT.format(t), x, template.faces, template.uvs)


def read_states(directory, template: TemplateMesh):
    meshes = _numbered(Path(directory), r"mesh_(\d+)\.obj")
    if not meshes:
        raise MissingFile(Path(directory) / MESH_FMT.format(1))
    if sorted(meshes) != list(range(1, len(meshes) + 1)):
        raise CountMismatch(directory, "meshes must be numbered 1..T without gaps")
    out = []
    for t in sorted(meshes):
        x, _, _ = read_obj(meshes[t])
        if x.shape != template.vertices.shape:
            raise ShapeMismatch(f"{meshes[t]}: vertex count differs from the template")
        out.append(SurfaceState(x, np.zeros_like(x), t))
    return out


# ---------------------------------------------------------------- run manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    threads: int
    version: str = __version__
    started: float = field(default_factory=time.time)
    seconds: float | None = None
    extra: dict = field(default_factory=dict)

    def finish(self, **extra):
        self.seconds = time.time() - self.started
        self.extra.update(extra)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["python"] = platform.python_version()
        d["numpy"] = np.__version__
        return d

    def write(self, directory):
        save_yaml(Path(directory) / "manifest.yaml", _plain(self.to_dict()))


def _plain(obj):
    """Convert numpy scalars/arrays and tuples into YAML-safe builtins."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------- default synthetic scene

DEFAULT_SCENE = {
    "grid": 10,  # vertices per side
    "size": 0.5,  # m
    "n_frames": 20,
    "pinned": [0, 99],  # two diagonal corners
    "gravity": [0.0, 0.0, -0.3],  # m/step^2
    "wind": [0.5, 0.0, 0.0],  # m/step
    # velocity pulse on a Gaussian patch around the free corner (x, y)
    "pulse": {"frames": [9, 10, 11], "center": [0.5, 0.0], "radius": 0.2, "velocity": [0.0, 0.0, 0.03]},
    "camera": {"eye": [0.25, -1.0, 0.6], "target": [0.25, 0.25, -0.1], "up": [0.0, 0.0, 1.0],
               "focal": 110.0, "width": 96, "height": 96},
    "texture_seed": 0,
    "background": False,
}


def scene_from_config(cfg: dict | None = None):
    """Template, true parameters, simulator config and camera for a synthetic scene description.

    Missing keys fall back to ``DEFAULT_SCENE``; ``pulse: null`` disables the corrective pulse.
    """
    c = {**DEFAULT_SCENE, **(cfg or {})}
    unknown = set(c) - set(DEFAULT_SCENE)
    if unknown:
        raise ValueError(f"unknown scene keys {sorted(unknown)}")
    n = int(c["grid"])
    template = grid_template(n, n, float(c["size"]))
    n_frames = int(c["n_frames"])
    params = default_params(n_frames, template.n_vertices)
    params.wind = np.asarray(c["wind"], dtype=np.float64)
    pulse = c["pulse"]
    if pulse:
        d = np.linalg.norm(template.vertices[:, :2] - np.asarray(pulse["center"]), axis=1)
        bump = np.exp(-(d / float(pulse["radius"])) ** 2)
        for frame in pulse["frames"]:
            if not 2 <= frame <= n_frames:
                raise ValueError(f"pulse frame {frame} outside 2..{n_frames}")
            params.correctives[frame - 2] += bump[:, None] * np.asarray(pulse["velocity"], dtype=np.float64)
    sim = SimConfig(pinned=tuple(c["pinned"]), gravity=tuple(c["gravity"]))
    cam = c["camera"]
    camera = Camera.look_at(cam["eye"], cam["target"], cam["up"], cam["focal"], cam["focal"], cam["width"],
                            cam["height"])
    return template, params, sim, camera

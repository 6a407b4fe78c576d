"""Synthetic multi-view dynamic datasets with controllable corruptions.

Clean frames are rendered with the package's own rasterizer from scripted
Gaussian clusters; corrupted frames add per-timestamp colour jitter,
per-view pixel noise and random occluding blotches. Everything needed to
replay the corruptions from the clean frames is logged in the manifest.

Layout under the output directory::

    manifest.json
    frames/t{TTT}_v{VVV}.png        corrupted training images
    clean/t{TTT}_v{VVV}.png         uncorrupted ground truth
    clean/alpha_t{TTT}_v{VVV}.png   coverage of the clean render
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, CameraPose, OrbitRig, orbit_poses
from .gaussians import SH_C0, GaussianCloud
from .rasterizer import RenderSettings, render
from .rasterizer.io import read_png, to_uint8, write_png

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "splat4d-dataset"
MANIFEST_VERSION = 1
DEFAULT_HELD_OUT = (5, 10, 15)


@dataclass
class Primitive:
    """A cluster of Gaussians whose center follows ``center + amplitude * sin(2 pi f t + phase)``."""

    color: tuple = (0.8, 0.3, 0.2)
    n_gaussians: int = 60
    spread: float = 0.1
    scale: float = 0.035
    opacity: float = 0.9
    center: tuple = (0.0, 0.0, 0.0)
    amplitude: tuple = (0.0, 0.0, 0.0)
    frequency: float = 1.0
    phase: float = 0.0
    rotation_rate: float = 0.0
    color_variation: float = 0.08

    def center_at(self, t: float) -> np.ndarray:
        s = math.sin(2 * math.pi * self.frequency * t + self.phase)
        return np.asarray(self.center, dtype=np.float64) + s * np.asarray(self.amplitude, dtype=np.float64)


@dataclass
class SceneScript:
    primitives: list = field(default_factory=list)
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    bounds: tuple = ((-0.7, -0.7, -0.7), (0.7, 0.7, 0.7))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "background": list(self.background),
                "bounds": [list(self.bounds[0]), list(self.bounds[1])],
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        extra = set(d) - {"primitives", "seed", "background", "bounds"}
        if extra:
            raise ValueError(f"unknown script keys: {sorted(extra)}")
        known = set(Primitive.__dataclass_fields__)
        prims = []
        for p in d.get("primitives", []):
            unknown = set(p) - known
            if unknown:
                raise ValueError(f"unknown primitive keys: {sorted(unknown)}")
            prims.append(Primitive(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}))
        bounds = d.get("bounds", ((-0.7,) * 3, (0.7,) * 3))
        return cls(prims, int(d.get("seed", 0)), tuple(d.get("background", (1.0, 1.0, 1.0))),
                   (tuple(bounds[0]), tuple(bounds[1])))

    @classmethod
    def load(cls, path) -> "SceneScript":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_script(seed: int = 0, static: bool = False) -> SceneScript:
    """Three clusters: a still body, a swinging limb and a spinning, bobbing head."""
    body = Primitive(color=(0.85, 0.35, 0.25), n_gaussians=90, spread=0.14, scale=0.04,
                     center=(0.0, 0.0, -0.1))
    limb = Primitive(color=(0.2, 0.55, 0.85), n_gaussians=50, spread=0.06, scale=0.03,
                     center=(0.22, 0.0, -0.05), amplitude=(0.0, 0.18, 0.08), frequency=1.0)
    head = Primitive(color=(0.3, 0.75, 0.3), n_gaussians=50, spread=0.07, scale=0.03,
                     center=(-0.05, 0.0, 0.25), amplitude=(0.08, 0.0, 0.05), frequency=1.0,
                     phase=1.0, rotation_rate=2.0)
    prims = [body, limb, head]
    if static:
        for p in prims:
            p.amplitude = (0.0, 0.0, 0.0)
            p.rotation_rate = 0.0
    return SceneScript(prims, seed)


def _quat_mul(a, b):
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=-1)


class ScriptedScene:
    """Ground-truth Gaussians of a script, sampled once and posed per timestamp."""

    def __init__(self, script: SceneScript):
        self.script = script
        rng = np.random.default_rng(script.seed)
        self.parts = []
        for p in script.primitives:
            n = p.n_gaussians
            offsets = np.clip(rng.normal(0, p.spread, (n, 3)), -2.5 * p.spread, 2.5 * p.spread)
            quats = rng.normal(size=(n, 4))
            quats /= np.linalg.norm(quats, axis=1, keepdims=True)
            log_scales = np.log(p.scale) + rng.normal(0, 0.25, (n, 3))
            colors = np.clip(np.asarray(p.color) + rng.uniform(-p.color_variation, p.color_variation, (n, 3)), 0, 1)
            self.parts.append((p, offsets, quats, log_scales, colors))

    def cloud_at(self, t: float) -> tuple[GaussianCloud, np.ndarray]:
        pos, rot, ls, op, col = [], [], [], [], []
        for p, offsets, quats, log_scales, colors in self.parts:
            ang = p.rotation_rate * t
            c, s = math.cos(ang), math.sin(ang)
            rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            qz = np.array([math.cos(ang / 2), 0.0, 0.0, math.sin(ang / 2)])
            pos.append(offsets @ rz.T + p.center_at(t))
            rot.append(_quat_mul(np.broadcast_to(qz, quats.shape), quats))
            ls.append(log_scales)
            op.append(np.full(len(offsets), math.log(p.opacity / (1 - p.opacity))))
            col.append(colors)
        colors = np.concatenate(col)
        sh = ((colors - 0.5) / SH_C0)[:, None, :]
        cloud = GaussianCloud(np.concatenate(pos), np.concatenate(rot), np.concatenate(ls),
                              np.concatenate(op), sh)
        return cloud, colors

    def render(self, t: float, pose: CameraPose, intr: CameraIntrinsics):
        cloud, colors = self.cloud_at(t)
        settings = RenderSettings(background=tuple(self.script.background))
        out = render(cloud, colors, pose, intr, settings)
        return out.image, out.alpha_map


@dataclass
class CorruptionSpec:
    gain: float = 0.15
    bias: float = 0.05
    noise_sigma: float = 0.05
    noise_views: tuple = ()
    defect_prob: float = 0.1
    defect_radius: tuple = (4, 8)

    def __post_init__(self):
        if not 0 <= self.gain < 1:
            raise ValueError("gain amplitude must be in [0, 1) so gains stay positive")
        if self.bias < 0 or self.noise_sigma < 0:
            raise ValueError("bias and noise sigma must be non-negative")
        if not 0 <= self.defect_prob <= 1:
            raise ValueError("defect probability must be in [0, 1]")
        self.noise_views = tuple(int(v) for v in self.noise_views)
        self.defect_radius = tuple(int(r) for r in self.defect_radius)

    @classmethod
    def none(cls) -> "CorruptionSpec":
        return cls(gain=0.0, bias=0.0, noise_sigma=0.0, noise_views=(), defect_prob=0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_views"] = list(self.noise_views)
        d["defect_radius"] = list(self.defect_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(**d)


def default_noise_views(n_views: int) -> tuple:
    return tuple(v for v in range(n_views) if v % 3 == 1)


def apply_corruption(clean: np.ndarray, alpha: np.ndarray, background, record: dict) -> np.ndarray:
    """Corrupt one clean image following its logged ``record``; output quantised to 8 bits."""
    img = clean.astype(np.float64)
    a = alpha.astype(np.float64)[..., None]
    gain = np.asarray(record["gain"], dtype=np.float64)
    bias = np.asarray(record["bias"], dtype=np.float64)
    if np.any(gain != 1.0) or np.any(bias != 0.0):
        # affine on the premultiplied foreground, equal to jittering every Gaussian's colour
        bg = np.asarray(background, dtype=np.float64)
        fg = img - (1.0 - a) * bg
        img = gain * fg + bias * a + (1.0 - a) * bg
    if record.get("noise_sigma", 0.0) > 0:
        rng = np.random.default_rng(record["noise_seed"])
        img = img + rng.normal(0.0, record["noise_sigma"], img.shape)
    for d in record.get("defects", []):
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        mask = (xx + 0.5 - d["center"][0]) ** 2 + (yy + 0.5 - d["center"][1]) ** 2 <= d["radius"] ** 2
        img[mask] = np.asarray(d["color"])
    return to_uint8(img).astype(np.float32) / 255.0


def _frame_name(t: int, v: int) -> str:
    return f"t{t:03d}_v{v:03d}.png"


def generate(script: SceneScript, rig: OrbitRig, n_frames: int, spec: CorruptionSpec, out_dir,
             size: int = 128, seed: int = 0, fov_deg: float = 49.0,
             held_out=DEFAULT_HELD_OUT) -> dict:
    """Render, corrupt and write a dataset; returns the manifest dict."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "frames").mkdir(parents=True, exist_ok=True)
        (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if n_frames < 1:
        raise ValueError("need at least one frame")
    scene = ScriptedScene(script)
    intr = CameraIntrinsics.from_fov(size, size, fov_deg)
    poses = orbit_poses(rig)
    times = [i / (n_frames - 1) if n_frames > 1 else 0.0 for i in range(n_frames)]
    rng = np.random.default_rng(seed)

    jitter = []
    for ti in range(n_frames):
        if ti == 0:
            gain, bias = [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]
        else:
            gain = rng.uniform(1 - spec.gain, 1 + spec.gain, 3).tolist()
            bias = rng.uniform(-spec.bias, spec.bias, 3).tolist()
        jitter.append({"t": ti, "gain": gain, "bias": bias})

    images, noise_log, defect_log = [], [], []
    for ti, t in enumerate(times):
        for v, pose in enumerate(poses):
            clean_f, alpha_f = scene.render(t, pose, intr)
            clean8 = to_uint8(clean_f)
            alpha8 = to_uint8(alpha_f)
            clean = clean8.astype(np.float32) / 255.0
            alpha = alpha8.astype(np.float32) / 255.0
            record = {"gain": jitter[ti]["gain"], "bias": jitter[ti]["bias"], "defects": []}
            if v in spec.noise_views and spec.noise_sigma > 0:
                nseed = int(rng.integers(2 ** 31))
                record["noise_sigma"] = spec.noise_sigma
                record["noise_seed"] = nseed
                noise_log.append({"t": ti, "view": v, "seed": nseed})
            if spec.defect_prob > 0 and rng.random() < spec.defect_prob:
                ys, xs = np.nonzero(alpha > 0.5)
                if len(xs):
                    k = int(rng.integers(len(xs)))
                    cx, cy = float(xs[k] + 0.5), float(ys[k] + 0.5)
                else:
                    cx, cy = float(rng.uniform(0, size)), float(rng.uniform(0, size))
                d = {"t": ti, "view": v, "center": [cx, cy],
                     "radius": float(rng.integers(spec.defect_radius[0], spec.defect_radius[1] + 1)),
                     "color": rng.uniform(0, 1, 3).tolist()}
                record["defects"].append(d)
                defect_log.append(d)
            frame = apply_corruption(clean, alpha, script.background, record)
            name = _frame_name(ti, v)
            write_png(out_dir / "frames" / name, frame)
            write_png(out_dir / "clean" / name, clean)
            Image.fromarray(alpha8).save(out_dir / "clean" / f"alpha_{name}")
            images.append({"t": ti, "view": v, "frame": f"frames/{name}", "clean": f"clean/{name}",
                           "alpha": f"clean/alpha_{name}"})

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": seed,
        "timestamps": n_frames,
        "views": rig.n_azimuths,
        "width": size,
        "height": size,
        "times": times,
        "background": list(script.background),
        "bounds": {"min": list(script.bounds[0]), "max": list(script.bounds[1])},
        "intrinsics": intr.to_dict(),
        "rig": rig.to_dict(),
        "poses": [p.to_dict() for p in poses],
        "held_out_views": [v for v in held_out if v < rig.n_azimuths],
        "images": images,
        "corruption": {
            "spec": spec.to_dict(),
            "jitter": jitter,
            "noise": noise_log,
            "defects": defect_log,
        },
        "script": script.to_dict(),
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


class DatasetError(ValueError):
    pass


class Dataset:
    """Images of a generated dataset indexed by ``(t, view)``, loaded eagerly."""

    def __init__(self, root, manifest: dict, frames: dict, clean: dict, alphas: dict):
        self.root = Path(root)
        self.manifest = manifest
        self._frames = frames
        self._clean = clean
        self._alphas = alphas
        self.intrinsics = CameraIntrinsics.from_dict(manifest["intrinsics"])
        self.rig = OrbitRig.from_dict(manifest["rig"])
        self.poses = [CameraPose.from_dict(p) for p in manifest["poses"]]
        self.times = list(manifest["times"])
        self.background = tuple(manifest["background"])
        self.bounds = (np.asarray(manifest["bounds"]["min"]), np.asarray(manifest["bounds"]["max"]))
        self.held_out = list(manifest["held_out_views"])

    @property
    def n_frames(self) -> int:
        return int(self.manifest["timestamps"])

    @property
    def n_views(self) -> int:
        return int(self.manifest["views"])

    @property
    def train_views(self) -> list[int]:
        return [v for v in range(self.n_views) if v not in self.held_out]

    def train_keys(self) -> list[tuple[int, int]]:
        return [(t, v) for t in range(self.n_frames) for v in self.train_views]

    def test_keys(self) -> list[tuple[int, int]]:
        return [(t, v) for t in range(self.n_frames) for v in self.held_out]

    def image(self, t: int, view: int) -> np.ndarray:
        return self._frames[(t, view)]

    def clean(self, t: int, view: int) -> np.ndarray:
        return self._clean[(t, view)]

    def alpha(self, t: int, view: int) -> np.ndarray:
        return self._alphas[(t, view)]

    def corruption_record(self, t: int, view: int) -> dict:
        c = self.manifest["corruption"]
        rec = {"gain": c["jitter"][t]["gain"], "bias": c["jitter"][t]["bias"], "defects": []}
        for n in c["noise"]:
            if n["t"] == t and n["view"] == view:
                rec["noise_sigma"] = c["spec"]["noise_sigma"]
                rec["noise_seed"] = n["seed"]
        rec["defects"] = [d for d in c["defects"] if d["t"] == t and d["view"] == view]
        return rec


def load(path) -> Dataset:
    """Load a dataset directory (or its manifest file)."""
    path = Path(path)
    root = path.parent if path.is_file() else path
    mpath = root / MANIFEST_NAME
    if not mpath.exists():
        raise DatasetError(f"manifest not found: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {mpath}: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{mpath} is not a {MANIFEST_FORMAT} manifest")
    required = ("timestamps", "views", "intrinsics", "poses", "images", "times", "rig")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise DatasetError(f"manifest {mpath} lacks keys {missing}")
    frames, clean, alphas = {}, {}, {}
    for entry in manifest["images"]:
        key = (int(entry["t"]), int(entry["view"]))
        for store, field_name in ((frames, "frame"), (clean, "clean"), (alphas, "alpha")):
            if field_name not in entry:
                continue
            fp = root / entry[field_name]
            if not fp.exists():
                raise DatasetError(f"missing image file: {fp}")
            if field_name == "alpha":
                with Image.open(fp) as im:
                    store[key] = np.asarray(im, dtype=np.float32) / 255.0
            else:
                store[key] = read_png(fp)
    expected = manifest["timestamps"] * manifest["views"]
    if len(frames) != expected:
        raise DatasetError(f"manifest lists {len(frames)} images, expected {expected}")
    return Dataset(root, manifest, frames, clean, alphas)

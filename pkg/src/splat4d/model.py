"""Dynamic scene model: canonical cloud + HexPlane + decoders, rendered at (t, view)."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .deform import MLP, ColorHead, DeformDecoder
from .gaussians import (
    GaussianCloud,
    normalize_backward,
    normalize_quats,
    read_cloud,
    sh_colors,
    sh_colors_backward,
    write_cloud,
)
from .hexplane import HexPlaneGrid
from .rasterizer import COV2D_FLOOR, RenderOutput, RenderSettings, render, render_backward

MODEL_MAGIC = b"S4DM"
MODEL_VERSION = 1

CLOUD_GROUPS = {
    "cloud.positions": "positions",
    "cloud.rotations": "rotations",
    "cloud.log_scales": "scales",
    "cloud.opacity_logits": "opacity",
    "cloud.sh_coeffs": "sh",
}


@dataclass
class RenderContext:
    t: float
    color_time: float | None
    out: RenderOutput
    deformed: GaussianCloud
    feats_planes: list
    color_planes: list | None
    deform_cache: dict | None
    color_cache: dict | None
    dirs_raw: np.ndarray
    rgb_sh: np.ndarray
    color_mask: np.ndarray

    @property
    def image(self) -> np.ndarray:
        return self.out.image


class DynamicModel:
    def __init__(self, cloud: GaussianCloud, grid: HexPlaneGrid, decoder: DeformDecoder,
                 color_head: ColorHead | None = None, settings: RenderSettings = RenderSettings(),
                 meta: dict | None = None):
        self.cloud = cloud
        self.grid = grid
        self.decoder = decoder
        self.color_head = color_head
        self.settings = settings
        # free-form JSON-serialisable info stored with checkpoints (cameras, config)
        self.meta = dict(meta or {})

    @classmethod
    def create(cls, cloud: GaussianCloud, bounds_min, bounds_max, *, levels=((32, 12), (64, 25)),
               features: int = 16, deform_hidden: int = 64, deform_layers: int = 2,
               color_hidden: int = 64, color_layers: int = 1, color_head: bool = True,
               settings: RenderSettings = RenderSettings(), rng=None) -> "DynamicModel":
        rng = np.random.default_rng(rng)
        dtype = cloud.dtype
        grid = HexPlaneGrid.create(bounds_min, bounds_max, levels, features, rng=rng, dtype=dtype)
        decoder = DeformDecoder.create(grid.out_dim, deform_hidden, deform_layers, rng=rng, dtype=dtype)
        head = ColorHead.create(grid.out_dim, color_hidden, color_layers, rng=rng, dtype=dtype) if color_head else None
        return cls(cloud, grid, decoder, head, settings)

    @property
    def dtype(self):
        return self.cloud.dtype

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every optimisable array, keyed by name."""
        out = {f"cloud.{k}": v for k, v in self.cloud.params().items()}
        out.update({f"hex.{k}": v for k, v in self.grid.params().items()})
        out.update(self.decoder.mlp.params("deform"))
        if self.color_head is not None:
            out.update(self.color_head.mlp.params("color"))
        return out

    @staticmethod
    def group_of(name: str) -> str:
        if name in CLOUD_GROUPS:
            return CLOUD_GROUPS[name]
        return name.split(".", 1)[0]

    def astype(self, dtype) -> "DynamicModel":
        return DynamicModel(self.cloud.astype(dtype), self.grid.astype(dtype),
                            DeformDecoder(self.decoder.mlp.astype(dtype)),
                            ColorHead(self.color_head.mlp.astype(dtype)) if self.color_head else None,
                            self.settings, self.meta)

    def copy(self) -> "DynamicModel":
        return DynamicModel(self.cloud.copy(), self.grid.copy(), DeformDecoder(self.decoder.mlp.copy()),
                            ColorHead(self.color_head.mlp.copy()) if self.color_head else None,
                            self.settings, self.meta)

    def features(self, t: float) -> np.ndarray:
        return self.grid.query(self.cloud.positions, t)

    def deformed_cloud(self, t: float) -> GaussianCloud:
        return self.decoder.forward(self.cloud, self.features(t))[0]

    def render(self, t: float, pose: CameraPose, intr: CameraIntrinsics, *,
               color_time: float | None = None, deformation: bool = True,
               settings: RenderSettings | None = None) -> RenderContext:
        """Render at timestamp ``t``; ``color_time`` pins the colour features to another time."""
        cloud = self.cloud
        planes = self.grid.query_planes(cloud.positions, t)
        feats = np.concatenate([np.prod(v, axis=0) for v in planes], axis=1)
        if deformation:
            deformed, dcache = self.decoder.forward(cloud, feats)
        else:
            deformed, dcache = cloud, None
        dirs_raw = pose.center.astype(cloud.dtype) - deformed.positions
        dirs = normalize_quats(dirs_raw)
        rgb = sh_colors(cloud.sh_coeffs, dirs)
        cplanes = None
        ccache = None
        if self.color_head is not None:
            if color_time is None:
                cfeats = feats
            else:
                cplanes = self.grid.query_planes(cloud.positions, color_time)
                cfeats = np.concatenate([np.prod(v, axis=0) for v in cplanes], axis=1)
            colors, ccache = self.color_head.forward(rgb, cfeats)
        else:
            colors = rgb
        mask = (colors > 0.0) & (colors < 1.0)
        out = render(deformed, np.clip(colors, 0.0, 1.0), pose, intr, settings or self.settings)
        return RenderContext(t, color_time, out, deformed, planes, cplanes, dcache, ccache,
                             dirs_raw, rgb, mask)

    def render_canonical(self, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
        return render(self.cloud, self.cloud.colors(pose.center), pose, intr, self.settings).image

    def color_penalty(self, ctx: RenderContext, weight: float) -> float:
        """Identity prior on the colour transform; 0 without a colour head."""
        if self.color_head is None or weight == 0.0:
            return 0.0
        return self.color_head.identity_penalty(ctx.color_cache, weight)[0]

    def backward(self, ctx: RenderContext, d_image: np.ndarray, color_reg: float = 0.0) -> dict[str, np.ndarray]:
        """Gradients of every parameter for ``dL/dimage`` plus ``color_reg`` times the colour
        identity prior; also returns ``means2d`` stats."""
        cloud = self.cloud
        g = render_backward(ctx.out, d_image)
        d_c = g["colors"] * ctx.color_mask
        grads: dict[str, np.ndarray] = {}
        d_feat_color = None
        if self.color_head is not None:
            extra = None
            if color_reg != 0.0:
                extra = self.color_head.identity_penalty(ctx.color_cache, color_reg)[1].astype(d_c.dtype)
            hb = self.color_head.backward(ctx.color_cache, d_c, extra)
            d_rgb = hb["rgb"]
            d_feat_color = hb["features"]
            grads.update(self.color_head.mlp.grads_dict("color", *hb["mlp"]))
        else:
            d_rgb = d_c
        dirs = normalize_quats(ctx.dirs_raw)
        d_sh, d_dirs = sh_colors_backward(cloud.sh_coeffs, dirs, d_rgb)
        d_pos_t = g["positions"] - normalize_backward(ctx.dirs_raw, d_dirs)

        d_feat = np.zeros((len(cloud), self.grid.out_dim), dtype=cloud.dtype)
        if ctx.deform_cache is not None:
            db = self.decoder.backward(ctx.deform_cache, d_pos_t, g["rotations"], g["log_scales"])
            grads.update(self.decoder.mlp.grads_dict("deform", *db["mlp"]))
            d_pos, d_rot, d_ls = db["positions"], db["rotations"], db["log_scales"]
            d_feat += db["features"]
        else:
            d_pos, d_rot, d_ls = d_pos_t, g["rotations"], g["log_scales"]
            for i, (w, b) in enumerate(zip(self.decoder.mlp.weights, self.decoder.mlp.biases)):
                grads[f"deform.w{i}"] = np.zeros_like(w)
                grads[f"deform.b{i}"] = np.zeros_like(b)

        if d_feat_color is not None and ctx.color_time is None:
            d_feat = d_feat + d_feat_color
        hex_grads, d_xyz = self.grid.query_backward(cloud.positions, ctx.t, d_feat, ctx.feats_planes)
        if d_feat_color is not None and ctx.color_time is not None:
            extra, d_xyz2 = self.grid.query_backward(cloud.positions, ctx.color_time, d_feat_color,
                                                     ctx.color_planes)
            hex_grads = [[a + b for a, b in zip(la, lb)] for la, lb in zip(hex_grads, extra)]
            if d_xyz is not None:
                d_xyz = d_xyz + d_xyz2
        if d_xyz is not None:
            d_pos = d_pos + d_xyz.astype(d_pos.dtype)
        for lv, level in enumerate(hex_grads):
            for i, gp in enumerate(level):
                grads[f"hex.plane_{lv}_{i}"] = gp

        grads["cloud.positions"] = d_pos
        grads["cloud.rotations"] = d_rot
        grads["cloud.log_scales"] = d_ls
        grads["cloud.opacity_logits"] = g["opacity_logits"]
        grads["cloud.sh_coeffs"] = d_sh
        grads["means2d"] = g["means2d"]
        return grads

    def save(self, path) -> None:
        meta = {
            "color_head": self.color_head is not None,
            "settings": {
                "background": list(self.settings.background),
                "sigma_cutoff": self.settings.sigma_cutoff,
                "near_plane": self.settings.near_plane,
                "alpha_min": self.settings.alpha_min,
                "cov2d_floor": self.settings.cov2d_floor,
            },
            "extra": self.meta,
        }
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MODEL_MAGIC)
            f.write(struct.pack("<II", MODEL_VERSION, len(blob)))
            f.write(blob)
            write_cloud(f, self.cloud)
            self.grid.write(f)
            self.decoder.mlp.write(f)
            if self.color_head is not None:
                self.color_head.mlp.write(f)

    @classmethod
    def load(cls, path) -> "DynamicModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with open(path, "rb") as f:
            if f.read(4) != MODEL_MAGIC:
                raise ValueError(f"{path} is not a model checkpoint")
            version, n = struct.unpack("<II", f.read(8))
            if version != MODEL_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            meta = json.loads(f.read(n).decode("utf-8"))
            cloud = read_cloud(f)
            grid = HexPlaneGrid.read(f)
            decoder = DeformDecoder(MLP.read(f))
            head = ColorHead(MLP.read(f)) if meta["color_head"] else None
        s = meta["settings"]
        settings = RenderSettings(tuple(s["background"]), s["sigma_cutoff"], s["near_plane"], s["alpha_min"],
                                  s.get("cov2d_floor", COV2D_FLOOR))
        return cls(cloud, grid, decoder, head, settings, meta.get("extra", {}))

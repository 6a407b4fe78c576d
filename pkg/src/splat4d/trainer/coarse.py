"""Coarse reconstruction: multiscale-augmented training with densification."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..gaussians import GaussianCloud, init_cloud, quat_to_rotmat
from ..model import DynamicModel
from ..rasterizer import RenderSettings
from .config import TrainConfig
from .evaluate import TrainLog, frame_subset, mean_psnr
from .losses import area_downsample, l1_loss, psnr, ssim_with_grad
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def carve_points(dataset, n: int, rng, t_index: int = 0, min_fraction: float = 0.8,
                 threshold: float = 0.1) -> np.ndarray:
    """Random points inside the bounds that land on foreground pixels in most training views."""
    bmin, bmax = dataset.bounds
    views = dataset.train_views
    bg = np.asarray(dataset.background)
    masks = [np.abs(dataset.image(t_index, v) - bg).max(axis=2) > threshold for v in views]
    intr = dataset.intrinsics
    kept = []
    for _ in range(20):
        cand = rng.uniform(bmin, bmax, (20 * n, 3))
        hits = np.zeros(len(cand))
        for v, mask in zip(views, masks):
            pc = dataset.poses[v].world_to_camera(cand)
            z = np.maximum(pc[:, 2], 1e-6)
            u = np.floor(intr.focal_x * pc[:, 0] / z + intr.principal_x).astype(int)
            w = np.floor(intr.focal_y * pc[:, 1] / z + intr.principal_y).astype(int)
            ok = (pc[:, 2] > 0) & (u >= 0) & (u < intr.width) & (w >= 0) & (w < intr.height)
            hits[ok] += mask[w[ok], u[ok]]
        kept.append(cand[hits >= min_fraction * len(views)])
        if sum(len(k) for k in kept) >= n:
            break
    pts = np.concatenate(kept)[:n]
    if len(pts) < max(16, n // 10):
        log.warning("foreground carving kept %d points; falling back to uniform sampling", len(pts))
        return rng.uniform(bmin, bmax, (n, 3))
    return pts


def init_model(dataset, config: TrainConfig, rng=None) -> DynamicModel:
    """Canonical cloud from carved random points, scales from 3-NN distances."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    pts = carve_points(dataset, config.n_init_points, rng)
    k = min(4, len(pts))
    dist, _ = cKDTree(pts).query(pts, k=k)
    nn = dist[:, 1:].mean(axis=1) if k > 1 else np.full(len(pts), 0.02)
    cloud = init_cloud(pts, base_color=(0.5, 0.5, 0.5), sh_degree=config.sh_degree)
    cloud.log_scales[:] = np.log(np.clip(nn, 1e-3, 0.1))[:, None].astype(cloud.dtype)
    settings = RenderSettings(background=tuple(dataset.background))
    return DynamicModel.create(cloud, dataset.bounds[0], dataset.bounds[1], color_head=config.color_head,
                               settings=settings, rng=rng)


def scene_extent(model: DynamicModel) -> float:
    return float(np.linalg.norm(model.grid.bounds_max - model.grid.bounds_min) / 2.0)


def densify_and_prune(cloud: GaussianCloud, grad_avg: np.ndarray, config: TrainConfig, extent: float,
                      rng) -> tuple[GaussianCloud, np.ndarray]:
    """Clone small / split large high-gradient Gaussians, then drop transparent ones.

    Returns the new cloud and, per new row, the source row whose optimiser
    state carries over (-1 for freshly created rows).
    """
    n = len(cloud)
    selected = grad_avg >= config.densify_grad
    room = max(config.max_gaussians - n, 0)
    if selected.sum() > room:
        order = np.argsort(-grad_avg, kind="stable")
        keep = np.zeros(n, dtype=bool)
        keep[order[:room]] = True
        selected &= keep
    big = cloud.scales.max(axis=1) > config.percent_dense * extent
    clone = np.nonzero(selected & ~big)[0]
    split = np.nonzero(selected & big)[0]

    p = cloud.params()
    parts = {k: [v[~np.isin(np.arange(n), split)]] for k, v in p.items()}
    src = [np.nonzero(~np.isin(np.arange(n), split))[0]]
    if len(clone):
        for k, v in p.items():
            parts[k].append(v[clone])
        src.append(np.full(len(clone), -1))
    if len(split):
        rot = quat_to_rotmat(cloud.rotations[split].astype(np.float64))
        for _ in range(2):
            offs = rng.normal(size=(len(split), 3)) * cloud.scales[split]
            new_pos = cloud.positions[split] + np.einsum("nij,nj->ni", rot, offs)
            parts["positions"].append(new_pos.astype(cloud.dtype))
            parts["log_scales"].append((cloud.log_scales[split] - math.log(1.6)).astype(cloud.dtype))
            for k in ("rotations", "opacity_logits", "sh_coeffs"):
                parts[k].append(p[k][split])
            src.append(np.full(len(split), -1))
    new = GaussianCloud(**{k: np.concatenate(v) for k, v in parts.items()})
    src = np.concatenate(src)
    alive = new.opacities >= config.prune_opacity
    if alive.sum() == 0:
        alive[np.argmax(new.opacities)] = True
    return new.subset(alive), src[alive]


def _rebind(opt: Adam, model: DynamicModel, src: np.ndarray) -> None:
    params = model.params()
    keep = {k: src for k in params if k.startswith("cloud.")}
    opt.rebind(params, keep)


def _diagnostic(it, grads, model) -> str:
    norms = {}
    for name, g in grads.items():
        if name == "means2d":
            continue
        group = model.group_of(name)
        norms[group] = norms.get(group, 0.0) + float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return json.dumps({"iteration": it, "grad_norms": {k: math.sqrt(v) for k, v in sorted(norms.items())}})


def sample_scale(rng, config: TrainConfig, width: int, height: int) -> tuple[int, int]:
    """Random downscale ratio snapped to a resolution divisible by 4."""
    rho = rng.uniform(config.r_min, config.r_max)
    w = max(4, int(round(width * rho / 4.0)) * 4)
    h = max(4, int(round(height * rho / 4.0)) * 4)
    return min(w, width), min(h, height)


def scaled_settings(settings: RenderSettings, ratio: float) -> RenderSettings:
    """Settings for rendering at ``ratio`` of full resolution against area-downsampled targets.

    A target pixel averages a ``1/ratio`` block of full-res pixels that each
    carry the full-res floor, so the low-res footprint variance is
    ``floor * ratio^2`` plus the discrete box variance ``(1 - ratio^2) / 12``.
    """
    floor = settings.cov2d_floor * ratio ** 2 + (1.0 - ratio ** 2) / 12.0
    return dataclasses.replace(settings, cov2d_floor=floor)


def coarse_train(dataset, model: DynamicModel | None = None, config: TrainConfig | None = None,
                 log_path=None, dump_dir=None) -> tuple[DynamicModel, TrainLog]:
    """Fit the model to the dataset's training views; returns the model and its metric log."""
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(dataset, config, rng)
    opt = Adam(model.params(), config.lrs, model.group_of, config.coarse_iters, config.lr_final_ratio)
    keys = dataset.train_keys()
    if not keys:
        raise ValueError("dataset has no training views")
    extent = scene_extent(model)
    full = dataset.intrinsics
    ev_frames = frame_subset(dataset.n_frames, config.eval_frames)
    test_keys = [(t, v) for t in ev_frames for v in dataset.held_out]
    train_views = dataset.train_views
    train_eval = [(t, train_views[(i * 7) % len(train_views)]) for i, t in enumerate(ev_frames)]
    train_eval += [(t, train_views[(i * 7 + 3) % len(train_views)]) for i, t in enumerate(ev_frames)]
    grad_acc = np.zeros(len(model.cloud))
    grad_cnt = np.zeros(len(model.cloud))
    tlog = TrainLog()

    for it in range(1, config.coarse_iters + 1):
        ti, v = keys[int(rng.integers(len(keys)))]
        gt = dataset.image(ti, v)
        intr = full
        settings = None
        if config.multiscale:
            w, h = sample_scale(rng, config, full.width, full.height)
            if (w, h) != (full.width, full.height):
                intr = full.resized(w, h)
                gt = area_downsample(gt, h, w)
                settings = scaled_settings(model.settings, w / full.width)
        ctx = model.render(dataset.times[ti], dataset.poses[v], intr,
                           deformation=it > config.static_iters, settings=settings)
        l1, g1 = l1_loss(ctx.image, gt)
        if config.ssim_weight > 0:
            s, gs = ssim_with_grad(ctx.image, gt)
            loss = l1 + config.ssim_weight * (1.0 - s)
            d_img = g1 - config.ssim_weight * gs
        else:
            loss, d_img = l1, g1
        if config.color_reg > 0 and it > config.static_iters:
            loss += model.color_penalty(ctx, config.color_reg)
        grads = model.backward(ctx, d_img.astype(ctx.image.dtype),
                               color_reg=config.color_reg if it > config.static_iters else 0.0)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            msg = _diagnostic(it, grads, model)
            if dump_dir is not None:
                Path(dump_dir).mkdir(parents=True, exist_ok=True)
                (Path(dump_dir) / "diagnostic.json").write_text(msg + "\n")
            raise TrainingError(f"non-finite loss or gradient: {msg}")
        if it <= config.static_iters:
            grads = {k: g for k, g in grads.items() if not k.startswith(("hex.", "deform.", "color."))}

        if config.densify and it <= config.densify_until:
            vis = ctx.out.aux["proj"].visible
            g2 = grads["means2d"] * np.array([intr.width / 2.0, intr.height / 2.0])
            grad_acc[vis] += np.linalg.norm(g2[vis], axis=1)
            grad_cnt[vis] += 1

        opt.step(grads)

        if (config.densify and config.densify_from <= it <= config.densify_until
                and it % config.densify_interval == 0):
            avg = grad_acc / np.maximum(grad_cnt, 1)
            model.cloud, src = densify_and_prune(model.cloud, avg, config, extent, rng)
            _rebind(opt, model, src)
            grad_acc = np.zeros(len(model.cloud))
            grad_cnt = np.zeros(len(model.cloud))

        if config.eval_every and (it % config.eval_every == 0 or it == config.coarse_iters):
            tr = mean_psnr(model, dataset, train_eval, reference="frames")
            te = mean_psnr(model, dataset, test_keys, reference="clean")
            tlog.add(it, tr, te, len(model.cloud))
            log.info("iter %d train %.3f test %.3f n %d", it, tr, te, len(model.cloud))
    if log_path is not None:
        tlog.write_csv(log_path)
    return model, tlog


def train_psnr_full(model: DynamicModel, dataset) -> float:
    """Mean PSNR over every training image at full resolution."""
    vals = [psnr(model.render(dataset.times[t], dataset.poses[v], dataset.intrinsics).image, dataset.image(t, v))
            for t, v in dataset.train_keys()]
    return float(np.mean(vals))

"""One-pass refinement: cached refiner targets and the view-weighted loss."""
from __future__ import annotations

import logging
import math
import threading
from typing import Callable, Protocol

import numpy as np
from scipy.ndimage import gaussian_filter

from ..camera import CameraPose, OrbitRig, normalized_center_distance
from .config import TrainConfig
from .evaluate import TrainLog, frame_subset, mean_psnr
from .losses import GradientMagnitudeLoss, l1_loss, psnr
from .optim import Adam

log = logging.getLogger(__name__)


class Refiner(Protocol):
    def refine(self, image: np.ndarray, strength: float, key=None) -> np.ndarray: ...


class IdentityRefiner:
    name = "identity"

    def refine(self, image, strength, key=None):
        return np.array(image, copy=True)


class OracleRefiner:
    """Returns the clean ground truth for ``key = (t, view)``; for tests only."""

    name = "oracle"

    def __init__(self, lookup: Callable[[int, int], np.ndarray]):
        self.lookup = lookup

    def refine(self, image, strength, key=None):
        if key is None:
            raise ValueError("oracle refiner needs the (t, view) key")
        target = np.asarray(self.lookup(*key), dtype=image.dtype)
        if target.shape != image.shape:
            raise ValueError(f"oracle target shape {target.shape} differs from render {image.shape}")
        return target.copy()


class BlurSharpenRefiner:
    """Deterministic local filter: denoise with a small blur, then unsharp-mask.

    ``strength`` in [0, 1] blends between the input (0) and the filtered image (1).
    """

    name = "blursharpen"

    def __init__(self, blur_sigma: float = 1.0, sharpen_sigma: float = 1.5, amount: float = 0.6):
        self.blur_sigma = blur_sigma
        self.sharpen_sigma = sharpen_sigma
        self.amount = amount

    def refine(self, image, strength, key=None):
        img = np.asarray(image, dtype=np.float64)
        blurred = gaussian_filter(img, (self.blur_sigma, self.blur_sigma, 0))
        soft = gaussian_filter(blurred, (self.sharpen_sigma, self.sharpen_sigma, 0))
        filtered = blurred + self.amount * (blurred - soft)
        out = (1.0 - strength) * img + strength * filtered
        return np.clip(out, 0.0, 1.0).astype(image.dtype)


def make_refiner(name: str, dataset=None) -> Refiner:
    if name == "identity":
        return IdentityRefiner()
    if name == "blursharpen":
        return BlurSharpenRefiner()
    if name == "oracle":
        if dataset is None:
            raise ValueError("oracle refiner needs a dataset with clean images")
        return OracleRefiner(dataset.clean)
    raise ValueError(f"unknown refiner {name!r}; expected identity, oracle or blursharpen")


class RefineCache:
    """Write-once map from ``(t, view)`` to a refined target image."""

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key):
        return self._store.get(key)

    def put(self, key, image: np.ndarray) -> np.ndarray:
        with self._lock:
            if key in self._store:
                raise KeyError(f"refine target for {key} already stored")
            frozen = np.array(image, copy=True)
            frozen.setflags(write=False)
            self._store[key] = frozen
        return frozen

    def get_or_create(self, key, make: Callable[[], np.ndarray]) -> np.ndarray:
        hit = self._store.get(key)
        if hit is not None:
            return hit
        return self.put(key, make())


def view_weight(p: CameraPose, ref: CameraPose, rig: OrbitRig, half_period: bool = False) -> float:
    """``sin(pi d)`` of the normalised center distance; ``half_period`` uses ``sin(pi d / 2)``."""
    d = normalized_center_distance(p, ref, rig)
    w = math.sin(math.pi * d / 2.0) if half_period else math.sin(math.pi * d)
    return min(max(w, 0.0), 1.0)


def _valid_target(img, shape) -> bool:
    return img is not None and img.shape == shape and bool(np.all(np.isfinite(img))) \
        and float(img.min()) >= 0.0 and float(img.max()) <= 1.0


def refine_train(dataset, model, refiner: Refiner, config=None, strength: float = 0.167,
                 perceptual=None, cache: RefineCache | None = None, log_path=None):
    """Fine-tune the deformation field (and colour head) against one-pass refined targets.

    Canonical Gaussians get a zero learning rate. Each ``(t, view)`` is
    rendered and refined on its first visit only; later visits reuse the
    cached target. Returns ``(model, log, cache)``.
    """
    config = config or TrainConfig()
    perceptual = perceptual or GradientMagnitudeLoss()
    cache = RefineCache() if cache is None else cache
    rng = np.random.default_rng(config.seed + 1)
    lrs = {g: 0.0 for g in ("positions", "rotations", "scales", "opacity", "sh")}
    lrs["hex"] = config.refine_lr
    lrs["deform"] = config.refine_lr
    lrs["color"] = config.refine_lr if config.refine_color_head else 0.0
    opt = Adam(model.params(), lrs, model.group_of, config.refine_iters, config.refine_final_ratio)
    ref_pose = dataset.poses[0]
    weights = {v: view_weight(dataset.poses[v], ref_pose, dataset.rig, config.half_period_weight)
               for v in range(dataset.n_views)}
    keys = dataset.train_keys()
    excluded: set = set()
    ev_frames = frame_subset(dataset.n_frames, config.eval_frames)
    test_keys = [(t, v) for t in ev_frames for v in dataset.held_out]
    tlog = TrainLog()
    intr = dataset.intrinsics
    recent: list = []

    for it in range(1, config.refine_iters + 1):
        key = keys[int(rng.integers(len(keys)))]
        grads: dict = {}
        if key not in excluded:
            t, v = key
            ctx = model.render(dataset.times[t], dataset.poses[v], intr)
            target = cache.get(key)
            if target is None:
                try:
                    refined = refiner.refine(ctx.image, strength, key=key)
                except Exception as exc:  # a broken key must not stop training
                    refined = None
                    log.warning("refiner failed for %s (%s); excluding it", key, exc)
                if not _valid_target(refined, ctx.image.shape):
                    if refined is not None:
                        log.warning("refiner output for %s is invalid; excluding it", key)
                    excluded.add(key)
                else:
                    target = cache.put(key, refined.astype(ctx.image.dtype))
            if target is not None:
                recent.append(psnr(ctx.image, target))
            w = weights[v]
            if target is not None and w > 0.0:
                l1, g1 = l1_loss(ctx.image, target)
                lp, gp = perceptual(ctx.image, target)
                loss = w * (l1 + config.lambda_perceptual * lp)
                if loss > 0.0:
                    d_img = (w * (g1 + config.lambda_perceptual * gp)).astype(ctx.image.dtype)
                    grads = model.backward(ctx, d_img)
        opt.step(grads)
        if config.eval_every and (it % config.eval_every == 0 or it == config.refine_iters):
            te = mean_psnr(model, dataset, test_keys, reference="clean")
            tr = float(np.mean(recent)) if recent else float("nan")
            tlog.add(it, tr, te, len(model.cloud))
            recent = []
    if log_path is not None:
        tlog.write_csv(log_path)
    return model, tlog, cache

"""Held-out evaluation and metric logs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import psnr, ssim

LOG_COLUMNS = ("iteration", "train_psnr", "test_psnr", "n_gaussians")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, iteration: int, train_psnr: float, test_psnr: float, n_gaussians: int) -> None:
        self.rows.append((int(iteration), float(train_psnr), float(test_psnr), int(n_gaussians)))

    @property
    def last(self):
        return self.rows[-1] if self.rows else None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOG_COLUMNS)
            for it, tr, te, n in self.rows:
                w.writerow([it, f"{tr:.6f}", f"{te:.6f}", n])


def frame_subset(n_frames: int, count: int) -> list[int]:
    if count <= 0 or count >= n_frames:
        return list(range(n_frames))
    return sorted({int(round(x)) for x in np.linspace(0, n_frames - 1, count)})


def _reference(dataset, t, v, reference):
    return dataset.clean(t, v) if reference == "clean" else dataset.image(t, v)


def mean_psnr(model, dataset, keys, reference: str = "clean", color_time=None) -> float:
    vals = []
    for t, v in keys:
        img = model.render(dataset.times[t], dataset.poses[v], dataset.intrinsics, color_time=color_time).image
        vals.append(psnr(img, _reference(dataset, t, v, reference)))
    return float(np.mean(vals)) if vals else float("nan")


def per_view_metrics(model, dataset, views=None, ref_time: float | None = None,
                     reference: str = "clean") -> list[dict]:
    """PSNR and SSIM per held-out view, averaged over all timestamps.

    ``ref_time`` pins the colour features to that time (colour-head models only).
    """
    views = dataset.held_out if views is None else views
    color_time = ref_time if model.color_head is not None else None
    rows = []
    for v in views:
        ps, ss = [], []
        for t in range(dataset.n_frames):
            img = model.render(dataset.times[t], dataset.poses[v], dataset.intrinsics, color_time=color_time).image
            ref = _reference(dataset, t, v, reference)
            ps.append(psnr(img, ref))
            ss.append(ssim(img, ref))
        rows.append({"view": v, "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))})
    return rows


def write_eval_csv(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])


def color_drift(model, dataset, view: int, ref_time: float = 0.0) -> list[float]:
    """Per-frame max channel shift of the coverage-weighted mean colour relative to frame 0.

    Renders use colour features pinned at ``ref_time`` when the model has a colour head.
    """
    color_time = ref_time if model.color_head is not None else None
    means = []
    for t in range(dataset.n_frames):
        out = model.render(dataset.times[t], dataset.poses[view], dataset.intrinsics, color_time=color_time).out
        a = out.alpha_map[..., None].astype(np.float64)
        bg = np.asarray(dataset.background)
        fg = out.image - (1.0 - a) * bg
        means.append(fg.reshape(-1, 3).sum(0) / max(a.sum(), 1e-12))
    means = np.asarray(means)
    return [float(np.max(np.abs(m - means[0]))) for m in means]

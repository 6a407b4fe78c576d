"""Differentiable splatting renderer: EWA projection, depth-sorted compositing, adjoints."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ..camera import CameraIntrinsics, CameraPose
from ..gaussians import GaussianCloud, covariances, covariances_backward
from . import _kernels

COV2D_FLOOR = 0.3


@dataclass(frozen=True)
class RenderSettings:
    background: tuple = (1.0, 1.0, 1.0)
    sigma_cutoff: float = 3.0
    near_plane: float = 0.01
    alpha_min: float = 1.0 / 255.0
    cov2d_floor: float = COV2D_FLOOR

    def __post_init__(self):
        if self.cov2d_floor < 0:
            raise ValueError("cov2d_floor must be non-negative")
        if self.sigma_cutoff <= 0:
            raise ValueError("sigma_cutoff must be positive")
        if not 0.0 <= self.alpha_min <= 0.01:
            raise ValueError("alpha_min must lie in [0, 0.01]")


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities (all N rows, culled ones flagged)."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    cam_points: np.ndarray
    jacobians: np.ndarray
    cam_cov: np.ndarray
    bbox: np.ndarray
    visible: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray
    alpha_map: np.ndarray
    final_transmittance: np.ndarray
    n_contrib: np.ndarray
    row_offsets: np.ndarray
    row_ids: np.ndarray
    # forward state consumed by render_backward
    aux: dict = field(repr=False, default_factory=dict)


def project_gaussians(positions, rotations, log_scales, pose: CameraPose,
                      intr: CameraIntrinsics, settings: RenderSettings) -> Projection:
    dtype = positions.dtype
    rot_w2c = pose.rotation.astype(dtype)
    pc = (positions - pose.center.astype(dtype)) @ rot_w2c.T
    z_raw = pc[:, 2]
    in_front = z_raw > settings.near_plane
    z = np.where(in_front, z_raw, 1.0).astype(dtype)
    x, y = pc[:, 0], pc[:, 1]
    fx, fy = intr.focal_x, intr.focal_y
    means2d = np.stack([fx * x / z + intr.principal_x, fy * y / z + intr.principal_y], axis=1)

    n = positions.shape[0]
    jac = np.zeros((n, 2, 3), dtype=dtype)
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / (z * z)
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / (z * z)

    cov3 = covariances(rotations, log_scales)
    cam_cov = rot_w2c @ cov3 @ rot_w2c.T
    cov2d = jac @ cam_cov @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += settings.cov2d_floor
    cov2d[:, 1, 1] += settings.cov2d_floor
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = settings.sigma_cutoff * np.sqrt(lam)
    with np.errstate(invalid="ignore"):
        bbox = np.stack([
            np.ceil(means2d[:, 0] - radius - 0.5), np.floor(means2d[:, 0] + radius - 0.5),
            np.ceil(means2d[:, 1] - radius - 0.5), np.floor(means2d[:, 1] + radius - 0.5),
        ], axis=1)
    finite = np.isfinite(bbox).all(axis=1) & np.isfinite(conics).all(axis=1) & (det > 0)
    bbox = np.where(finite[:, None], bbox, -1.0)
    bbox[:, 0] = np.clip(bbox[:, 0], 0, intr.width)
    bbox[:, 1] = np.clip(bbox[:, 1], -1, intr.width - 1)
    bbox[:, 2] = np.clip(bbox[:, 2], 0, intr.height)
    bbox[:, 3] = np.clip(bbox[:, 3], -1, intr.height - 1)
    bbox = bbox.astype(np.int64)
    visible = in_front & finite & (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    return Projection(means2d, cov2d, conics, z_raw, pc, jac, cam_cov, bbox, visible)


def project_backward(proj: Projection, rotations, log_scales, pose: CameraPose,
                     intr: CameraIntrinsics, d_means2d, d_conics):
    """Chain screen-space gradients back to positions, quaternions and log-scales."""
    conic = proj.conics
    ma = np.empty(conic.shape[:1] + (2, 2), dtype=conic.dtype)
    ma[:, 0, 0] = conic[:, 0]
    ma[:, 0, 1] = ma[:, 1, 0] = conic[:, 1]
    ma[:, 1, 1] = conic[:, 2]
    gm = np.empty_like(ma)
    gm[:, 0, 0] = d_conics[:, 0]
    gm[:, 0, 1] = gm[:, 1, 0] = 0.5 * d_conics[:, 1]
    gm[:, 1, 1] = d_conics[:, 2]
    # d(M^-1) = -M^-1 dM M^-1; symmetric parametrisation of cov2d
    d_cov2 = -ma @ gm @ ma
    d_cov2 = 0.5 * (d_cov2 + d_cov2.transpose(0, 2, 1))

    jac = proj.jacobians
    d_cam_cov = jac.transpose(0, 2, 1) @ d_cov2 @ jac
    d_jac = 2.0 * d_cov2 @ jac @ proj.cam_cov

    rot_w2c = pose.rotation.astype(conic.dtype)
    d_cov3 = rot_w2c.T @ d_cam_cov @ rot_w2c

    x, y = proj.cam_points[:, 0], proj.cam_points[:, 1]
    z = np.where(proj.visible, proj.cam_points[:, 2], 1.0)
    fx, fy = intr.focal_x, intr.focal_y
    d_pc = np.zeros_like(proj.cam_points)
    z2 = z * z
    z3 = z2 * z
    d_pc[:, 0] = d_jac[:, 0, 2] * (-fx / z2) + d_means2d[:, 0] * fx / z
    d_pc[:, 1] = d_jac[:, 1, 2] * (-fy / z2) + d_means2d[:, 1] * fy / z
    d_pc[:, 2] = (d_jac[:, 0, 0] * (-fx / z2) + d_jac[:, 0, 2] * (2 * fx * x / z3)
                  + d_jac[:, 1, 1] * (-fy / z2) + d_jac[:, 1, 2] * (2 * fy * y / z3)
                  - d_means2d[:, 0] * fx * x / z2 - d_means2d[:, 1] * fy * y / z2)
    d_pos = d_pc @ rot_w2c
    d_rot, d_ls = covariances_backward(rotations, log_scales, d_cov3)
    mask = proj.visible[:, None]
    return np.where(mask, d_pos, 0.0), np.where(mask, d_rot, 0.0), np.where(mask, d_ls, 0.0)


def _depth_order(proj: Projection) -> np.ndarray:
    idx = np.flatnonzero(proj.visible)
    # ties broken by storage index
    return idx[np.lexsort((idx, proj.depths[idx]))]


def render(cloud: GaussianCloud, colors: np.ndarray, pose: CameraPose,
           intr: CameraIntrinsics, settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Alpha-composite the cloud front to back with per-Gaussian ``colors`` (N, 3)."""
    dtype = cloud.dtype
    n = len(cloud)
    if colors.shape != (n, 3):
        raise ValueError(f"colors must have shape ({n}, 3)")
    proj = project_gaussians(cloud.positions, cloud.rotations, cloud.log_scales, pose, intr, settings)
    order = _depth_order(proj)
    offsets, ids = _kernels.build_row_lists(order, proj.bbox[:, 2], proj.bbox[:, 3], intr.height)
    opac = cloud.opacities.astype(dtype)
    colors = np.ascontiguousarray(colors, dtype=dtype)
    means = np.ascontiguousarray(proj.means2d, dtype=dtype)
    conics = np.ascontiguousarray(proj.conics, dtype=dtype)
    bg = np.asarray(settings.background, dtype=dtype)
    image = np.empty((intr.height, intr.width, 3), dtype=dtype)
    alpha_map = np.empty((intr.height, intr.width), dtype=dtype)
    final_t = np.empty((intr.height, intr.width), dtype=dtype)
    n_contrib = np.empty((intr.height, intr.width), dtype=np.int64)
    xmin = np.ascontiguousarray(proj.bbox[:, 0])
    xmax = np.ascontiguousarray(proj.bbox[:, 1])
    cutoff_sq = settings.sigma_cutoff ** 2
    _kernels.composite_forward(offsets, ids, means, conics, opac, colors, xmin, xmax, bg,
                               cutoff_sq, settings.alpha_min, image, alpha_map, final_t, n_contrib)
    aux = dict(cloud=cloud, colors=colors, pose=pose, intr=intr, settings=settings, proj=proj,
               opac=opac, means=means, conics=conics, bg=bg, xmin=xmin, xmax=xmax)
    return RenderOutput(image, alpha_map, final_t, n_contrib, offsets, ids, aux)


def render_backward(out: RenderOutput, d_image: np.ndarray, n_blocks: int | None = None) -> dict:
    """Gradients of a scalar loss given ``d_image = dL/dimage``.

    Returns arrays for ``positions``, ``rotations``, ``log_scales``,
    ``opacity_logits``, ``colors`` and the screen-space ``means2d``.
    """
    aux = out.aux
    if not aux or d_image.shape != out.image.shape:
        raise ValueError("render_backward needs the forward output of a matching render call")
    cloud = aux["cloud"]
    dtype = cloud.dtype
    n = len(cloud)
    if n_blocks is None:
        n_blocks = numba.get_num_threads()
    n_blocks = max(1, min(int(n_blocks), out.image.shape[0]))
    g_means = np.zeros((n_blocks, n, 2), dtype=dtype)
    g_conics = np.zeros((n_blocks, n, 3), dtype=dtype)
    g_opac = np.zeros((n_blocks, n), dtype=dtype)
    g_colors = np.zeros((n_blocks, n, 3), dtype=dtype)
    settings = aux["settings"]
    _kernels.composite_backward(
        out.row_offsets, out.row_ids, aux["means"], aux["conics"], aux["opac"], aux["colors"],
        aux["xmin"], aux["xmax"], aux["bg"], settings.sigma_cutoff ** 2, settings.alpha_min,
        out.final_transmittance, out.n_contrib, np.ascontiguousarray(d_image, dtype=dtype),
        g_means, g_conics, g_opac, g_colors)
    d_means = g_means.sum(axis=0)
    d_conics = g_conics.sum(axis=0)
    d_opac = g_opac.sum(axis=0)
    d_colors = g_colors.sum(axis=0)
    d_pos, d_rot, d_ls = project_backward(aux["proj"], cloud.rotations, cloud.log_scales,
                                          aux["pose"], aux["intr"], d_means, d_conics)
    opac = aux["opac"]
    return {
        "positions": d_pos,
        "rotations": d_rot,
        "log_scales": d_ls,
        "opacity_logits": d_opac * opac * (1.0 - opac),
        "colors": d_colors,
        "means2d": d_means,
    }

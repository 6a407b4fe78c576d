"""Canonical Gaussian cloud, spherical-harmonics color decoding and 3D covariances."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)
MAX_SH_DEGREE = 3

# Real SH basis as polynomials in the unit direction: (coefficient, (px, py, pz)).
_SH_TERMS = [
    [(SH_C0, (0, 0, 0))],
    [(-SH_C1, (0, 1, 0))],
    [(SH_C1, (0, 0, 1))],
    [(-SH_C1, (1, 0, 0))],
    [(SH_C2[0], (1, 1, 0))],
    [(SH_C2[1], (0, 1, 1))],
    [(2 * SH_C2[2], (0, 0, 2)), (-SH_C2[2], (2, 0, 0)), (-SH_C2[2], (0, 2, 0))],
    [(SH_C2[3], (1, 0, 1))],
    [(SH_C2[4], (2, 0, 0)), (-SH_C2[4], (0, 2, 0))],
    [(3 * SH_C3[0], (2, 1, 0)), (-SH_C3[0], (0, 3, 0))],
    [(SH_C3[1], (1, 1, 1))],
    [(4 * SH_C3[2], (0, 1, 2)), (-SH_C3[2], (2, 1, 0)), (-SH_C3[2], (0, 3, 0))],
    [(2 * SH_C3[3], (0, 0, 3)), (-3 * SH_C3[3], (2, 0, 1)), (-3 * SH_C3[3], (0, 2, 1))],
    [(4 * SH_C3[4], (1, 0, 2)), (-SH_C3[4], (3, 0, 0)), (-SH_C3[4], (1, 2, 0))],
    [(SH_C3[5], (2, 0, 1)), (-SH_C3[5], (0, 2, 1))],
    [(SH_C3[6], (3, 0, 0)), (-3 * SH_C3[6], (1, 2, 0))],
]

CKPT_MAGIC = b"GS4D"
CKPT_VERSION = 1


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int, with_grad: bool = False):
    """Evaluate the real SH basis at unit directions ``dirs`` (..., 3).

    Returns ``basis`` (..., K) and, when ``with_grad``, its derivative with
    respect to the direction components (..., K, 3).
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_SH_DEGREE}]")
    dirs = np.asarray(dirs)
    k = n_sh_coeffs(degree)
    pw = [[np.ones(dirs.shape[:-1], dtype=dirs.dtype)] for _ in range(3)]
    for axis in range(3):
        for _ in range(3):
            pw[axis].append(pw[axis][-1] * dirs[..., axis])
    basis = np.zeros(dirs.shape[:-1] + (k,), dtype=dirs.dtype)
    grad = np.zeros(dirs.shape[:-1] + (k, 3), dtype=dirs.dtype) if with_grad else None
    for j in range(k):
        for coef, (a, b, c) in _SH_TERMS[j]:
            basis[..., j] += coef * pw[0][a] * pw[1][b] * pw[2][c]
            if with_grad:
                if a:
                    grad[..., j, 0] += coef * a * pw[0][a - 1] * pw[1][b] * pw[2][c]
                if b:
                    grad[..., j, 1] += coef * b * pw[0][a] * pw[1][b - 1] * pw[2][c]
                if c:
                    grad[..., j, 2] += coef * c * pw[0][a] * pw[1][b] * pw[2][c - 1]
    return (basis, grad) if with_grad else basis


def sh_colors(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped colors for a batch: ``sum_j basis_j(dir) * sh[:, j, :] + 0.5``."""
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    basis = sh_basis(dirs, degree)
    return np.einsum("nk,nkc->nc", basis, sh) + 0.5


def sh_colors_backward(sh: np.ndarray, dirs: np.ndarray, d_rgb: np.ndarray):
    """Gradients of :func:`sh_colors` w.r.t. the coefficients and the directions."""
    degree = int(round(np.sqrt(sh.shape[1]))) - 1
    basis, dbasis = sh_basis(dirs, degree, with_grad=True)
    d_sh = basis[:, :, None] * d_rgb[:, None, :]
    d_dirs = np.einsum("nc,nkc,nkd->nd", d_rgb, sh, dbasis)
    return d_sh, d_dirs


def sh_to_rgb(h, gamma, degree: int, clamp: bool = True) -> np.ndarray:
    """Color of one Gaussian with coefficients ``h`` seen along unit direction ``gamma``.

    ``h`` may be flat with ``3 (degree + 1)^2`` entries (coefficient-major,
    rgb fastest) or shaped ``((degree + 1)^2, 3)``.
    """
    h = np.asarray(h, dtype=np.float64)
    k = n_sh_coeffs(degree)
    if h.size != 3 * k:
        raise ValueError(f"expected {3 * k} SH coefficients for degree {degree}, got {h.size}")
    rgb = sh_colors(h.reshape(1, k, 3), np.asarray(gamma, dtype=np.float64).reshape(1, 3))[0]
    return np.clip(rgb, 0.0, 1.0) if clamp else rgb


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (N, 3, 3) from unit quaternions (N, 4) in (w, x, y, z) order."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty(q.shape[:1] + (3, 3), dtype=q.dtype)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_backward(q: np.ndarray, d_r: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_r
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def normalize_backward(v: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Gradient through ``v / |v|`` along the last axis."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (d_unit - u * np.sum(u * d_unit, axis=-1, keepdims=True)) / norm


def covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched ``R S S^T R^T``; quaternions are normalized first."""
    m = quat_to_rotmat(normalize_quats(rotations)) * np.exp(log_scales)[:, None, :]
    return m @ m.transpose(0, 2, 1)


def covariances_backward(rotations, log_scales, d_cov):
    """Gradients of :func:`covariances` w.r.t. raw quaternions and log-scales."""
    qn = normalize_quats(rotations)
    rot = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    m = rot * s[:, None, :]
    g = 0.5 * (d_cov + d_cov.transpose(0, 2, 1))
    d_m = 2 * g @ m
    d_s = np.einsum("nij,nij->nj", rot, d_m)
    d_rot = d_m * s[:, None, :]
    d_q = normalize_backward(rotations, _rotmat_backward(qn, d_rot))
    return d_q, d_s * s


def covariance3d(rotation, log_scale) -> np.ndarray:
    q = np.asarray(rotation, dtype=np.float64).reshape(1, 4)
    ls = np.asarray(log_scale, dtype=np.float64).reshape(1, 3)
    return covariances(q, ls)[0]


@dataclass
class GaussianCloud:
    """Canonical Gaussians with pre-activation parameters.

    ``sh_coeffs`` is stored as ``(N, (k + 1)^2, 3)``; scales are ``exp`` of
    ``log_scales`` and opacities are ``sigmoid`` of ``opacity_logits``.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    PARAM_NAMES = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in self.PARAM_NAMES:
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(**{k: v.astype(dtype) for k, v in self.params().items()})

    def subset(self, mask) -> "GaussianCloud":
        return GaussianCloud(**{k: v[mask] for k, v in self.params().items()})

    def renormalize(self) -> None:
        self.rotations[:] = normalize_quats(self.rotations)

    def colors(self, camera_center) -> np.ndarray:
        dirs = normalize_quats(np.asarray(camera_center, dtype=self.dtype) - self.positions)
        return np.clip(sh_colors(self.sh_coeffs, dirs), 0.0, 1.0)


def init_cloud(points, base_color=(0.5, 0.5, 0.5), base_scale: float = 0.02,
               sh_degree: int = 1, opacity: float = 0.1, dtype=np.float32) -> GaussianCloud:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("cannot initialize a cloud from an empty point set")
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, n_sh_coeffs(sh_degree), 3))
    base = np.broadcast_to(np.asarray(base_color, dtype=np.float64), (n, 3))
    sh[:, 0, :] = (base - 0.5) / SH_C0
    cloud = GaussianCloud(
        positions=points.copy(),
        rotations=rotations,
        log_scales=np.full((n, 3), np.log(base_scale)),
        opacity_logits=np.full(n, np.log(opacity / (1 - opacity))),
        sh_coeffs=sh,
    )
    return cloud.astype(dtype)


def write_cloud(f, cloud: GaussianCloud) -> None:
    f.write(CKPT_MAGIC)
    f.write(struct.pack("<III", CKPT_VERSION, len(cloud), cloud.sh_degree))
    for name in GaussianCloud.PARAM_NAMES:
        f.write(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())


def read_cloud(f) -> GaussianCloud:
    magic = f.read(4)
    if magic != CKPT_MAGIC:
        raise ValueError(f"bad cloud magic {magic!r}")
    version, n, k = struct.unpack("<III", f.read(12))
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported cloud version {version}")
    shapes = {"positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
              "opacity_logits": (n,), "sh_coeffs": (n, n_sh_coeffs(k), 3)}
    out = {}
    for name in GaussianCloud.PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        buf = f.read(4 * count)
        if len(buf) != 4 * count:
            raise ValueError(f"truncated cloud buffer {name}")
        out[name] = np.frombuffer(buf, dtype="<f4").reshape(shapes[name]).astype(np.float32)
    return GaussianCloud(**out)


def save_cloud(path, cloud: GaussianCloud) -> None:
    with open(path, "wb") as f:
        write_cloud(f, cloud)


def load_cloud(path) -> GaussianCloud:
    with open(Path(path), "rb") as f:
        return read_cloud(f)


def cloud_bytes(cloud: GaussianCloud) -> bytes:
    buf = io.BytesIO()
    write_cloud(buf, cloud)
    return buf.getvalue()

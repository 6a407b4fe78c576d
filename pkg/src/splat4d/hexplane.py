"""Multiresolution HexPlane feature field over (x, y, z, t)."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# coordinate-axis pairs of the six planes; axis 3 is time
PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
SPATIAL_PLANES = (0, 1, 2)
TEMPORAL_PLANES = (3, 4, 5)

HEX_MAGIC = b"HXPL"


@dataclass
class HexPlaneGrid:
    """Six 2D feature planes per level, fused by elementwise product.

    ``planes[level][i]`` has shape ``(F, R_a, R_b)`` for the axis pair
    ``PLANE_AXES[i]``; axis ``a`` indexes rows.
    """

    planes: list
    levels: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    coord_grad: bool = False

    @classmethod
    def create(cls, bounds_min, bounds_max, levels=((32, 12), (64, 25)), features: int = 16,
               rng=None, dtype=np.float32) -> "HexPlaneGrid":
        rng = np.random.default_rng(rng)
        planes = []
        for spatial, temporal in levels:
            if spatial < 2 or temporal < 2:
                raise ValueError("grid resolutions must be at least 2")
            res = (spatial, spatial, spatial, temporal)
            planes.append([rng.uniform(0.9, 1.1, (features, res[a], res[b])).astype(dtype)
                           for a, b in PLANE_AXES])
        return cls(planes, [tuple(map(int, lv)) for lv in levels],
                   np.asarray(bounds_min, dtype=np.float64), np.asarray(bounds_max, dtype=np.float64))

    @property
    def features_per_level(self) -> int:
        return self.planes[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.features_per_level * len(self.levels)

    @property
    def dtype(self):
        return self.planes[0][0].dtype

    def params(self) -> dict[str, np.ndarray]:
        return {f"plane_{lv}_{i}": p for lv, ps in enumerate(self.planes) for i, p in enumerate(ps)}

    def copy(self) -> "HexPlaneGrid":
        return HexPlaneGrid([[p.copy() for p in ps] for ps in self.planes], list(self.levels),
                            self.bounds_min.copy(), self.bounds_max.copy(), self.coord_grad)

    def astype(self, dtype) -> "HexPlaneGrid":
        out = self.copy()
        out.planes = [[p.astype(dtype) for p in ps] for ps in out.planes]
        return out

    def _normalized(self, xyz: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
        """Clamped coordinates in [0, 1]^4 and the clamp mask (True where inside)."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        span = self.bounds_max - self.bounds_min
        u = np.empty((xyz.shape[0], 4))
        u[:, :3] = (xyz - self.bounds_min) / span
        u[:, 3] = np.asarray(t, dtype=np.float64)
        inside = (u >= 0.0) & (u <= 1.0)
        return np.clip(u, 0.0, 1.0), inside

    @staticmethod
    def _corners(coord: np.ndarray, res: int):
        g = coord * (res - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
        return i0, g - i0

    def _sample_plane(self, plane, ia, fa, ib, fb):
        # plane (F, Ra, Rb) -> (N, F)
        v00 = plane[:, ia, ib]
        v01 = plane[:, ia, ib + 1]
        v10 = plane[:, ia + 1, ib]
        v11 = plane[:, ia + 1, ib + 1]
        out = (v00 * ((1 - fa) * (1 - fb)) + v01 * ((1 - fa) * fb)
               + v10 * (fa * (1 - fb)) + v11 * (fa * fb))
        return out.T

    def query_planes(self, xyz, t):
        """Per-level, per-plane interpolated features: list of arrays (6, N, F)."""
        u, _ = self._normalized(xyz, t)
        out = []
        for (spatial, temporal), planes in zip(self.levels, self.planes):
            res = (spatial, spatial, spatial, temporal)
            idx = [self._corners(u[:, ax], res[ax]) for ax in range(4)]
            vals = np.empty((6, u.shape[0], self.features_per_level), dtype=self.dtype)
            for i, (a, b) in enumerate(PLANE_AXES):
                (ia, fa), (ib, fb) = idx[a], idx[b]
                vals[i] = self._sample_plane(planes[i], ia, fa.astype(self.dtype), ib, fb.astype(self.dtype))
            out.append(vals)
        return out

    def query(self, xyz, t) -> np.ndarray:
        """Time-specific features (N, F * L) at points ``xyz`` (N, 3) and time ``t``."""
        return np.concatenate([np.prod(v, axis=0) for v in self.query_planes(xyz, t)], axis=1)

    def query_backward(self, xyz, t, d_f: np.ndarray, per_level=None):
        """Scatter ``d_f`` (N, F * L) onto plane entries.

        Returns a list-of-lists of plane gradients (same layout as ``planes``)
        and, when ``coord_grad`` is enabled, the gradient w.r.t. ``xyz``
        (otherwise ``None``). ``per_level`` may carry the forward
        :meth:`query_planes` result to skip recomputation.
        """
        u, inside = self._normalized(xyz, t)
        n = u.shape[0]
        f = self.features_per_level
        span = self.bounds_max - self.bounds_min
        d_xyz = np.zeros((n, 3)) if self.coord_grad else None
        grads = []
        if per_level is None:
            per_level = self.query_planes(xyz, t)
        for lv, ((spatial, temporal), planes) in enumerate(zip(self.levels, self.planes)):
            res = (spatial, spatial, spatial, temporal)
            vals = per_level[lv]
            d_lv = d_f[:, lv * f:(lv + 1) * f]
            idx = [self._corners(u[:, ax], res[ax]) for ax in range(4)]
            level_grads = []
            for i, (a, b) in enumerate(PLANE_AXES):
                others = np.prod(vals[[j for j in range(6) if j != i]], axis=0)
                d_val = d_lv * others  # (N, F)
                (ia, fa), (ib, fb) = idx[a], idx[b]
                size = planes[i].shape[1] * planes[i].shape[2]
                flat = np.concatenate([(ia + da) * planes[i].shape[2] + (ib + db)
                                       for da in (0, 1) for db in (0, 1)])
                weights = np.concatenate([d_val * w[:, None].astype(d_val.dtype) for w in (
                    (1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb)])
                # single bincount keeps the accumulation order fixed
                index = (flat[:, None] + np.arange(f) * size).ravel()
                g = np.bincount(index, weights=weights.ravel(), minlength=f * size)
                g = g.reshape(planes[i].shape).astype(planes[i].dtype)
                level_grads.append(g)
                if d_xyz is not None:
                    p = planes[i]
                    v00, v01 = p[:, ia, ib].T, p[:, ia, ib + 1].T
                    v10, v11 = p[:, ia + 1, ib].T, p[:, ia + 1, ib + 1].T
                    dfa = ((v10 - v00) * (1 - fb)[:, None] + (v11 - v01) * fb[:, None]) * (res[a] - 1)
                    dfb = ((v01 - v00) * (1 - fa)[:, None] + (v11 - v10) * fa[:, None]) * (res[b] - 1)
                    for ax, dval in ((a, dfa), (b, dfb)):
                        if ax < 3:
                            d_xyz[:, ax] += np.sum(d_val * dval, axis=1) * inside[:, ax] / span[ax]
            grads.append(level_grads)
        return grads, d_xyz

    def write(self, f) -> None:
        f.write(HEX_MAGIC)
        f.write(struct.pack("<III", 1, len(self.levels), self.features_per_level))
        f.write(np.asarray(self.bounds_min, dtype="<f8").tobytes())
        f.write(np.asarray(self.bounds_max, dtype="<f8").tobytes())
        for spatial, temporal in self.levels:
            f.write(struct.pack("<II", spatial, temporal))
        for planes in self.planes:
            for p in planes:
                f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())

    @classmethod
    def read(cls, f) -> "HexPlaneGrid":
        if f.read(4) != HEX_MAGIC:
            raise ValueError("bad hexplane section")
        _version, n_levels, feats = struct.unpack("<III", f.read(12))
        bmin = np.frombuffer(f.read(24), dtype="<f8").copy()
        bmax = np.frombuffer(f.read(24), dtype="<f8").copy()
        levels = [struct.unpack("<II", f.read(8)) for _ in range(n_levels)]
        planes = []
        for spatial, temporal in levels:
            res = (spatial, spatial, spatial, temporal)
            lv = []
            for a, b in PLANE_AXES:
                count = feats * res[a] * res[b]
                lv.append(np.frombuffer(f.read(4 * count), dtype="<f4")
                          .reshape(feats, res[a], res[b]).astype(np.float32))
            planes.append(lv)
        return cls(planes, levels, bmin, bmax)

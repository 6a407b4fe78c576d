"""MLP decoders turning HexPlane features into geometric offsets and colour affine maps."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianCloud, normalize_backward, normalize_quats

MLP_MAGIC = b"MLPS"
COLOR_IDENTITY_BIAS = np.array([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0], dtype=np.float64)


@dataclass
class MLP:
    """Dense layers with ReLU between them (none after the last)."""

    weights: list
    biases: list

    @classmethod
    def create(cls, sizes, rng=None, dtype=np.float32, zero_last: bool = True) -> "MLP":
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, (n_in, n_out))
            if zero_last and i == len(sizes) - 2:
                w = np.zeros((n_in, n_out))
            weights.append(w.astype(dtype))
            biases.append(np.zeros(n_out, dtype=dtype))
        return cls(weights, biases)

    def forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, d_out):
        """Returns ``(d_weights, d_biases, d_input)`` for the activations of a forward call."""
        d_w = [None] * len(self.weights)
        d_b = [None] * len(self.weights)
        d = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                d = d * (acts[i + 1] > 0)
            d_w[i] = acts[i].T @ d
            d_b[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
        return d_w, d_b, d

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def grads_dict(self, prefix: str, d_w, d_b) -> dict[str, np.ndarray]:
        out = {}
        for i, (gw, gb) in enumerate(zip(d_w, d_b)):
            out[f"{prefix}.w{i}"] = gw
            out[f"{prefix}.b{i}"] = gb
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MLP":
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def write(self, f) -> None:
        f.write(MLP_MAGIC)
        f.write(struct.pack("<I", len(self.weights)))
        for w, b in zip(self.weights, self.biases):
            f.write(struct.pack("<II", *w.shape))
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())

    @classmethod
    def read(cls, f) -> "MLP":
        if f.read(4) != MLP_MAGIC:
            raise ValueError("bad MLP section")
        (n_layers,) = struct.unpack("<I", f.read(4))
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack("<II", f.read(8))
            weights.append(np.frombuffer(f.read(4 * rows * cols), dtype="<f4").reshape(rows, cols).astype(np.float32))
            biases.append(np.frombuffer(f.read(4 * cols), dtype="<f4").astype(np.float32))
        return cls(weights, biases)


class DeformDecoder:
    """Trunk MLP plus a zero-initialised 10-wide head: offsets for position (3), quaternion (4), log-scale (3)."""

    def __init__(self, mlp: MLP):
        if mlp.weights[-1].shape[1] != 10:
            raise ValueError("deformation head must emit 10 values")
        self.mlp = mlp

    @classmethod
    def create(cls, in_dim: int, hidden: int = 64, layers: int = 2, rng=None, dtype=np.float32):
        return cls(MLP.create([in_dim] + [hidden] * layers + [10], rng=rng, dtype=dtype))

    def forward(self, cloud: GaussianCloud, features: np.ndarray):
        """Deformed cloud at the features' timestamp and a cache for :meth:`backward`."""
        if features.shape[0] != len(cloud):
            raise ValueError("one feature row per Gaussian is required")
        out, acts = self.mlp.forward(features)
        raw_rot = cloud.rotations + out[:, 3:7]
        deformed = GaussianCloud(
            positions=cloud.positions + out[:, 0:3],
            rotations=normalize_quats(raw_rot),
            log_scales=cloud.log_scales + out[:, 7:10],
            opacity_logits=cloud.opacity_logits,
            sh_coeffs=cloud.sh_coeffs,
        )
        return deformed, {"acts": acts, "raw_rot": raw_rot}

    def backward(self, cache, d_positions, d_rotations, d_log_scales):
        """Gradients for canonical (position, rotation, log-scale), the MLP and the features."""
        d_raw_rot = normalize_backward(cache["raw_rot"], d_rotations)
        d_out = np.concatenate([d_positions, d_raw_rot, d_log_scales], axis=1)
        d_w, d_b, d_feat = self.mlp.backward(cache["acts"], d_out)
        return {
            "positions": d_positions,
            "rotations": d_raw_rot,
            "log_scales": d_log_scales,
            "mlp": (d_w, d_b),
            "features": d_feat,
        }


def deform(decoder: DeformDecoder, cloud: GaussianCloud, features: np.ndarray) -> GaussianCloud:
    return decoder.forward(cloud, features)[0]


class ColorHead:
    """MLP emitting a per-Gaussian 3x3 matrix and bias; identity at initialisation."""

    def __init__(self, mlp: MLP):
        if mlp.weights[-1].shape[1] != 12:
            raise ValueError("colour head must emit 12 values")
        self.mlp = mlp

    @classmethod
    def create(cls, in_dim: int, hidden: int = 64, layers: int = 1, rng=None, dtype=np.float32):
        mlp = MLP.create([in_dim] + [hidden] * layers + [12], rng=rng, dtype=dtype)
        mlp.biases[-1] = COLOR_IDENTITY_BIAS.astype(dtype)
        return cls(mlp)

    def affine(self, features: np.ndarray):
        out, acts = self.mlp.forward(features)
        return out[:, :9].reshape(-1, 3, 3), out[:, 9:], acts

    def forward(self, rgb_sh: np.ndarray, features: np.ndarray):
        """``c = W(f) rgb_sh + b(f)`` row-wise, unclamped."""
        w, b, acts = self.affine(features)
        c = np.einsum("nij,nj->ni", w, rgb_sh) + b
        return c, {"acts": acts, "w": w, "rgb": rgb_sh}

    def identity_penalty(self, cache, weight: float):
        """``weight * mean_n |(W_n, b_n) - (I, 0)|^2`` and its gradient w.r.t. the raw head output."""
        dev = cache["acts"][-1] - COLOR_IDENTITY_BIAS.astype(cache["acts"][-1].dtype)
        n = max(dev.shape[0], 1)
        return weight * float(np.sum(dev.astype(np.float64) ** 2)) / n, (2.0 * weight / n) * dev

    def backward(self, cache, d_c, d_out_extra=None):
        d_w_mat = d_c[:, :, None] * cache["rgb"][:, None, :]
        d_rgb = np.einsum("nij,ni->nj", cache["w"], d_c)
        d_out = np.concatenate([d_w_mat.reshape(-1, 9), d_c], axis=1)
        if d_out_extra is not None:
            d_out = d_out + d_out_extra
        d_w, d_b, d_feat = self.mlp.backward(cache["acts"], d_out)
        return {"rgb": d_rgb, "mlp": (d_w, d_b), "features": d_feat}


def transform_color(head: ColorHead, rgb_sh: np.ndarray, features: np.ndarray) -> np.ndarray:
    return head.forward(np.atleast_2d(rgb_sh), np.atleast_2d(features))[0]

"""Image losses with analytic gradients, and evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # zero-padded 'same' filtering; self-adjoint for a symmetric window
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(pred: np.ndarray, target: np.ndarray):
    _check_shapes(pred, target)
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def _ssim_terms(x, y, window):
    mu1, mu2 = _blur(x, window), _blur(y, window)
    p = _blur(x * x, window)
    q = _blur(x * y, window)
    s11 = p - mu1 * mu1
    s22 = _blur(y * y, window) - mu2 * mu2
    s12 = q - mu1 * mu2
    a1 = 2 * mu1 * mu2 + SSIM_C1
    a2 = 2 * s12 + SSIM_C2
    b1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    b2 = s11 + s22 + SSIM_C2
    return mu1, mu2, a1, a2, b1, b2


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, zero padding)."""
    _check_shapes(x, y)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y, gaussian_window())
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """SSIM of ``x`` against ``y`` and its gradient w.r.t. ``x``."""
    _check_shapes(x, y)
    dtype = x.dtype
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    window = gaussian_window()
    mu1, mu2, a1, a2, b1, b2 = _ssim_terms(x, y, window)
    s = a1 * a2 / (b1 * b2)
    ds = 1.0 / s.size
    g_mu = ds * s * (2 * mu2 / a1 - 2 * mu2 / a2 - 2 * mu1 / b1 + 2 * mu1 / b2)
    g_p = ds * (-s / b2)
    g_q = ds * (2 * s / a2)
    grad = _blur(g_mu, window) + 2 * x * _blur(g_p, window) + y * _blur(g_q, window)
    return float(s.mean()), grad.astype(dtype)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_shapes(a, b)
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; identical images report the 99 dB cap."""
    err = mse(rendered, reference)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, -10.0 * np.log10(err)))


def metrics(rendered: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    return psnr(rendered, reference), ssim(rendered, reference)


def _pool2(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    v = img[:h, :w]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def _pool2_backward(grad, shape):
    out = np.zeros(shape, dtype=grad.dtype)
    h, w = grad.shape[0] * 2, grad.shape[1] * 2
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy:h:2, dx:w:2] = 0.25 * grad
    return out


def _grad_mag(img, eps):
    gx = img[:-1, 1:] - img[:-1, :-1]
    gy = img[1:, :-1] - img[:-1, :-1]
    return np.sqrt(gx * gx + gy * gy + eps), gx, gy


class GradientMagnitudeLoss:
    """Mean absolute difference of finite-difference gradient magnitudes over octaves.

    A perceptual stand-in: sensitive to edges and texture, blind to flat
    colour offsets. Any callable ``(pred, target) -> (value, d_pred)`` can
    replace it in refinement.
    """

    def __init__(self, octaves: int = 3, eps: float = 1e-6):
        self.octaves = octaves
        self.eps = eps

    def __call__(self, pred: np.ndarray, target: np.ndarray):
        _check_shapes(pred, target)
        dtype = pred.dtype
        p = np.asarray(pred, dtype=np.float64)
        t = np.asarray(target, dtype=np.float64)
        pyramid = []
        total = 0.0
        used = 0
        for _ in range(self.octaves):
            if min(p.shape[:2]) < 2:
                break
            pyramid.append((p.shape, p))
            mp, gx, gy = _grad_mag(p, self.eps)
            mt, _, _ = _grad_mag(t, self.eps)
            diff = mp - mt
            total += np.abs(diff).mean()
            used += 1
            pyramid[-1] = (p.shape, (diff, mp, gx, gy))
            p, t = _pool2(p), _pool2(t)
        value = total / max(used, 1)
        grad_next = None
        for shape, (diff, mp, gx, gy) in reversed(pyramid):
            g = np.zeros(shape)
            dm = np.sign(diff) / diff.size / used
            dgx = dm * gx / mp
            dgy = dm * gy / mp
            g[:-1, 1:] += dgx
            g[:-1, :-1] -= dgx + dgy
            g[1:, :-1] += dgy
            if grad_next is not None:
                g += _pool2_backward(grad_next, shape)
            grad_next = g
        if grad_next is None:
            grad_next = np.zeros(pred.shape)
        return float(value), grad_next.astype(dtype)


def area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging input cells by overlap area."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                mat[i, j] = overlap
        mat[i] /= mat[i].sum()
    return mat


def area_downsample(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.shape[:2] == (height, width):
        return img
    ry = area_resize_matrix(img.shape[0], height).astype(img.dtype)
    rx = area_resize_matrix(img.shape[1], width).astype(img.dtype)
    rows = np.tensordot(ry, img, axes=(1, 0))
    return np.einsum("jw,iwc->ijc", rx, rows)

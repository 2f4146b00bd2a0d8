"""SSIM with an 11x11 Gaussian window (sigma 1.5) and its analytic gradient."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _kernel() -> np.ndarray:
    x = np.arange(WINDOW) - WINDOW // 2
    k = np.exp(-(x**2) / (2 * SIGMA**2))
    return k / k.sum()


_K = _kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    # zero padding; the kernel is symmetric so this operator is self-adjoint
    out = correlate1d(img, _K, axis=0, mode="constant")
    return correlate1d(out, _K, axis=1, mode="constant")


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return _ssim_parts(x, y)[0]


def _ssim_parts(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mu1, mu2 = _blur(x), _blur(y)
    s11 = _blur(x * x) - mu1 * mu1
    s22 = _blur(y * y) - mu2 * mu2
    s12 = _blur(x * y) - mu1 * mu2
    A1 = 2 * mu1 * mu2 + C1
    A2 = 2 * s12 + C2
    B1 = mu1 * mu1 + mu2 * mu2 + C1
    B2 = s11 + s22 + C2
    return A1 * A2 / (B1 * B2), (mu1, mu2, A1, A2, B1, B2)


def ssim(x: np.ndarray, y: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Mean SSIM over pixels and channels; ``weight`` (H, W) turns it into a weighted mean."""
    m = ssim_map(x, y)
    if weight is None:
        return float(m.mean())
    w = np.asarray(weight, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 1.0
    return float(np.sum(w[..., None] * m) / (total * m.shape[-1]))


def ssim_and_grad(x: np.ndarray, y: np.ndarray, weight: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """(Weighted) mean SSIM and its gradient with respect to ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, (mu1, mu2, A1, A2, B1, B2) = _ssim_parts(x, y)
    C = m.shape[-1]
    if weight is None:
        g = np.full(m.shape, 1.0 / m.size)
    else:
        w = np.asarray(weight, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            return 1.0, np.zeros_like(x)
        g = np.broadcast_to(w[..., None] / (total * C), m.shape)
    value = float(np.sum(g * m))
    den = B1 * B2
    dA1 = A2 / den
    dA2 = A1 / den
    dB1 = -m / B1
    dB2 = -m / B2
    # partials w.r.t. blurred statistics mu1, E[x^2], E[xy]
    g_mu1 = g * (dA1 * 2 * mu2 + dA2 * (-2 * mu2) + dB1 * 2 * mu1 + dB2 * (-2 * mu1))
    g_exx = g * dB2
    g_exy = g * dA2 * 2
    grad = _blur(g_mu1) + 2 * x * _blur(g_exx) + y * _blur(g_exy)
    return value, grad

"""Classical image operators, baselines and metrics.

Images are float64 arrays of shape (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

PSNR_CAP = 100.0


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected a (C,H,W) image, got shape {img.shape}")
    return img


def gaussian_kernel(rho: float) -> np.ndarray:
    radius = int(math.ceil(3 * rho))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / rho) ** 2)
    return k / k.sum()


def gaussian_smooth(img, rho: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 rho)``, reflect padding."""
    if rho < 0:
        raise ValueError("rho must be >= 0")
    img = as_image(img)
    if rho == 0:
        return img.copy()
    k = gaussian_kernel(rho)
    out = ndimage.correlate1d(img, k, axis=-1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=-2, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    w = np.where(t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1, 0.0)
    return np.where((t > 1) & (t < 2), a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, w)


def cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Catmull-Rom resampling matrix (half-pixel centres, edge replication)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        w = _cubic_weight(src - idx)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), w)
    return m


def bicubic_resize(img, factor: float) -> np.ndarray:
    img = as_image(img)
    if factor <= 0:
        raise ValueError("factor must be positive")
    _, h, w = img.shape
    ho, wo = int(round(h * factor)), int(round(w * factor))
    if ho < 1 or wo < 1:
        raise ValueError(f"target size {ho}x{wo} is empty")
    out = cubic_matrix(h, ho) @ img @ cubic_matrix(w, wo).T
    return np.clip(out, 0.0, 1.0)


def downsample(img, factor: int) -> np.ndarray:
    """Box average over non-overlapping blocks; reflect-pads to a multiple of ``factor``."""
    img = as_image(img)
    if factor < 2:
        raise ValueError("factor must be >= 2")
    c, h, w = img.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        h, w = h + ph, w + pw
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def nearest_upsample(img, factor: int) -> np.ndarray:
    img = as_image(img)
    return np.repeat(np.repeat(img, factor, axis=1), factor, axis=2)


# ---------------------------------------------------------------- TV

def _grad(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    gy[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    return gx, gy


def _div(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    # negative adjoint of _grad
    d = np.zeros_like(px)
    d[..., :, 0] = px[..., :, 0]
    d[..., :, 1:-1] = px[..., :, 1:-1] - px[..., :, :-2]
    d[..., :, -1] = -px[..., :, -2]
    d[..., 0, :] += py[..., 0, :]
    d[..., 1:-1, :] += py[..., 1:-1, :] - py[..., :-2, :]
    d[..., -1, :] += -py[..., -2, :]
    return d


def tv_sum(u) -> float:
    """Isotropic total variation (sum of gradient magnitudes, per channel)."""
    gx, gy = _grad(np.asarray(u, dtype=np.float64))
    return float(np.sqrt(gx**2 + gy**2).sum())


def total_variation(img) -> float:
    """Mean isotropic TV per pixel, comparable in scale to a mean squared error."""
    img = as_image(img)
    return tv_sum(img) / img.size


def tv_objective(u, g, lam: float) -> float:
    return 0.5 * float(np.sum((u - g) ** 2)) + lam * tv_sum(u)


def tv_denoise(img, lam: float = 0.1, iters: int = 100, tau: float = 0.125,
               history: list | None = None) -> np.ndarray:
    """Chambolle's dual projection algorithm for ``1/2||u-g||^2 + lam TV(u)``.

    Channels are denoised independently.  When ``history`` is a list, the
    primal objective of every iterate is appended to it.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    g = as_image(img)
    px = np.zeros_like(g)
    py = np.zeros_like(g)
    u = g
    for _ in range(iters):
        gx, gy = _grad(_div(px, py) - g / lam)
        norm = np.sqrt(gx**2 + gy**2)
        px = (px + tau * gx) / (1.0 + tau * norm)
        py = (py + tau * gy) / (1.0 + tau * norm)
        u = g - lam * _div(px, py)
        if history is not None:
            history.append(tv_objective(u, g, lam))
    return np.clip(u, 0.0, 1.0)


# ---------------------------------------------------------------- inpainting fill

def diffusion_fill(img, mask) -> np.ndarray:
    """Harmonic fill of pixels where ``mask == 0`` from their known neighbours.

    Solves the discrete Laplace equation on the unknown pixels with the known
    pixels as Dirichlet data.
    """
    img = as_image(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 3:
        mask = mask[0]
    _, h, w = img.shape
    unknown = ~mask
    n = int(unknown.sum())
    out = img.copy()
    if n == 0:
        return out
    if not mask.any():
        out[:] = 0.5
        return out
    idx = -np.ones((h, w), dtype=int)
    idx[unknown] = np.arange(n)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, img.shape[0]))
    ys, xs = np.nonzero(unknown)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        r = idx[ys[ok], xs[ok]]
        rows.append(r)
        cols.append(r)
        vals.append(np.ones(r.size))
        nb_unknown = unknown[ny[ok], nx[ok]]
        rows.append(r[nb_unknown])
        cols.append(idx[ny[ok][nb_unknown], nx[ok][nb_unknown]])
        vals.append(-np.ones(int(nb_unknown.sum())))
        known = ~nb_unknown
        np.add.at(rhs, r[known], img[:, ny[ok][known], nx[ok][known]].T)
    a = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    sol = spsolve(a.tocsc(), rhs)
    sol = sol.reshape(n, -1)
    out[:, ys, xs] = sol.T
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- metrics

def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """Peak SNR in dB for images in [0, 1]; identical images report :data:`PSNR_CAP`."""
    m = mse(a, b)
    if m == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))

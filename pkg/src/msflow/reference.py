"""Independent brute-force implementations used to verify the fast paths.

Everything here is written as plain loops over numpy arrays, deliberately
sharing no code with the production operations.  Slow and only meant for
desk-scale grids inside tests and the self-test battery.
"""

from __future__ import annotations

import numpy as np


def cost_volume_bruteforce(f1: np.ndarray, f2: np.ndarray) -> np.ndarray:
    """All-pairs scaled dot products via an explicit double loop.

    f1, f2: (D, H, W). Returns (H, W, H, W).
    """
    d, h, w = f1.shape
    out = np.zeros((h, w, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for k in range(h):
                for l in range(w):
                    acc = 0.0
                    for c in range(d):
                        acc += float(f1[c, i, j]) * float(f2[c, k, l])
                    out[i, j, k, l] = acc / np.sqrt(d)
    return out


def avg_pool_bruteforce(volume: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes of an (H, W, H2, W2) volume."""
    h1, w1, h2, w2 = volume.shape
    out = np.zeros((h1, w1, h2 // 2, w2 // 2), dtype=np.float64)
    for i in range(h1):
        for j in range(w1):
            for k in range(h2 // 2):
                for l in range(w2 // 2):
                    block = volume[i, j, 2 * k : 2 * k + 2, 2 * l : 2 * l + 2]
                    out[i, j, k, l] = float(block[0, 0] + block[0, 1] + block[1, 0] + block[1, 1]) / 4.0
    return out


def sample_bilinear_zero(plane: np.ndarray, x: float, y: float) -> float:
    """Bilinear sample of a 2D array with zero-valued out-of-domain neighbors."""
    h, w = plane.shape
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    value = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            weight = (1.0 - abs(x - xi)) * (1.0 - abs(y - yi))
            if 0 <= xi < w and 0 <= yi < h:
                value += weight * float(plane[yi, xi])
    return value


def lookup_bruteforce(levels, flow: np.ndarray, radius: int) -> np.ndarray:
    """Per-pixel neighborhood sampling from a list of (H, W, Hl, Wl) volumes.

    flow: (2, H, W) with channel 0 the x-displacement.  Channel order matches
    the fast path: level-major, then dy-major/dx-minor within a level.
    """
    _, h, w = flow.shape
    side = 2 * radius + 1
    out = np.zeros((len(levels) * side * side, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            channel = 0
            for lvl, volume in enumerate(levels):
                cx = (j + float(flow[0, i, j])) / 2**lvl
                cy = (i + float(flow[1, i, j])) / 2**lvl
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        out[channel, i, j] = sample_bilinear_zero(
                            np.asarray(volume[i, j]), cx + dx, cy + dy
                        )
                        channel += 1
    return out


def nearest_upsample2x_bruteforce(flow: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling with values doubled; flow: (2, H, W)."""
    two, h, w = flow.shape
    out = np.zeros((two, 2 * h, 2 * w), dtype=np.float64)
    for c in range(two):
        for i in range(2 * h):
            for j in range(2 * w):
                out[c, i, j] = 2.0 * float(flow[c, i // 2, j // 2])
    return out


def convex_upsample_bruteforce(flow: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Reference 2x convex upsampling with replicated border neighborhoods.

    flow: (2, H, W); mask: (36, H, W) with channel sub*9 + k where
    sub = di*2 + dj indexes the output sub-pixel and k = (dy+1)*3 + (dx+1)
    the coarse neighbor.
    """
    _, h, w = flow.shape
    out = np.zeros((2, 2 * h, 2 * w), dtype=np.float64)
    for c in range(2):
        for i in range(h):
            for j in range(w):
                for di in (0, 1):
                    for dj in (0, 1):
                        sub = di * 2 + dj
                        acc = 0.0
                        for dy in (-1, 0, 1):
                            for dx in (-1, 0, 1):
                                k = (dy + 1) * 3 + (dx + 1)
                                yi = min(max(i + dy, 0), h - 1)
                                xi = min(max(j + dx, 0), w - 1)
                                acc += float(mask[sub * 9 + k, i, j]) * 2.0 * float(flow[c, yi, xi])
                        out[c, 2 * i + di, 2 * j + dj] = acc
    return out


def central_difference_gradient(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        plus = float(fn(x))
        flat[idx] = orig - step
        minus = float(fn(x))
        flat[idx] = orig
        gflat[idx] = (plus - minus) / (2.0 * step)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm difference over max-norm magnitude of two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)

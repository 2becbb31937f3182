"""Flow-file formats, synthetic data with exact ground truth, and the
standard flow color wheel.

Flow fields are numpy arrays of shape (2, H, W), float32, with channel 0
the horizontal displacement u and channel 1 the vertical displacement v,
both in pixels: the content of frame 1 at pixel x appears in frame 2 at
x + flow(x).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import cv2
import numpy as np

FLO_MAGIC = 202021.25

PATTERNS = ("noise", "checker", "blobs")
WARPS = ("translation", "affine", "smooth-random")


# --- Middlebury .flo ---------------------------------------------------------

def read_flo(path) -> np.ndarray:
    """Read a .flo file; returns float32 flow of shape (2, H, W)."""
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated header")
        magic, width, height = struct.unpack("<fii", header)
        if magic != FLO_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
        if width <= 0 or height <= 0 or width * height > 10**8:
            raise ValueError(f"{path}: implausible dimensions {width}x{height}")
        payload = fh.read(width * height * 2 * 4)
    if len(payload) < width * height * 2 * 4:
        raise ValueError(f"{path}: truncated payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def write_flo(path, flow: np.ndarray) -> None:
    """Write flow of shape (2, H, W) as a .flo file (bit-exact round trip)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected flow of shape (2, H, W), got {flow.shape}")
    _, height, width = flow.shape
    interleaved = flow.transpose(1, 2, 0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, width, height))
        fh.write(interleaved.tobytes())


# --- KITTI 16-bit png --------------------------------------------------------

def read_kitti_png(path):
    """Read a KITTI flow png; returns (flow (2, H, W) float32, valid (H, W) bool)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"{path}: unreadable image")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(
            f"{path}: expected 16-bit 3-channel png, got dtype {raw.dtype} shape {raw.shape}"
        )
    rgb = raw[:, :, ::-1].astype(np.float32)  # cv2 loads BGR
    u = (rgb[:, :, 0] - 2.0**15) / 64.0
    v = (rgb[:, :, 1] - 2.0**15) / 64.0
    valid = rgb[:, :, 2] > 0
    return np.stack((u, v)).astype(np.float32), valid


def write_kitti_png(path, flow: np.ndarray, valid: np.ndarray | None = None) -> None:
    """Write flow as a KITTI 16-bit png; exact for |flow| < 512 at 1/64 px."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected flow of shape (2, H, W), got {flow.shape}")
    _, height, width = flow.shape
    stored = np.rint(flow * 64.0 + 2.0**15)
    if stored.min() < 0 or stored.max() > 65535:
        raise ValueError("flow out of the representable range (|flow| < 512 px)")
    if valid is None:
        valid = np.ones((height, width), dtype=bool)
    rgb = np.zeros((height, width, 3), dtype=np.uint16)
    rgb[:, :, 0] = stored[0].astype(np.uint16)
    rgb[:, :, 1] = stored[1].astype(np.uint16)
    rgb[:, :, 2] = np.asarray(valid).astype(np.uint16)
    if not cv2.imwrite(str(path), rgb[:, :, ::-1]):
        raise IOError(f"{path}: write failed")


# --- images ------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Read an 8-bit image as float32 (3, H, W) in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise ValueError(f"{path}: unreadable image")
    rgb = raw[:, :, ::-1].astype(np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    """Write a float [0, 1] (3, H, W) or uint8 (H, W, 3) image as 8-bit png."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        if image.ndim == 3 and image.shape[0] == 3:
            image = image.transpose(1, 2, 0)
    if not cv2.imwrite(str(path), image[:, :, ::-1]):
        raise IOError(f"{path}: write failed")


# --- synthetic samples -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic frame pair with exact ground truth.

    Deterministic given the seed.  ``warp_params`` optionally pins the warp
    instead of drawing it from the seed: (dx, dy) for translation, a flat
    2x3 affine matrix for affine.
    """

    pattern: str = "blobs"
    warp: str = "smooth-random"
    max_displacement: float = 8.0
    seed: int = 0
    warp_params: tuple | None = None


@dataclass
class FlowSample:
    image1: np.ndarray  # (3, H, W) float32 in [0, 1]
    image2: np.ndarray
    gt_flow: np.ndarray  # (2, H, W) float32
    valid: np.ndarray  # (H, W) bool


def _base_pattern(kind: str, size, rng) -> np.ndarray:
    h, w = size
    if kind == "noise":
        img = rng.uniform(size=(h, w, 3)).astype(np.float32)
        img = cv2.GaussianBlur(img, (5, 5), 1.2)
        lo, hi = img.min(), img.max()
        return (img - lo) / max(hi - lo, 1e-6)
    if kind == "checker":
        cell = int(rng.integers(4, 9))
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        tiles = ((ii // cell + jj // cell) % 2).astype(np.float32)
        color_a = rng.uniform(0.0, 0.45, size=3).astype(np.float32)
        color_b = rng.uniform(0.55, 1.0, size=3).astype(np.float32)
        img = tiles[:, :, None] * color_a + (1 - tiles[:, :, None]) * color_b
        img += rng.normal(scale=0.02, size=(h, w, 3)).astype(np.float32)
        return np.clip(img, 0.0, 1.0)
    if kind == "blobs":
        ii, jj = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
        img = np.zeros((h, w, 3), dtype=np.float32)
        for _ in range(12):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(0.05, 0.2) * min(h, w)
            bump = np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * sigma**2))
            img += bump[:, :, None] * rng.uniform(0.2, 1.0, size=3).astype(np.float32)
        lo, hi = img.min(), img.max()
        return (img - lo) / max(hi - lo, 1e-6)
    raise ValueError(f"unknown pattern {kind!r}, expected one of {PATTERNS}")


def _warp_field(spec: SyntheticSpec, size, rng) -> np.ndarray:
    h, w = size
    kind = spec.warp
    if kind == "translation":
        if spec.warp_params is not None:
            dx, dy = spec.warp_params
        else:
            angle = rng.uniform(0, 2 * np.pi)
            mag = rng.uniform(0.3, 1.0) * spec.max_displacement
            dx, dy = mag * np.cos(angle), mag * np.sin(angle)
        flow = np.empty((2, h, w), dtype=np.float32)
        flow[0] = dx
        flow[1] = dy
        return flow
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if kind == "affine":
        if spec.warp_params is not None:
            m = np.asarray(spec.warp_params, dtype=np.float64).reshape(2, 3)
        else:
            m = np.array([[1, 0, 0.0], [0, 1, 0.0]])
            m[:, :2] += rng.uniform(-0.05, 0.05, size=(2, 2))
            m[:, 2] = rng.uniform(-0.5, 0.5, size=2) * spec.max_displacement
        u = m[0, 0] * jj + m[0, 1] * ii + m[0, 2] - jj
        v = m[1, 0] * jj + m[1, 1] * ii + m[1, 2] - ii
        flow = np.stack((u, v))
    elif kind == "smooth-random":
        coarse = rng.uniform(-1.0, 1.0, size=(2, 4, 4))
        u = cv2.resize(coarse[0], (w, h), interpolation=cv2.INTER_CUBIC)
        v = cv2.resize(coarse[1], (w, h), interpolation=cv2.INTER_CUBIC)
        flow = np.stack((u, v))
    else:
        raise ValueError(f"unknown warp {kind!r}, expected one of {WARPS}")
    peak = np.sqrt((flow**2).sum(axis=0)).max()
    if spec.warp_params is None and peak > 1e-9:
        flow *= spec.max_displacement / peak
    return flow.astype(np.float32)


def backward_warp(image: np.ndarray, flow: np.ndarray):
    """Sample ``image`` at x + flow(x) for every pixel x.

    Returns (warped (C, H, W), valid (H, W)) where valid marks pixels whose
    source coordinate lies inside the domain; out-of-domain reads use
    zero-valued virtual pixels.  Pure float64 arithmetic so results match a
    per-pixel bilinear oracle exactly.
    """
    c, h, w = image.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    xs = jj + flow[0].astype(np.float64)
    ys = ii + flow[1].astype(np.float64)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    warped = np.zeros((c, h, w), dtype=np.float64)
    for dy in (0.0, 1.0):
        for dx in (0.0, 1.0):
            xi = x0 + dx
            yi = y0 + dy
            weight = (1.0 - np.abs(xs - xi)) * (1.0 - np.abs(ys - yi))
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            xc = np.clip(xi, 0, w - 1).astype(int)
            yc = np.clip(yi, 0, h - 1).astype(int)
            contrib = np.where(inside, weight, 0.0)
            warped += contrib[None] * image[:, yc, xc]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    return warped, valid


def generate(spec: SyntheticSpec, size) -> FlowSample:
    """Deterministic frame pair whose ground truth is exact by construction.

    Frame 2 is the base pattern; frame 1 samples it at x + flow(x), so the
    content of frame 1 at x appears in frame 2 at exactly x + flow(x).
    Pixels whose source falls outside the domain are marked invalid.
    """
    if spec.max_displacement < 0:
        raise ValueError("max_displacement must be >= 0")
    h, w = size
    rng = np.random.default_rng(spec.seed)
    image2 = _base_pattern(spec.pattern, (h, w), rng).astype(np.float32)
    flow = _warp_field(spec, (h, w), rng)
    warped, valid = backward_warp(image2.transpose(2, 0, 1), flow)
    return FlowSample(
        image1=warped.astype(np.float32),
        image2=np.ascontiguousarray(image2.transpose(2, 0, 1)),
        gt_flow=flow,
        valid=valid,
    )


# --- flow visualization ------------------------------------------------------

def _color_wheel() -> np.ndarray:
    """Standard 55-bin flow color wheel (RY/YG/GC/CB/BM/MR segments)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


_WHEEL = _color_wheel()


def flow_to_color(flow: np.ndarray, max_rad: float | None = None) -> np.ndarray:
    """Render a flow field as the standard color-wheel image (H, W, 3) uint8.

    Direction maps to hue, magnitude to saturation; zero flow is white.
    ``max_rad`` fixes the normalization (defaults to the field's maximum).
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")
    u, v = flow[0], flow[1]
    rad = np.sqrt(u**2 + v**2)
    if max_rad is None:
        max_rad = rad.max()
    scale = max(max_rad, 1e-9)
    u, v, rad = u / scale, v / scale, rad / scale

    ncols = _WHEEL.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    frac = fk - k0
    image = np.zeros((*rad.shape, 3), dtype=np.uint8)
    for ch in range(3):
        col0 = _WHEEL[k0, ch] / 255.0
        col1 = _WHEEL[k1, ch] / 255.0
        col = (1 - frac) * col0 + frac * col1
        col = 1 - np.clip(rad, 0.0, 1.0) * (1 - col)
        image[:, :, ch] = np.floor(255 * col)
    return image

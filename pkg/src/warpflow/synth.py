"""Procedural image pairs with exact ground-truth flow.

Samples are generated backwards: a texture is drawn for frame 2, the analytic
displacement field of a random transform becomes the ground truth, and frame 1
is produced by bilinearly warping frame 2 by that field -- the same sampling
the model uses.  Ground truth is therefore exact by construction and the
warp-consistency invariant holds to floating-point precision rather than to
double-interpolation error.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from . import autodiff as ad
from .flow_ops import FlowField, warp

KINDS = ("translation", "affine", "homography")

#: training mixture from the design defaults: 70% affine, 20% homography,
#: 10% pure translation
DEFAULT_MIX = {"affine": 0.70, "homography": 0.20, "translation": 0.10}


@dataclasses.dataclass
class SyntheticSample:
    """One image pair with exact ground truth.

    frame1/frame2 are 3 x H x W float arrays in [0, 1]; gt_flow maps frame-1
    pixels to their frame-2 positions (p + flow(p)); valid is False where the
    true correspondence leaves the frame.
    """
    frame1: np.ndarray
    frame2: np.ndarray
    gt_flow: FlowField
    valid: np.ndarray                      # H x W bool
    meta: dict

    def __post_init__(self):
        h, w = self.valid.shape
        if self.frame1.shape != (3, h, w) or self.frame2.shape != (3, h, w):
            raise ValueError("frame shapes do not match the validity mask")


# -----------------------------------------------------------------------------
# textures
# -----------------------------------------------------------------------------

def _upsample_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Channels-first bilinear resize of a small lattice (align_corners=False)."""
    c, sh, sw = img.shape
    ys = (np.arange(h) + 0.5) * sh / h - 0.5
    xs = (np.arange(w) + 0.5) * sw / w - 0.5
    y0 = np.clip(np.floor(ys), 0, sh - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, sw - 1).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def gen_texture(seed: int, h: int, w: int) -> np.ndarray:
    """Band-limited multi-octave value noise plus a random color gradient.

    Deterministic per seed; returns 3 x h x w float64 in [0, 1].
    """
    if h < 8 or w < 8:
        raise ValueError(f"texture size must be at least 8x8, got {h}x{w}")
    rng = np.random.default_rng(seed)
    octaves = int(np.log2(min(h, w))) - 1
    img = np.zeros((3, h, w))
    amp = 1.0
    for o in range(octaves):
        lh = max(2, h >> (octaves - o))
        lw = max(2, w >> (octaves - o))
        lattice = rng.random((3, lh, lw))
        img += amp * _upsample_bilinear(lattice, h, w)
        amp *= 0.55
    # low-frequency color ramp so plain translations are observable everywhere
    gx = rng.normal(size=(3, 1, 1))
    gy = rng.normal(size=(3, 1, 1))
    ramp = gx * np.linspace(-0.5, 0.5, w)[None, None, :] \
        + gy * np.linspace(-0.5, 0.5, h)[None, :, None]
    img += 0.5 * ramp
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    return (img - lo) / np.maximum(hi - lo, 1e-12)


# -----------------------------------------------------------------------------
# transforms
# -----------------------------------------------------------------------------

def _sample_transform(rng, kind: str, h: int, w: int, max_disp: float) -> np.ndarray:
    """Random 3x3 homogeneous matrix mapping frame-1 pixel coords to frame 2."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    if kind == "translation":
        t = rng.uniform(-max_disp, max_disp, size=2)
        mat = np.eye(3)
        mat[0, 2], mat[1, 2] = t
        return mat
    # rotation/scale/shear about the image center plus translation
    theta = rng.uniform(-0.35, 0.35)
    scale = rng.uniform(0.85, 1.15, size=2)
    shear = rng.uniform(-0.15, 0.15)
    a = np.array([[np.cos(theta) * scale[0], (-np.sin(theta) + shear) * scale[1]],
                  [np.sin(theta) * scale[0], np.cos(theta) * scale[1]]])
    t = rng.uniform(-max_disp / 2, max_disp / 2, size=2)
    mat = np.eye(3)
    mat[:2, :2] = a
    mat[:2, 2] = t + [cx, cy] - a @ [cx, cy]
    if kind == "homography":
        mat[2, :2] = rng.uniform(-0.5, 0.5, size=2) / max(h, w) ** 2 * max_disp
    return mat


def _flow_of(mat: np.ndarray, h: int, w: int) -> np.ndarray:
    """Analytic displacement field (2 x h x w, [dx, dy]) of a homography."""
    jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    denom = mat[2, 0] * jj + mat[2, 1] * ii + mat[2, 2]
    if np.any(np.abs(denom) < 1e-8):
        raise FloatingPointError("transform degenerate on the pixel grid")
    x2 = (mat[0, 0] * jj + mat[0, 1] * ii + mat[0, 2]) / denom
    y2 = (mat[1, 0] * jj + mat[1, 1] * ii + mat[1, 2]) / denom
    return np.stack([x2 - jj, y2 - ii])


def probe_flow(mat: np.ndarray, x: float, y: float) -> tuple[float, float]:
    """Scalar displacement of one pixel under a homogeneous transform.

    Oracle-shaped helper: computes the same quantity as :func:`_flow_of`
    one coordinate at a time.
    """
    p = mat @ np.array([x, y, 1.0])
    return p[0] / p[2] - x, p[1] / p[2] - y


# -----------------------------------------------------------------------------
# pair generation
# -----------------------------------------------------------------------------

def gen_pair(seed: int, kind: str = "affine", max_disp: float = 8.0,
             size: tuple[int, int] = (64, 64)) -> SyntheticSample:
    """Generate one sample; resamples transforms until max_disp is respected."""
    h, w = size
    if kind not in KINDS:
        raise ValueError(f"unknown transform kind {kind!r}; expected one of {KINDS}")
    if not max_disp < min(h, w) / 4:
        raise ValueError(f"max_disp={max_disp} too large for a {h}x{w} frame")

    rng = np.random.default_rng(seed)
    frame2 = gen_texture(seed ^ 0x5EED, h, w)
    for _ in range(64):
        mat = _sample_transform(rng, kind, h, w, max_disp)
        if abs(np.linalg.det(mat)) < 1e-6:
            continue                                  # degenerate; redraw
        try:
            flow = _flow_of(mat, h, w)
        except FloatingPointError:
            continue
        mag = np.hypot(flow[0], flow[1]).max()
        if mag <= max_disp:
            break
        # shrink toward the identity and retry with the blended transform
        mat = np.eye(3) + (mat - np.eye(3)) * (max_disp / mag) * 0.95
        flow = _flow_of(mat, h, w)
        if np.hypot(flow[0], flow[1]).max() <= max_disp:
            break
    else:
        raise RuntimeError("could not sample an admissible transform")

    gt = FlowField(ad.Tensor(flow[None]))
    warped, in_bounds = warp(ad.Tensor(frame2[None]), gt)
    return SyntheticSample(
        frame1=warped.data[0],
        frame2=frame2,
        gt_flow=gt,
        valid=in_bounds[0, 0],
        meta={"kind": kind, "seed": int(seed), "max_disp": float(max_disp),
              "matrix": mat.tolist()},
    )


def sample_kind(rng, mix: Optional[dict] = None) -> str:
    mix = DEFAULT_MIX if mix is None else mix
    kinds = list(mix)
    probs = np.array([mix[k] for k in kinds], dtype=float)
    return kinds[rng.choice(len(kinds), p=probs / probs.sum())]


def gen_batch(seed: int, n: int, max_disp: float = 8.0,
              size: tuple[int, int] = (64, 64), mix: Optional[dict] = None,
              dtype=np.float32):
    """A training batch: (frame1, frame2, gt_flow, valid) stacked over n samples."""
    rng = np.random.default_rng(seed)
    samples = [gen_pair(int(rng.integers(2 ** 62)), sample_kind(rng, mix),
                        max_disp, size) for _ in range(n)]
    f1 = np.stack([s.frame1 for s in samples]).astype(dtype)
    f2 = np.stack([s.frame2 for s in samples]).astype(dtype)
    gt = np.stack([s.gt_flow.data.data[0] for s in samples]).astype(dtype)
    valid = np.stack([s.valid for s in samples])
    return f1, f2, gt, valid

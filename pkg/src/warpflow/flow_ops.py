"""Differentiable feature-indexing strategies for iterative flow estimation.

Three interchangeable ways to fetch frame-2 information at the current flow
estimate: backward warping, a full all-pairs cost volume, and an on-the-fly
partial cost volume over a (2r+1)^2 neighborhood per pyramid scale. Plus
convex upsampling and flow rescaling.

Conventions: pixel (0,0) is the center of the top-left pixel; samples outside
[0, w-1] x [0, h-1] contribute zero and are flagged out-of-bounds; bilinear
sampling at exact integer coordinates reads the lattice value with weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

__all__ = [
    "FlowField",
    "CostVolume",
    "PixelCoord",
    "warp",
    "full_cost_volume",
    "partial_cost_volume",
    "build_pyramid",
    "convex_upsample",
    "rescale_flow",
]


@dataclass
class PixelCoord:
    """Continuous pixel coordinate, origin at the center of pixel (0,0)."""
    x: float
    y: float


@dataclass
class FlowField:
    """Per-pixel 2D displacement map: channel 0 = u (horizontal), 1 = v."""

    data: Tensor                                # N x 2 x h x w
    valid: Optional[np.ndarray] = None          # N x 1 x h x w bool

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 2:
            raise DimensionError(f"flow must be Nx2xhxw, got {self.data.shape}")
        if self.valid is not None:
            n, _, h, w = self.data.shape
            if self.valid.shape != (n, 1, h, w):
                raise DimensionError(
                    f"valid mask {self.valid.shape} does not match flow {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    def numpy(self) -> np.ndarray:
        return self.data.numpy()

    @staticmethod
    def zeros(n: int, h: int, w: int, dtype=np.float64) -> "FlowField":
        return FlowField(ad.zeros((n, 2, h, w), dtype=dtype))


@dataclass
class CostVolume:
    kind: str                                   # "full" | "partial"
    data: Tensor
    radius: int = 0
    scales: int = 1
    source_resolution: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in ("full", "partial"):
            raise ValueError(f"unknown cost volume kind '{self.kind}'")
        if self.kind == "partial":
            expect = (2 * self.radius + 1) ** 2 * self.scales
            if self.data.shape[1] != expect:
                raise DimensionError(
                    f"partial volume has {self.data.shape[1]} channels, expected {expect}")


# -----------------------------------------------------------------------------
# bilinear corner machinery shared by warp and partial cost volume
# -----------------------------------------------------------------------------

def _corners(xs: np.ndarray, ys: np.ndarray, h: int, w: int):
    """Corner indices, weights, and validity for zero-padded bilinear sampling.

    Returns lists over the 4 corners of (yi, xi, weight, valid_mask) with
    indices clipped for safe gathering.
    """
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    out = []
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi = y0 + dy
        xi = x0 + dx
        ok = (yi >= 0) & (yi <= h - 1) & (xi >= 0) & (xi <= w - 1)
        out.append((np.clip(yi, 0, h - 1).astype(np.intp),
                    np.clip(xi, 0, w - 1).astype(np.intp),
                    wgt, ok))
    return out, fx, fy


def _weight_grads(fx, fy):
    """(d(weight)/dx, d(weight)/dy) per corner, same order as _corners."""
    return (((fy - 1), (fx - 1)), ((1 - fy), -fx), (-fy, (1 - fx)), (fy, fx))


# -----------------------------------------------------------------------------
# warp
# -----------------------------------------------------------------------------

def warp(features: Tensor, flow: FlowField) -> tuple[Tensor, np.ndarray]:
    """Backward-warp frame-2 features to frame 1 by the current flow.

    Samples features at p + flow(p) with zero-padded bilinear interpolation.
    Returns the warped map and an in-bounds mask (N x 1 x h x w bool).
    Differentiable w.r.t. both the features and the flow.
    """
    n, d, h, w = features.shape
    if flow.resolution != (h, w) or flow.shape[0] != n:
        raise DimensionError(
            f"flow {flow.shape} does not match features {features.shape}")

    u = flow.data.data[:, 0]
    v = flow.data.data[:, 1]
    jj = np.arange(w, dtype=features.dtype)
    ii = np.arange(h, dtype=features.dtype)
    xs = u + jj[None, None, :]
    ys = v + ii[None, :, None]

    corners, fx, fy = _corners(xs, ys, h, w)
    bidx = np.arange(n)[:, None, None]
    fdat = features.data
    gathered = [fdat[bidx, :, yi, xi].transpose(0, 3, 1, 2) for yi, xi, _, _ in corners]
    out = np.zeros_like(fdat)
    for (yi, xi, wgt, ok), gval in zip(corners, gathered):
        out += (wgt * ok)[:, None] * gval

    in_bounds = ((xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1))[:, None]

    wgrads = _weight_grads(fx, fy)

    def bwd(g):
        if features.requires_grad:
            gf = np.zeros_like(fdat)
            for yi, xi, wgt, ok in corners:
                contrib = (wgt * ok)[:, None] * g
                np.add.at(gf.transpose(0, 2, 3, 1), (bidx, yi, xi),
                          contrib.transpose(0, 2, 3, 1))
            features._accum(gf)
        if flow.data.requires_grad:
            gx = np.zeros((n, h, w), dtype=g.dtype)
            gy = np.zeros((n, h, w), dtype=g.dtype)
            for (yi, xi, wgt, ok), gval, (dwx, dwy) in zip(corners, gathered, wgrads):
                dot = (gval * g).sum(axis=1)
                gx += dwx * ok * dot
                gy += dwy * ok * dot
            flow.data._accum(np.stack([gx, gy], axis=1))

    warped = ad._make(out, "warp", (features, flow.data), bwd)
    return warped, in_bounds


# -----------------------------------------------------------------------------
# cost volumes
# -----------------------------------------------------------------------------

def full_cost_volume(f1: Tensor, f2: Tensor) -> CostVolume:
    """All-pairs dot products V[p, p'] between per-pixel feature vectors."""
    if f1.shape != f2.shape:
        raise DimensionError(f"shape mismatch: {f1.shape} vs {f2.shape}")
    n, d, h, w = f1.shape
    a = f1.data.reshape(n, d, h * w)
    b = f2.data.reshape(n, d, h * w)
    vol = np.einsum("ndp,ndq->npq", a, b, optimize=True)
    out = vol.reshape(n, h * w, h, w)

    def bwd(g):
        gv = g.reshape(n, h * w, h * w)
        if f1.requires_grad:
            f1._accum(np.einsum("npq,ndq->ndp", gv, b, optimize=True).reshape(f1.shape))
        if f2.requires_grad:
            f2._accum(np.einsum("npq,ndp->ndq", gv, a, optimize=True).reshape(f2.shape))

    data = ad._make(out, "full_cost_volume", (f1, f2), bwd)
    return CostVolume("full", data, source_resolution=(h, w))


def build_pyramid(f2: Tensor, scales: int) -> list[Tensor]:
    """Successive 2x average-pooled copies of f2 (scale 0 is f2 itself)."""
    if scales < 1:
        raise ValueError("need at least one scale")
    pyr = [f2]
    for _ in range(scales - 1):
        pyr.append(ad.avg_pool2d(pyr[-1], 2))
    return pyr


def partial_cost_volume(f1: Tensor, f2_pyramid: Sequence[Tensor],
                        flow: FlowField, r: int) -> CostVolume:
    """On-the-fly neighborhood correlation around the flow-displaced position.

    For each pixel p and scale s, takes the dot product of f1_p with frame-2
    features sampled at (p + flow_p) / 2^s + delta for every offset with
    \\|delta\\|_inf <= r. Never materializes the full volume; backward
    recomputes the interpolation weights, so only the output counts as a
    retained activation.
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    if len(f2_pyramid) == 0:
        raise ValueError("empty feature pyramid")
    n, d, h, w = f1.shape
    if flow.resolution != (h, w):
        raise DimensionError("flow must be at f1's resolution")

    k = 2 * r + 1
    s_count = len(f2_pyramid)
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]

    u = flow.data.data[:, 0]
    v = flow.data.data[:, 1]
    jj = np.arange(w, dtype=f1.dtype)
    ii = np.arange(h, dtype=f1.dtype)
    px = u + jj[None, None, :]
    py = v + ii[None, :, None]
    bidx = np.arange(n)[:, None, None]
    f1dat = f1.data

    out = np.zeros((n, k * k * s_count, h, w), dtype=f1.dtype)
    for s, f2s in enumerate(f2_pyramid):
        hs, ws = f2s.shape[2], f2s.shape[3]
        bx = px / (2 ** s)
        by = py / (2 ** s)
        fdat = f2s.data
        for o, (dy, dx) in enumerate(offsets):
            corners, _, _ = _corners(bx + dx, by + dy, hs, ws)
            ch = np.zeros((n, h, w), dtype=f1.dtype)
            for yi, xi, wgt, ok in corners:
                gval = fdat[bidx, :, yi, xi].transpose(0, 3, 1, 2)
                ch += (wgt * ok) * np.einsum("ndhw,ndhw->nhw", f1dat, gval)
            out[:, s * k * k + o] = ch

    def bwd(g):
        need_flow = flow.data.requires_grad
        gx = np.zeros((n, h, w), dtype=g.dtype) if need_flow else None
        gy = np.zeros((n, h, w), dtype=g.dtype) if need_flow else None
        gf1 = np.zeros_like(f1dat) if f1.requires_grad else None
        for s, f2s in enumerate(f2_pyramid):
            hs, ws = f2s.shape[2], f2s.shape[3]
            bx = px / (2 ** s)
            by = py / (2 ** s)
            fdat = f2s.data
            gf2 = np.zeros_like(fdat) if f2s.requires_grad else None
            for o, (dy, dx) in enumerate(offsets):
                gc = g[:, s * k * k + o]                    # N,h,w
                corners, fx, fy = _corners(bx + dx, by + dy, hs, ws)
                wgrads = _weight_grads(fx, fy)
                for (yi, xi, wgt, ok), (dwx, dwy) in zip(corners, wgrads):
                    gval = fdat[bidx, :, yi, xi].transpose(0, 3, 1, 2)
                    if gf1 is not None:
                        gf1 += ((wgt * ok) * gc)[:, None] * gval
                    if gf2 is not None:
                        contrib = ((wgt * ok) * gc)[:, None] * f1dat
                        np.add.at(gf2.transpose(0, 2, 3, 1), (bidx, yi, xi),
                                  contrib.transpose(0, 2, 3, 1))
                    if need_flow:
                        dot = np.einsum("ndhw,ndhw->nhw", f1dat, gval)
                        gx += dwx * ok * gc * dot / (2 ** s)
                        gy += dwy * ok * gc * dot / (2 ** s)
            if gf2 is not None:
                f2s._accum(gf2)
        if gf1 is not None:
            f1._accum(gf1)
        if need_flow:
            flow.data._accum(np.stack([gx, gy], axis=1))

    parents = (f1, *f2_pyramid, flow.data)
    data = ad._make(out, "partial_cost_volume", parents, bwd)
    return CostVolume("partial", data, radius=r, scales=s_count,
                      source_resolution=(h, w))


# -----------------------------------------------------------------------------
# convex upsampling and rescaling
# -----------------------------------------------------------------------------

def convex_upsample(flow: FlowField, mask_logits: Tensor, s: int) -> FlowField:
    """Upsample coarse flow by factor s with learned convex combinations.

    Each fine pixel is a softmax-weighted mixture of its 3x3 coarse
    neighborhood (edge-clamped, so constants are preserved), then scaled by s
    to convert displacement units.
    """
    n, _, h, w = flow.shape
    return FlowField(convex_combine(flow.data, mask_logits, s, unit_scale=float(s)))


def convex_combine(x: Tensor, mask_logits: Tensor, s: int,
                   unit_scale: float = 1.0) -> Tensor:
    """Mask-weighted s-fold upsampling of an arbitrary channel map.

    The shared primitive behind convex_upsample; unit_scale multiplies the
    output (s for displacement channels, 1 for anything unitless).
    """
    if s < 1:
        raise ValueError("factor must be >= 1")
    n, c, h, w = x.shape
    if mask_logits.shape != (n, 9 * s * s, h, w):
        raise DimensionError(
            f"mask logits {mask_logits.shape}, expected {(n, 9 * s * s, h, w)}")

    logits = ad.reshape(mask_logits, (n, 9, s * s, h, w))
    m = ad.softmax(logits, axis=1)

    # edge-clamped 3x3 neighborhood of the coarse map: N,C,9,h,w
    fdat = x.data
    yy = np.arange(h)
    xx = np.arange(w)
    neigh_idx = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            neigh_idx.append((np.clip(yy + dy, 0, h - 1), np.clip(xx + dx, 0, w - 1)))
    neigh = np.stack([fdat[:, :, iy[:, None], ix[None, :]] for iy, ix in neigh_idx], axis=2)

    mdat = m.data                                            # N,9,s^2,h,w
    up = unit_scale * np.einsum("nkqhw,nckhw->ncqhw", mdat, neigh, optimize=True)
    # q index = di*s+dj maps to fine offset (di, dj) inside the coarse cell
    out = up.reshape(n, c, s, s, h, w) \
            .transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def bwd(g):
        gq = g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4) \
              .reshape(n, c, s * s, h, w)
        if m.requires_grad:
            gm = unit_scale * np.einsum("ncqhw,nckhw->nkqhw", gq, neigh, optimize=True)
            m._accum(gm)
        if x.requires_grad:
            gn = unit_scale * np.einsum("nkqhw,ncqhw->nckhw", mdat, gq, optimize=True)
            gx = np.zeros_like(fdat)
            for kk, (iy, ix) in enumerate(neigh_idx):
                np.add.at(gx, (slice(None), slice(None), iy[:, None], ix[None, :]),
                          gn[:, :, kk])
            x._accum(gx)

    return ad._make(np.ascontiguousarray(out), "convex_upsample", (x, m), bwd)


def rescale_flow(flow: FlowField, out_h: int, out_w: int) -> FlowField:
    """Bilinearly resize a flow field, rescaling displacement units to match."""
    n, _, h, w = flow.shape
    if (out_h, out_w) == (h, w):
        return flow
    resized = ad.bilinear_resize(flow.data, out_h, out_w)
    factor = np.array([out_w / w, out_h / h], dtype=flow.data.dtype).reshape(1, 2, 1, 1)
    return FlowField(resized * Tensor(factor))

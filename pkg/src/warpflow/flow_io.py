"""Flow file formats (.flo, KITTI 16-bit PNG) and color-wheel rendering."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from . import autodiff as ad
from .flow_ops import FlowField

FLO_MAGIC = 202021.25
_KITTI_OFFSET = 2 ** 15
_KITTI_SCALE = 64.0


class FlowFormatError(ValueError):
    """Malformed or unsupported flow file contents."""


# -----------------------------------------------------------------------------
# Middlebury .flo
# -----------------------------------------------------------------------------

def write_flo(path, flow: FlowField) -> None:
    """Little-endian .flo: magic float, width, height, interleaved (u,v) rows."""
    if flow.shape[0] != 1:
        raise FlowFormatError(".flo holds a single field; got a batch")
    data = flow.data.data[0]
    if not np.all(np.isfinite(data)):
        raise FlowFormatError("refusing to write non-finite flow values")
    h, w = flow.resolution
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(data.transpose(1, 2, 0).astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, w, h = struct.unpack_from("<fii", raw)
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if w < 1 or h < 1 or w > 10 ** 6 or h > 10 ** 6:
        raise FlowFormatError(f"{path}: implausible dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FlowFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(ad.Tensor(data.transpose(2, 0, 1)[None].astype(np.float32)))


# -----------------------------------------------------------------------------
# KITTI 16-bit PNG
# -----------------------------------------------------------------------------

def write_kitti_png(path, flow: FlowField, valid: Optional[np.ndarray] = None) -> None:
    """stored = round(flow * 64 + 2^15) per channel; third channel = validity."""
    if flow.shape[0] != 1:
        raise FlowFormatError("KITTI PNG holds a single field; got a batch")
    data = flow.data.data[0]
    if np.abs(data).max() >= 512:
        raise FlowFormatError("KITTI encoding requires |flow| < 512")
    h, w = flow.resolution
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    enc = np.rint(data.astype(np.float64) * _KITTI_SCALE + _KITTI_OFFSET).astype(np.uint16)
    img = np.zeros((h, w, 3), dtype=np.uint16)
    # cv2 writes BGR, so channel order on disk is (valid, v, u)
    img[:, :, 2] = enc[0]
    img[:, :, 1] = enc[1]
    img[:, :, 0] = valid.astype(np.uint16)
    if not cv2.imwrite(str(path), img):
        raise FlowFormatError(f"could not write {path}")


def read_kitti_png(path) -> tuple[FlowField, np.ndarray]:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FlowFormatError(f"{path}: unreadable image")
    if img.dtype != np.uint16 or img.ndim != 3 or img.shape[2] != 3:
        raise FlowFormatError(f"{path}: expected a 3-channel 16-bit PNG")
    valid = img[:, :, 0] > 0
    u = (img[:, :, 2].astype(np.float64) - _KITTI_OFFSET) / _KITTI_SCALE
    v = (img[:, :, 1].astype(np.float64) - _KITTI_OFFSET) / _KITTI_SCALE
    flow = np.stack([u, v]).astype(np.float32)
    flow[:, ~valid] = 0.0
    return FlowField(ad.Tensor(flow[None])), valid


# -----------------------------------------------------------------------------
# color wheel
# -----------------------------------------------------------------------------

#: Reference anchors for unit vectors under max_magnitude=1, as (dx, dy) ->
#: RGB in [0,1]. Hue = atan2(v, u) with 0deg=red; full saturation at unit
#: magnitude. Used by the visualization tests.
WHEEL_ANCHORS = {
    (1.0, 0.0): (1.0, 0.0, 0.0),       # east   -> red (hue 0deg)
    (0.0, 1.0): (0.5, 1.0, 0.0),       # south  -> chartreuse (hue 90deg)
    (-1.0, 0.0): (0.0, 1.0, 1.0),      # west   -> cyan (hue 180deg)
    (0.0, -1.0): (0.5, 0.0, 1.0),      # north  -> violet (hue 270deg)
}


def flow_to_color(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """HSV color-wheel rendering; zero flow is white. Returns 3 x H x W in [0,1]."""
    data = flow.data.data[0] if flow.shape[0] == 1 else flow.data.data
    if data.ndim != 3:
        raise FlowFormatError("flow_to_color renders a single field")
    u, v = data[0].astype(np.float64), data[1].astype(np.float64)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99))
    norm = np.clip(mag / max(max_magnitude, 1e-12), 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0     # [0,1), 0 = east = red
    h6 = hue * 6.0
    # saturation ramps with magnitude so zero flow renders white
    c = norm
    x = c * (1.0 - np.abs(h6 % 2 - 1.0))
    sector = np.floor(h6).astype(int) % 6
    zeros = np.zeros_like(c)
    rgb_by_sector = [(c, x, zeros), (x, c, zeros), (zeros, c, x),
                     (zeros, x, c), (x, zeros, c), (c, zeros, x)]
    rgb = np.zeros((3, *mag.shape))
    for s, (r, g, b) in enumerate(rgb_by_sector):
        m = sector == s
        rgb[0][m], rgb[1][m], rgb[2][m] = r[m], g[m], b[m]
    return rgb + (1.0 - norm)                        # lift toward white


def save_color_png(path, flow: FlowField, max_magnitude: Optional[float] = None) -> None:
    rgb = flow_to_color(flow, max_magnitude)
    bgr = (np.clip(rgb[::-1], 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
    if not cv2.imwrite(str(path), bgr):
        raise FlowFormatError(f"could not write {path}")

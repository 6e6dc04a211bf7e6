"""Evaluation metrics: EPE, 1px / Fl outlier rates, and WAUC.

All metrics are computed in 64-bit over valid-mask pixels only, independent
of training precision. Fl follows the KITTI rule (error > 3 px and > 5% of
the ground-truth magnitude); WAUC follows the Spring convention (thresholds
sweeping (0, 5] in 100 steps with linearly decreasing weights).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import DimensionError
from .flow_ops import FlowField

__all__ = ["MetricReport", "endpoint_error", "outlier_rates", "wauc", "evaluate_flow"]


@dataclass
class MetricReport:
    epe: float
    px1: float          # percent of valid pixels with EPE > 1
    fl: float           # percent, KITTI outlier rule
    wauc: float         # percent, Spring weighted AUC
    pixel_count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @staticmethod
    def from_json(s: str) -> "MetricReport":
        d = json.loads(s)
        return MetricReport(epe=float(d["epe"]), px1=float(d["px1"]),
                            fl=float(d["fl"]), wauc=float(d["wauc"]),
                            pixel_count=int(d["pixel_count"]))


def _as_arrays(pred: FlowField, gt: FlowField, valid):
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    p = pred.data.numpy().astype(np.float64)
    g = gt.data.numpy().astype(np.float64)
    if valid is None:
        valid = np.ones((p.shape[0], p.shape[2], p.shape[3]), dtype=bool)
    elif valid.ndim == 4:
        valid = valid[:, 0]
    return p, g, valid.astype(bool)


def endpoint_error(pred: FlowField, gt: FlowField, valid=None):
    """Per-pixel Euclidean flow error and its mean over valid pixels."""
    p, g, v = _as_arrays(pred, gt, valid)
    d = p - g
    epe = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)
    mean = float(epe[v].mean()) if v.any() else 0.0
    return epe, mean


def outlier_rates(pred: FlowField, gt: FlowField, valid=None) -> tuple[float, float]:
    """(1px, Fl) outlier percentages over valid pixels."""
    p, g, v = _as_arrays(pred, gt, valid)
    epe, _ = endpoint_error(pred, gt, valid)
    if not v.any():
        return 0.0, 0.0
    e = epe[v]
    mag = np.sqrt(g[:, 0] ** 2 + g[:, 1] ** 2)[v]
    px1 = 100.0 * float((e > 1.0).mean())
    fl = 100.0 * float(((e > 3.0) & (e > 0.05 * mag)).mean())
    return px1, fl


def wauc(pred: FlowField, gt: FlowField, valid=None) -> float:
    """Weighted area under the inlier-fraction curve over thresholds (0, 5]."""
    _, _, v = _as_arrays(pred, gt, valid)
    epe, _ = endpoint_error(pred, gt, valid)
    if not v.any():
        return 0.0
    e = epe[v]
    delta = 5.0 / 100.0
    thresholds = delta * np.arange(1, 101)
    weights = 1.0 - (thresholds - delta) / 5.0
    inlier = (e[None, :] <= thresholds[:, None]).mean(axis=1)
    return 100.0 * float((weights * inlier).sum() / weights.sum())


def evaluate_flow(pred: FlowField, gt: FlowField, valid=None) -> MetricReport:
    _, epe_mean = endpoint_error(pred, gt, valid)
    px1, fl = outlier_rates(pred, gt, valid)
    w = wauc(pred, gt, valid)
    if valid is None:
        count = int(np.prod(pred.shape[0:1] + pred.shape[2:]))
    else:
        count = int(valid.sum())
    return MetricReport(epe=epe_mean, px1=px1, fl=fl, wauc=w, pixel_count=count)

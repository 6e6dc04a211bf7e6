"""Mixture-of-Laplace training loss over the refinement sequence.

Per axis, the predicted residual distribution mixes a unit-scale Laplace with
a learned-scale Laplace: p(e) = w * Lap(e; 0, 1) + (1 - w) * Lap(e; 0, b),
with w = sigmoid(mixing logit) and b = exp(log-scale). The six parameter
channels are ordered [mu_x, mu_y, alpha_x, alpha_y, logb_x, logb_y].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .flow_ops import FlowField

__all__ = ["MoLParams", "mol_nll", "sequence_loss"]

_LOG2 = math.log(2.0)

MU = slice(0, 2)
ALPHA = slice(2, 4)
LOGB = slice(4, 6)


@dataclass
class MoLParams:
    """Six-channel per-pixel mixture parameters."""

    data: Tensor                                # N x 6 x h x w

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != 6:
            raise DimensionError(f"MoL params must be Nx6xhxw, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    def mean_flow(self) -> FlowField:
        """The mu channels read as a flow prediction."""
        return FlowField(self.data[:, MU])


def mol_nll(params: MoLParams, gt_flow: FlowField,
            valid: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood over valid pixels and both axes.

    Computed in log space (logaddexp of the two mixture branches) so that
    extreme mixing logits or scales cannot underflow to log(0).
    """
    n, _, h, w = params.shape
    if gt_flow.shape != (n, 2, h, w):
        raise DimensionError(
            f"ground truth {gt_flow.shape} does not match params {params.shape}")
    if valid is None:
        valid = np.ones((n, 1, h, w), dtype=bool)
    elif valid.ndim == 3:
        valid = valid[:, None]
    count = float(valid.sum())
    if count == 0:
        warnings.warn("mol_nll: empty valid mask, loss defined as zero")
        return ad.zeros((), dtype=params.data.dtype)

    mu = params.data[:, MU]
    alpha = params.data[:, ALPHA]
    logb = params.data[:, LOGB]

    e = (gt_flow.data.detach() - mu).abs()
    log_w = -ad.softplus(-alpha)                # log sigmoid(alpha)
    log_1mw = -ad.softplus(alpha)
    branch1 = log_w - _LOG2 - e
    branch2 = log_1mw - _LOG2 - logb - e * ad.exp(-logb)
    nll = -ad.logaddexp(branch1, branch2)       # N x 2 x h x w

    mask = Tensor(valid.astype(params.data.dtype))
    return (nll * mask).sum() * (1.0 / (2.0 * count))


def sequence_loss(per_step_params: Sequence[MoLParams], gt: FlowField,
                  valid: Optional[np.ndarray] = None, gamma: float = 0.85) -> Tensor:
    """Exponentially weighted sum of per-iteration losses (late steps weigh more)."""
    t_total = len(per_step_params)
    if t_total == 0:
        raise ValueError("empty prediction sequence")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must be in (0, 1]")
    total = None
    for t, params in enumerate(per_step_params):
        term = mol_nll(params, gt, valid) * (gamma ** (t_total - 1 - t))
        total = term if total is None else total + term
    return total

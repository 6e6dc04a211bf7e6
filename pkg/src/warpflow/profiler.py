"""Activation-memory and MAC accounting for the indexing strategies.

Memory is counted in activation floats retained for the backward pass, not
allocator bytes: allocator behavior is platform noise, while the claims being
reproduced (cost-volume indexing runs out of memory first, warping scales
linearly with pixels) are structural. Analytic formulas are cross-checked
against the tensor engine's live allocations in the test suite.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from typing import Optional

import numpy as np

from . import autodiff as ad
from .flow_ops import FlowField
from .losses import sequence_loss
from .model import FlowModel, ModelConfig, count_macs

STRATEGIES = ("warp", "partial_cv", "full_cv")


@dataclasses.dataclass
class OpRecord:
    name: str
    shape: tuple
    floats: int


@dataclasses.dataclass
class MemoryLedger:
    """Per-op activation accounting for one forward(+backward) pass.

    With no gradient checkpointing every activation stays live until its
    backward rule has run, so the peak live set equals the sum of all
    retained activations plus inputs; total_floats is that sum.
    """
    records: list[OpRecord]
    meta: dict

    @property
    def total_floats(self) -> int:
        return sum(r.floats for r in self.records)

    def by_op(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.name] = out.get(r.name, 0) + r.floats
        return out


# -----------------------------------------------------------------------------
# analytic indexing profiles
# -----------------------------------------------------------------------------

def profile_indexing(strategy: str, h: int, w: int, d: int,
                     r: int = 4, scales: int = 4, steps: int = 1) -> MemoryLedger:
    """Closed-form activation floats for one indexing strategy.

    Per step: warp retains h*w*d (the warped feature map); partial cost
    volume retains h*w*(2r+1)^2*scales lookup values and additionally holds
    the feature pyramid sum_s h*w*d/4^s once; the full volume retains
    (h*w)^2 once, since it is built a single time and kept for backward.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if min(h, w, d, r, scales, steps) < 1:
        raise ValueError("dimensions must be positive")
    recs = []
    if strategy == "warp":
        for t in range(steps):
            recs.append(OpRecord("warp", (d, h, w), h * w * d))
    elif strategy == "partial_cv":
        pyramid = sum(h * w * d // 4 ** s for s in range(scales))
        recs.append(OpRecord("pyramid", (scales, d, h, w), pyramid))
        per_step = h * w * (2 * r + 1) ** 2 * scales
        for t in range(steps):
            recs.append(OpRecord("partial_cost_volume",
                                 ((2 * r + 1) ** 2 * scales, h, w), per_step))
    else:
        recs.append(OpRecord("full_cost_volume", (h * w, h, w), (h * w) ** 2))
    return MemoryLedger(recs, {"strategy": strategy, "h": h, "w": w, "d": d,
                               "r": r, "scales": scales, "steps": steps})


# -----------------------------------------------------------------------------
# traced model profiles
# -----------------------------------------------------------------------------

def measure_live_floats(root: ad.Tensor) -> int:
    """Sum of distinct non-leaf buffers reachable from a loss tensor.

    Direct measurement of what the engine actually keeps alive for backward;
    used to cross-check the traced ledger within 10%.
    """
    seen_t = set()
    seen_buf = set()
    total = 0
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen_t:
            continue
        seen_t.add(id(t))
        if t._op != "leaf" and id(t.data) not in seen_buf:
            seen_buf.add(id(t.data))
            total += t.data.size
        stack.extend(t._parents)
    return total


def profile_model(config: ModelConfig, input_shape: tuple = (1, 3, 64, 64),
                  seed: int = 0, with_backward: bool = False
                  ) -> tuple[MemoryLedger, int]:
    """Trace one forward pass (optionally + backward) and count MACs."""
    model = FlowModel(config, seed=seed)
    n, c, h, w = input_shape
    rng = np.random.default_rng(seed)
    i1 = ad.Tensor(rng.random((n, c, h, w)).astype(config.np_dtype))
    i2 = ad.Tensor(rng.random((n, c, h, w)).astype(config.np_dtype))
    gt = FlowField(ad.Tensor(np.zeros((n, 2, h, w), dtype=config.np_dtype)))
    tracer = ad.trace_context()
    with tracer:
        result = model.forward(i1, i2)
        loss = sequence_loss(result.mols, gt)
        if with_backward:
            loss.backward()
    recs = [OpRecord(name, shape, floats) for name, shape, floats in tracer.records]
    ledger = MemoryLedger(recs, {"config": config.to_dict(),
                                 "input_shape": tuple(input_shape)})
    macs = count_macs(config, input_shape)
    # keep the loss reachable for callers that want the live measurement
    ledger.meta["measured_live_floats"] = measure_live_floats(loss)
    return ledger, macs


# -----------------------------------------------------------------------------
# table emitters
# -----------------------------------------------------------------------------

def bench_grid(base: int = 64, d: int = 64, r: int = 4, scales: int = 4,
               steps: int = 5,
               fractions: tuple = (8, 4, 2)) -> list[dict]:
    """Strategy x resolution grid shaped like the paper's memory table."""
    rows = []
    for strategy in STRATEGIES:
        for frac in fractions:
            h = w = base // frac
            led = profile_indexing(strategy, h, w, d, r, scales, steps)
            rows.append({
                "strategy": strategy,
                "resolution": f"1/{frac}",
                "h": h, "w": w, "d": d, "r": r, "scales": scales, "steps": steps,
                "activation_floats": led.total_floats,
            })
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def rows_to_markdown(rows: list[dict], columns: Optional[list[str]] = None) -> str:
    columns = columns or list(rows[0])
    lines = ["| " + " | ".join(columns) + " |",
             "|" + "|".join("---" for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(row[c]) for c in columns) + " |")
    return "\n".join(lines) + "\n"

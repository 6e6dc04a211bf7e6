"""Metric oracles: EPE, outlier rates, WAUC, report serialization."""

import numpy as np
import pytest

from warpflow.autodiff import DimensionError, Tensor
from warpflow.flow_ops import FlowField
from warpflow.metrics import (MetricReport, endpoint_error, evaluate_flow,
                              outlier_rates, wauc)


def ff(arr) -> FlowField:
    return FlowField(Tensor(np.asarray(arr, dtype=np.float64)))


def single_pixel(u_err, v_err, gt_mag=(0.0, 0.0)):
    gt = np.zeros((1, 2, 1, 1))
    gt[0, 0], gt[0, 1] = gt_mag
    pred = gt.copy()
    pred[0, 0] += u_err
    pred[0, 1] += v_err
    return ff(pred), ff(gt)


def scalar_metrics(pred, gt, valid):
    """Reference implementation with explicit python loops."""
    epes = []
    n, _, h, w = pred.shape
    for b in range(n):
        for y in range(h):
            for x in range(w):
                if valid[b, y, x]:
                    du = pred[b, 0, y, x] - gt[b, 0, y, x]
                    dv = pred[b, 1, y, x] - gt[b, 1, y, x]
                    epes.append(((du ** 2 + dv ** 2) ** 0.5,
                                 (gt[b, 0, y, x] ** 2 + gt[b, 1, y, x] ** 2) ** 0.5))
    epe = sum(e for e, _ in epes) / len(epes)
    px1 = 100.0 * sum(e > 1 for e, _ in epes) / len(epes)
    fl = 100.0 * sum((e > 3 and e > 0.05 * m) for e, m in epes) / len(epes)
    delta = 5.0 / 100
    num = den = 0.0
    for i in range(1, 101):
        theta = delta * i
        wgt = 1.0 - (theta - delta) / 5.0
        frac = sum(e <= theta for e, _ in epes) / len(epes)
        num += wgt * frac
        den += wgt
    return epe, px1, fl, 100.0 * num / den


class TestPointCases:
    def test_perfect_prediction(self, rng):
        gt = ff(rng.standard_normal((1, 2, 4, 4)))
        _, mean = endpoint_error(gt, gt)
        assert mean == 0.0
        assert outlier_rates(gt, gt) == (0.0, 0.0)
        assert wauc(gt, gt) == 100.0

    def test_three_four_five(self):
        pred, gt = single_pixel(3.0, 4.0)
        _, mean = endpoint_error(pred, gt)
        assert mean == pytest.approx(5.0)

    def test_fl_rule_applies(self):
        pred, gt = single_pixel(5.0, 0.0, gt_mag=(10.0, 0.0))
        px1, fl = outlier_rates(pred, gt)
        assert (px1, fl) == (100.0, 100.0)

    def test_px1_without_fl(self):
        pred, gt = single_pixel(2.5, 0.0)
        px1, fl = outlier_rates(pred, gt)
        assert (px1, fl) == (100.0, 0.0)

    def test_wauc_all_beyond_five(self, rng):
        gt = ff(np.zeros((1, 2, 3, 3)))
        pred = ff(np.full((1, 2, 3, 3), 6.0))
        assert wauc(pred, gt) == 0.0

    def test_wauc_half_and_half(self):
        gt = np.zeros((1, 2, 1, 2))
        pred = np.zeros((1, 2, 1, 2))
        pred[0, 0, 0, 1] = 10.0
        assert wauc(ff(pred), ff(gt)) == pytest.approx(50.0)


class TestScalarLoopOracle:
    def test_hundred_random_fields(self, rng):
        for _ in range(100):
            n, h, w = 1, int(rng.integers(2, 5)), int(rng.integers(2, 5))
            gt = rng.standard_normal((n, 2, h, w)) * 4
            pred = gt + rng.standard_normal((n, 2, h, w)) * rng.random() * 4
            valid = rng.random((n, h, w)) > 0.2
            if not valid.any():
                valid[0, 0, 0] = True
            rep = evaluate_flow(ff(pred), ff(gt), valid)
            e, p1, fl, wa = scalar_metrics(pred, gt, valid)
            assert rep.epe == pytest.approx(e, abs=1e-10)
            assert rep.px1 == pytest.approx(p1, abs=1e-10)
            assert rep.fl == pytest.approx(fl, abs=1e-10)
            assert rep.wauc == pytest.approx(wa, abs=1e-10)
            assert rep.pixel_count == int(valid.sum())


class TestProperties:
    def test_spatial_permutation_invariance(self, rng):
        n, h, w = 1, 4, 4
        gt = rng.standard_normal((n, 2, h, w))
        pred = gt + rng.standard_normal((n, 2, h, w))
        valid = rng.random((n, h, w)) > 0.3
        rep1 = evaluate_flow(ff(pred), ff(gt), valid)
        perm = rng.permutation(h * w)
        def sp(a):
            return a.reshape(*a.shape[:-2], h * w)[..., perm].reshape(a.shape)
        rep2 = evaluate_flow(ff(sp(pred)), ff(sp(gt)), sp(valid))
        assert rep1 == rep2

    def test_report_bounds(self, rng):
        gt = rng.standard_normal((1, 2, 5, 5)) * 10
        pred = rng.standard_normal((1, 2, 5, 5)) * 10
        rep = evaluate_flow(ff(pred), ff(gt))
        assert rep.epe >= 0
        for v in (rep.px1, rep.fl, rep.wauc):
            assert 0 <= v <= 100

    def test_resolution_mismatch(self, rng):
        with pytest.raises(DimensionError):
            endpoint_error(ff(np.zeros((1, 2, 3, 3))), ff(np.zeros((1, 2, 4, 4))))

    def test_json_round_trip(self):
        rep = MetricReport(epe=0.5, px1=12.5, fl=1.25, wauc=88.8, pixel_count=42)
        assert MetricReport.from_json(rep.to_json()) == rep

"""Acceptance gate: nine criteria, one test (and one pass/fail line) each.

Criteria 5 and 6 train real models and are marked slow; everything else runs
in the default suite. Budgets and thresholds marked CALIBRATED were fixed
once from the reference training run and must not be retuned per-run.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from warpflow import autodiff as ad
from warpflow import flow_ops as fo
from warpflow.autodiff import Tensor
from warpflow.flow_ops import FlowField
from warpflow.losses import MoLParams, mol_nll
from warpflow.metrics import evaluate_flow, wauc
from warpflow.model import FlowModel, ModelConfig
from warpflow.profiler import profile_indexing
from warpflow.train import TrainConfig, make_validation_set, train, validate

from conftest import numeric_grad

# ---------------------------------------------------------------------------
# CALIBRATED budgets (frozen from the reference run described below).
# Do not edit to make a failing run pass.
# ---------------------------------------------------------------------------
CONVERGENCE_SEED = 0
CONVERGENCE_MAX_STEPS = 3000
# Frozen from the seed-0 reference run (lr 6e-4, cosine decay): validation
# EPE first crosses 0.80 at step 1899 (0.732, 26.1% 1px outliers) and ends
# at 0.726 / 23.8% by step 2999.  Thresholds carry a modest margin over the
# crossing point.
CONVERGENCE_EPE = 0.80
CONVERGENCE_PX1 = 28.0
# 45 min on the 4-core reference desktop; scaled by core count below.
CONVERGENCE_BUDGET_S = 45 * 60 * 4

ABLATION_SEED = 0
ABLATION_STEPS = 500
ABLATION_MARGIN = 0.05      # relative EPE margin for strict orderings
ABLATION_PARITY = 0.10      # relative EPE band for "performs similarly"


def _passfail(name: str, ok: bool, detail: str = ""):
    print(f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
    assert ok, detail


def _grad_check(build, x, rtol=1e-4, eps=1e-5):
    """Max relative error between analytic and central-difference gradients."""
    out0 = build(Tensor(x))
    w = np.random.default_rng(4242).standard_normal(out0.shape)

    def f(arr):
        return float((build(Tensor(arr)).data * w).sum())

    t = Tensor(x, requires_grad=True)
    (build(t) * Tensor(w)).sum().backward()
    num = numeric_grad(f, x, eps)
    err = np.abs(t.grad - num) / np.maximum(np.abs(num), 1.0)
    return float(err.max())


class TestCriterion1GradientSuite:
    """Central-difference checks, rel. error <= 1e-4, >=20 instances per op."""

    N = 20

    def test_criterion_1(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(11)
        worst = {}

        # elementary autodiff ops through composite expressions
        errs = []
        for _ in range(self.N):
            x = rng.standard_normal((3, 5))
            errs.append(_grad_check(
                lambda t: ad.tanh(t @ Tensor(np.full((5, 4), 0.3)) + 0.1)
                * ad.sigmoid(t.sum()), x))
            y = rng.standard_normal((2, 6)) * 0.5
            errs.append(_grad_check(
                lambda t: ad.softmax(t, axis=1) * ad.exp(-(t * t)), y))
        worst["tensor_autodiff"] = max(errs)

        # warp wrt features and flow (flows kept off the bilinear lattice)
        errs = []
        for _ in range(self.N):
            feats = rng.standard_normal((1, 2, 5, 5))
            flow = rng.uniform(-0.45, 0.45, (1, 2, 5, 5)) + 0.07
            errs.append(_grad_check(
                lambda t: fo.warp(t, FlowField(Tensor(flow)))[0], feats))
            errs.append(_grad_check(
                lambda t: fo.warp(Tensor(feats), FlowField(t))[0], flow))
        worst["warp"] = max(errs)

        errs = []
        for _ in range(self.N):
            f1 = rng.standard_normal((1, 2, 4, 4))
            f2 = rng.standard_normal((1, 2, 4, 4))
            flow = rng.uniform(-0.45, 0.45, (1, 2, 4, 4)) + 0.07
            errs.append(_grad_check(
                lambda t: fo.partial_cost_volume(
                    t, fo.build_pyramid(Tensor(f2), 2),
                    FlowField(Tensor(flow)), 1).data, f1))
            errs.append(_grad_check(
                lambda t: fo.partial_cost_volume(
                    Tensor(f1), fo.build_pyramid(t, 2),
                    FlowField(Tensor(flow)), 1).data, f2))
        worst["partial_cost_volume"] = max(errs)

        errs = []
        for _ in range(self.N):
            coarse = rng.standard_normal((1, 2, 3, 3))
            logits = rng.standard_normal((1, 36, 3, 3))
            errs.append(_grad_check(
                lambda t: fo.convex_upsample(FlowField(t),
                                             Tensor(logits), 2).data, coarse))
            errs.append(_grad_check(
                lambda t: fo.convex_upsample(FlowField(Tensor(coarse)),
                                             t, 2).data, logits))
        worst["convex_upsample"] = max(errs)

        errs = []
        for _ in range(self.N):
            params = rng.standard_normal((1, 6, 4, 4)) * 0.5
            gt = FlowField(Tensor(rng.standard_normal((1, 2, 4, 4))))
            errs.append(_grad_check(
                lambda t: mol_nll(MoLParams(t), gt), params))
        worst["mol_nll"] = max(errs)

        # full model: directional derivative through every parameter
        errs = []
        cfg = ModelConfig(T=2, feature_dim=4, embed_dim=16, n_blocks=1,
                          n_heads=2, refine_dim=4, dtype="float64")
        for i in range(self.N):
            model = FlowModel(cfg, seed=i)
            prng = np.random.default_rng(100 + i)
            for name in ("head.flow.w", "head.extras.w", "head.mask.w"):
                model.params[name].data[...] = prng.standard_normal(
                    model.params[name].shape) * 0.01
            f1 = Tensor(prng.random((1, 3, 16, 16)))
            f2 = Tensor(prng.random((1, 3, 16, 16)))
            gt = FlowField(Tensor(prng.uniform(-1, 1, (1, 2, 16, 16))))
            dirs = {n: prng.standard_normal(p.shape)
                    for n, p in model.params.items()}
            # unit-norm direction keeps the FD truncation error ~eps^2
            total = np.sqrt(sum((d * d).sum() for d in dirs.values()))
            dirs = {n: d / total for n, d in dirs.items()}

            def loss_at(scale):
                m = FlowModel(cfg, seed=i)
                for n, p in m.params.items():
                    p.data[...] = model.params[n].data + scale * dirs[n]
                res = m.forward(f1, f2)
                return float(mol_nll(res.mols[-1], gt).data)

            res = model.forward(f1, f2)
            mol_nll(res.mols[-1], gt).backward()
            analytic = sum(float((p.grad * dirs[n]).sum())
                           for n, p in model.params.items()
                           if p.grad is not None)
            eps = 1e-6
            numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
            errs.append(abs(analytic - numeric) / max(abs(numeric), 1.0))
        worst["model_forward"] = max(errs)

        elapsed = time.perf_counter() - t0
        bad = {k: v for k, v in worst.items() if v > 1e-4}
        _passfail("1 gradient-suite", not bad and elapsed <= 300,
                  f"max rel err {max(worst.values()):.2e}, {elapsed:.0f}s"
                  + (f", failing: {bad}" if bad else ""))


class TestCriterion2OracleEquivalence:
    """Partial lookups equal brute-force gathers from the full volume."""

    @staticmethod
    def _gather_oracle(f1, f2, flow, r):
        n, d, h, w = f1.shape
        full = np.einsum("ndp,ndq->npq", f1.reshape(n, d, h * w),
                         f2.reshape(n, d, h * w)).reshape(n, h * w, h, w)
        out = np.zeros((n, (2 * r + 1) ** 2, h, w))
        k = 0
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                for y in range(h):
                    for x in range(w):
                        ty = y + int(flow[0, 1, y, x]) + dy
                        tx = x + int(flow[0, 0, y, x]) + dx
                        if 0 <= ty < h and 0 <= tx < w:
                            out[:, k, y, x] = full[:, y * w + x, ty, tx]
                k += 1
        return out

    def test_criterion_2(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(22)
        worst = 0.0
        cases = 0
        for h, w, d, r in itertools.product(range(1, 9), range(1, 9),
                                            range(1, 5), range(0, 3)):
            f1 = rng.standard_normal((1, d, h, w))
            f2 = rng.standard_normal((1, d, h, w))
            flow = rng.integers(-2, 3, (1, 2, h, w)).astype(np.float64)
            got = fo.partial_cost_volume(
                Tensor(f1), fo.build_pyramid(Tensor(f2), 1),
                FlowField(Tensor(flow)), r).data.data
            ref = self._gather_oracle(f1, f2, flow, r)
            worst = max(worst, float(np.abs(got - ref).max()))
            cases += 1
        elapsed = time.perf_counter() - t0
        _passfail("2 oracle-equivalence", worst <= 1e-12 and elapsed <= 60,
                  f"{cases} exhaustive cases, max abs diff {worst:.1e}, "
                  f"{elapsed:.0f}s")


class TestCriterion3WarpExactness:
    def test_criterion_3(self):
        rng = np.random.default_rng(33)
        feats = rng.standard_normal((2, 3, 7, 9))
        zero = FlowField(Tensor(np.zeros((2, 2, 7, 9))))
        ident, mask = fo.warp(Tensor(feats), zero)
        identity_exact = np.array_equal(ident.data, feats) and mask.all()

        shift_exact = True
        for dx, dy in ((1, 0), (0, 2), (-2, 1), (3, -3)):
            flow = np.zeros((2, 2, 7, 9))
            flow[:, 0], flow[:, 1] = dx, dy
            got, _ = fo.warp(Tensor(feats), FlowField(Tensor(flow)))
            ref = np.zeros_like(feats)
            ys, xs = np.arange(7), np.arange(9)
            sy, sx = ys + dy, xs + dx
            my, mx = (sy >= 0) & (sy < 7), (sx >= 0) & (sx < 9)
            ref[:, :, ys[my][:, None], xs[mx][None, :]] = \
                feats[:, :, sy[my][:, None], sx[mx][None, :]]
            shift_exact &= np.array_equal(got.data, ref)
        _passfail("3 warp-exactness", identity_exact and shift_exact)


class TestCriterion4MemoryStructure:
    def test_criterion_4(self):
        t0 = time.perf_counter()
        warp_per_step = profile_indexing("warp", 64, 64, 64).by_op()["warp"]
        pcv_per_step = profile_indexing(
            "partial_cv", 64, 64, 64, r=4, scales=4).by_op()[
            "partial_cost_volume"]
        ratio = pcv_per_step / warp_per_step

        sizes = [8, 16, 32, 64, 128]
        totals = [profile_indexing("full_cv", s, s, 64).total_floats
                  for s in sizes]
        slope = np.polyfit(np.log([s * s for s in sizes]),
                           np.log(totals), 1)[0]

        lo = profile_indexing("warp", 8, 8, 64, steps=5).total_floats
        hi = profile_indexing("warp", 32, 32, 64, steps=5).total_floats
        pixel_ratio = (32 * 32) / (8 * 8)
        growth_ok = hi / lo <= 1.25 * pixel_ratio

        elapsed = time.perf_counter() - t0
        ok = ratio >= 4.0 and abs(slope - 2.0) <= 0.05 and growth_ok \
            and elapsed <= 120
        _passfail("4 memory-structure", ok,
                  f"partial/warp ratio {ratio:.4g}, full-volume slope "
                  f"{slope:.3f}, 1/8->1/2 growth {hi / lo:.1f}x vs pixel "
                  f"ratio {pixel_ratio:.0f}x")


@pytest.mark.slow
class TestCriterion5Convergence:
    def test_criterion_5(self, tmp_path):
        import os
        cores = os.cpu_count() or 1
        budget_s = CONVERGENCE_BUDGET_S / max(cores / 4, 0.25) \
            if cores < 4 else CONVERGENCE_BUDGET_S
        cfg = TrainConfig(seed=CONVERGENCE_SEED, steps=CONVERGENCE_MAX_STEPS)
        t0 = time.perf_counter()
        model = train(cfg, tmp_path / "run", stop_epe=CONVERGENCE_EPE)
        elapsed = time.perf_counter() - t0
        report = validate(model, make_validation_set(cfg))
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        steps_used = json.loads(lines[-1])["step"] + 1
        ok = (report.epe < CONVERGENCE_EPE and report.px1 < CONVERGENCE_PX1
              and steps_used <= CONVERGENCE_MAX_STEPS and elapsed <= budget_s)
        _passfail("5 training-convergence", ok,
                  f"EPE {report.epe:.3f} (<{CONVERGENCE_EPE}), 1px outliers "
                  f"{report.px1:.1f}% (<{CONVERGENCE_PX1}%), {steps_used} "
                  f"steps, {elapsed / 60:.0f} min of {budget_s / 60:.0f}")


@pytest.mark.slow
class TestCriterion6AblationDirections:
    def test_criterion_6(self, tmp_path):
        from warpflow.cli import ablation_variants
        import dataclasses

        t0 = time.perf_counter()
        base = TrainConfig(seed=ABLATION_SEED, steps=ABLATION_STEPS)
        variants = ablation_variants(base.model, (1, 3, *base.image_size))
        epe, px1 = {}, {}
        for name, mcfg in variants.items():
            tcfg = dataclasses.replace(base, model=mcfg)
            model = train(tcfg, tmp_path / name)
            rep = validate(model, make_validation_set(tcfg))
            epe[name], px1[name] = rep.epe, rep.px1

        m = ABLATION_MARGIN
        checks = {
            "a_update": epe["default"] < (1 - m) * epe["conv_gru"]
                        and epe["conv_gru"] < (1 - m) * epe["plain_cnn"],
            "b_iterative": epe["default"] < (1 - m) * epe["direct_t1"],
            "c_warp_helps": epe["default"] < (1 - m) * epe["no_indexing"],
            "d_resolution": px1["default"] <= px1["low_res_index"],
            "e_warp_vs_pcv": abs(epe["default"] - epe["partial_cv"])
                             <= ABLATION_PARITY * epe["partial_cv"],
            "f_context": abs(epe["default"] - epe["context"])
                         <= ABLATION_PARITY * epe["default"],
        }
        mem_warp = profile_indexing("warp", 32, 32, 64, 4, 4, 5).total_floats
        mem_pcv = profile_indexing("partial_cv", 32, 32, 64, 4, 4,
                                   5).total_floats
        checks["e_memory"] = mem_warp < mem_pcv
        elapsed = time.perf_counter() - t0
        checks["budget"] = elapsed <= 6 * 3600
        failing = [k for k, v in checks.items() if not v]
        detail = ", ".join(f"{k} epe={v:.3f}" for k, v in sorted(epe.items()))
        _passfail("6 ablation-directions", not failing,
                  f"{detail}; {elapsed / 3600:.1f} CPU-h"
                  + (f"; failing: {failing}" if failing else ""))


class TestCriterion7MetricOracles:
    @staticmethod
    def _oracle(pred, gt, valid):
        """Scalar-loop EPE / 1px / Fl / WAUC, straight from the definitions."""
        h, w = valid.shape
        errs, mags = [], []
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                du = pred[0, y, x] - gt[0, y, x]
                dv = pred[1, y, x] - gt[1, y, x]
                errs.append((du * du + dv * dv) ** 0.5)
                mags.append((gt[0, y, x] ** 2 + gt[1, y, x] ** 2) ** 0.5)
        n = len(errs)
        epe = sum(errs) / n
        px1 = 100.0 * sum(e > 1.0 for e in errs) / n
        fl = 100.0 * sum(e > 3.0 and e > 0.05 * m
                         for e, m in zip(errs, mags)) / n
        num = den = 0.0
        for i in range(1, 101):
            theta = 0.05 * i
            weight = 1.0 - (theta - 0.05) / 5.0
            num += weight * sum(e <= theta for e in errs) / n
            den += weight
        return epe, px1, fl, 100.0 * num / den

    def test_criterion_7(self):
        rng = np.random.default_rng(77)
        worst = 0.0
        for _ in range(100):
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            gt = rng.uniform(-4, 4, (2, h, w))
            pred = gt + rng.uniform(-3, 3, (2, h, w))
            valid = rng.random((h, w)) < 0.8
            if not valid.any():
                valid[0, 0] = True
            rep = evaluate_flow(FlowField(Tensor(pred[None])),
                                FlowField(Tensor(gt[None])), valid[None])
            ref = self._oracle(pred, gt, valid)
            got = (rep.epe, rep.px1, rep.fl, rep.wauc)
            worst = max(worst, max(abs(a - b) for a, b in zip(got, ref)))

        gt = FlowField(Tensor(rng.uniform(-4, 4, (1, 2, 5, 5))))
        perfect = wauc(gt, gt)
        far = FlowField(Tensor(gt.data.data + 10.0))
        hopeless = wauc(far, gt)
        ok = worst <= 1e-10 and perfect == 100.0 and hopeless == 0.0
        _passfail("7 metric-oracles", ok,
                  f"max |diff| {worst:.1e}, wauc(perfect)={perfect}, "
                  f"wauc(all>5px)={hopeless}")


class TestCriterion8IO:
    def test_criterion_8(self, tmp_path):
        from warpflow.flow_io import (FlowFormatError, read_flo,
                                      read_kitti_png, write_flo,
                                      write_kitti_png)
        rng = np.random.default_rng(88)
        flow = FlowField(Tensor(
            rng.uniform(-60, 60, (1, 2, 11, 13)).astype(np.float32)))
        write_flo(tmp_path / "a.flo", flow)
        flo_exact = np.array_equal(read_flo(tmp_path / "a.flo").data.data,
                                   flow.data.data)

        big = FlowField(Tensor(rng.uniform(-511, 511, (1, 2, 9, 9))))
        write_kitti_png(tmp_path / "a.png", big)
        back, _ = read_kitti_png(tmp_path / "a.png")
        kitti_err = float(np.abs(back.data.data - big.data.data).max())

        rejected = 0
        (tmp_path / "bad.flo").write_bytes(b"\x00" * 11)
        for fn, arg in ((read_flo, tmp_path / "bad.flo"),
                        (read_flo, tmp_path / "a.png"),
                        (read_kitti_png, tmp_path / "a.flo")):
            try:
                fn(arg)
            except FlowFormatError:
                rejected += 1
        ok = flo_exact and kitti_err <= 1 / 128 and rejected == 3
        _passfail("8 io-round-trips", ok,
                  f"flo bitwise={flo_exact}, kitti max err {kitti_err:.6f} "
                  f"(<= {1 / 128}), {rejected}/3 malformed rejected")


class TestCriterion9Determinism:
    def test_criterion_9(self, tmp_path, capsys):
        from warpflow.cli import main
        tiny = {"model": dict(T=2, feature_dim=8, embed_dim=32, n_blocks=1,
                              n_heads=4, refine_dim=8, dtype="float32"),
                "steps": 2, "batch_size": 2, "image_size": [32, 32],
                "max_disp": 4.0, "val_every": 1, "val_size": 2,
                "warmup_steps": 1}
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(tiny))

        ckpts = []
        for tag in ("a", "b"):
            out = tmp_path / f"train_{tag}"
            assert main(["--threads", "1", "train", "--config", str(cfg),
                         "--seed", "3", "--out", str(out)]) == 0
            ckpts.append((out / "checkpoint.bin").read_bytes())
        train_ok = ckpts[0] == ckpts[1]

        evals = []
        for _ in range(2):
            main(["--threads", "1", "eval",
                  "--checkpoint", str(tmp_path / "train_a" / "checkpoint.bin"),
                  "--n", "2", "--size", "32", "--max-disp", "4", "--seed", "9"])
            evals.append(capsys.readouterr().out)
        eval_ok = evals[0] == evals[1]

        benches = []
        for _ in range(2):
            main(["--threads", "1", "bench"])
            benches.append(capsys.readouterr().out)
        bench_ok = benches[0] == benches[1]
        _passfail("9 determinism", train_ok and eval_ok and bench_ok,
                  f"train={train_ok}, eval={eval_ok}, bench={bench_ok}")

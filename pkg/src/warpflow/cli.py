"""Command-line harness: train, eval, ablate, bench, viz, dump-data.

Thread pinning happens before numpy is imported anywhere in the process, so
--threads 1 gives bit-reproducible runs.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _set_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -----------------------------------------------------------------------------
# subcommands (heavy imports deferred until after thread pinning)
# -----------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import TrainConfig, train

    overrides = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = TrainConfig.from_dict(overrides)
    train(cfg, args.out, log=print if args.verbose else None,
          stop_epe=args.stop_epe)
    return EXIT_OK


def _eval_samples(model, samples, batch=16):
    """Per-sample reports plus one aggregate over all valid pixels."""
    import numpy as np
    from . import autodiff as ad
    from .flow_ops import FlowField
    from .metrics import evaluate_flow

    reports = []
    preds, gts, valids = [], [], []
    dt = model.config.np_dtype
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        f1 = np.stack([s.frame1 for s in chunk]).astype(dt)
        f2 = np.stack([s.frame2 for s in chunk]).astype(dt)
        gt = np.stack([s.gt_flow.data.data[0] for s in chunk]).astype(dt)
        valid = np.stack([s.valid for s in chunk])
        with ad.no_grad():
            result = model.forward(ad.Tensor(f1), ad.Tensor(f2))
        pred = result.flows[-1].data.data
        for j in range(len(chunk)):
            reports.append(evaluate_flow(
                FlowField(ad.Tensor(pred[j:j + 1])),
                FlowField(ad.Tensor(gt[j:j + 1])), valid[j:j + 1]))
        preds.append(pred), gts.append(gt), valids.append(valid)
    agg = evaluate_flow(
        FlowField(ad.Tensor(np.concatenate(preds))),
        FlowField(ad.Tensor(np.concatenate(gts))), np.concatenate(valids))
    return agg, reports


def _load_dataset_dir(path):
    import cv2
    import numpy as np
    from . import autodiff as ad
    from .flow_io import FlowFormatError, read_flo
    from .synth import SyntheticSample

    samples = []
    for d in sorted(Path(path).iterdir()):
        if not d.is_dir():
            continue
        frames = []
        for name in ("frame1.png", "frame2.png"):
            img = cv2.imread(str(d / name), cv2.IMREAD_COLOR)
            if img is None:
                raise FlowFormatError(f"missing or unreadable {d / name}")
            frames.append(img[:, :, ::-1].transpose(2, 0, 1) / 255.0)
        flow = read_flo(d / "flow.flo")
        vimg = cv2.imread(str(d / "valid.png"), cv2.IMREAD_GRAYSCALE)
        if vimg is None:
            raise FlowFormatError(f"missing or unreadable {d / 'valid.png'}")
        meta = _load_json(d / "meta.json")
        samples.append(SyntheticSample(frames[0], frames[1], flow,
                                       vimg > 0, meta))
    if not samples:
        raise FlowFormatError(f"no sample directories under {path}")
    return samples


def _generate_samples(seed: int, n: int, max_disp: float, size):
    from .synth import gen_pair, sample_kind
    import numpy as np
    rng = np.random.default_rng(seed)
    return [gen_pair(int(rng.integers(2 ** 62)), sample_kind(rng), max_disp, size)
            for _ in range(n)]


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    if args.data:
        samples = _load_dataset_dir(args.data)
    else:
        samples = _generate_samples(args.seed if args.seed is not None else 987654321,
                                    args.n, args.max_disp, (args.size, args.size))
    agg, reports = _eval_samples(model, samples)
    payload = {"aggregate": agg.to_dict(),
               "samples": [r.to_dict() for r in reports]}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -----------------------------------------------------------------------------
# ablation sweep
# -----------------------------------------------------------------------------

def matched_width(base_cfg, variant_cfg, input_shape=(1, 3, 64, 64),
                  lo: float = 0.5, hi: float = 4.0):
    """Find width_mult so the variant's MACs match the base within 2%."""
    import dataclasses
    from .model import count_macs

    target = count_macs(base_cfg, input_shape)
    for _ in range(40):
        mid = (lo + hi) / 2
        cfg = dataclasses.replace(variant_cfg, width_mult=mid)
        macs = count_macs(cfg, input_shape)
        if abs(macs - target) <= 0.02 * target:
            return cfg
        if macs < target:
            lo = mid
        else:
            hi = mid
    return dataclasses.replace(variant_cfg, width_mult=(lo + hi) / 2)


def ablation_variants(base, input_shape=(1, 3, 64, 64)):
    """The studied design axes: update module, iteration count, indexing."""
    import dataclasses

    rep = lambda **kw: dataclasses.replace(base, **kw)
    return {
        "default": base,
        "conv_gru": rep(update_kind="conv_gru"),
        "plain_cnn": rep(update_kind="plain_cnn"),
        "direct_t1": matched_width(base, rep(T=1), input_shape),
        "no_indexing": rep(indexing_kind="none"),
        "image_space_warp": rep(indexing_kind="image_space_warp"),
        "partial_cv": rep(indexing_kind="partial_cost_volume"),
        "low_res_index": rep(index_resolution=0.125),
        "context": rep(use_context_encoder=True),
    }


def cmd_ablate(args) -> int:
    import dataclasses
    from .model import ModelConfig, count_macs
    from .profiler import profile_indexing, rows_to_csv, rows_to_markdown
    from .train import TrainConfig, train, make_validation_set, validate

    overrides = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    base_train = TrainConfig.from_dict(overrides)
    variants = ablation_variants(base_train.model,
                                 (1, 3, *base_train.image_size))
    if args.variants:
        wanted = args.variants.split(",")
        unknown = [v for v in wanted if v not in variants]
        if unknown:
            raise ValueError(f"unknown variants: {unknown}; "
                             f"choose from {sorted(variants)}")
        variants = {k: variants[k] for k in wanted}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, mcfg in variants.items():
        tcfg = dataclasses.replace(base_train, model=mcfg)
        model = train(tcfg, out / name, log=print if args.verbose else None)
        report = validate(model, make_validation_set(tcfg))
        h = w = int(round(tcfg.image_size[0] * mcfg.index_resolution))
        strategy = {"warp": "warp", "image_space_warp": "warp",
                    "partial_cost_volume": "partial_cv"}.get(mcfg.indexing_kind)
        mem = (profile_indexing(strategy, h, w, mcfg.feature_dim, mcfg.r,
                                mcfg.scales, mcfg.T).total_floats
               if strategy else 0)
        rows.append({
            "variant": name,
            "update": mcfg.update_kind,
            "indexing": mcfg.indexing_kind,
            "T": mcfg.T,
            "index_resolution": mcfg.index_resolution,
            "epe": round(report.epe, 4),
            "px1": round(report.px1, 3),
            "macs": count_macs(mcfg, (1, 3, *tcfg.image_size)),
            "indexing_floats": mem,
        })
        (out / "results.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "table.csv").write_text(rows_to_csv(rows))
    (out / "table.md").write_text(rows_to_markdown(rows))
    sys.stdout.write(rows_to_markdown(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .profiler import bench_grid, rows_to_csv, rows_to_markdown

    rows = bench_grid(base=args.size, d=args.d, r=args.r, steps=args.steps)
    csv_text = rows_to_csv(rows)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.csv").write_text(csv_text)
        (Path(args.out) / "bench.md").write_text(rows_to_markdown(rows))
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_viz(args) -> int:
    from .flow_io import read_flo, save_color_png

    flow = read_flo(args.flow_file)
    out = args.out or str(Path(args.flow_file).with_suffix(".png"))
    save_color_png(out, flow, args.max_magnitude)
    print(out)
    return EXIT_OK


def cmd_dump_data(args) -> int:
    import cv2
    import numpy as np
    from .flow_io import write_flo
    from .synth import gen_pair, sample_kind

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        sample = gen_pair(int(rng.integers(2 ** 62)), sample_kind(rng),
                          args.max_disp, (args.size, args.size))
        d = out / f"sample_{i:05d}"
        d.mkdir(exist_ok=True)
        for name, img in (("frame1.png", sample.frame1), ("frame2.png", sample.frame2)):
            bgr = (np.clip(img[::-1], 0, 1).transpose(1, 2, 0) * 255).round()
            cv2.imwrite(str(d / name), bgr.astype(np.uint8))
        write_flo(d / "flow.flo", sample.gt_flow)
        cv2.imwrite(str(d / "valid.png"),
                    (sample.valid * 255).astype(np.uint8))
        (d / "meta.json").write_text(json.dumps(sample.meta) + "\n")
    print(out)
    return EXIT_OK


# -----------------------------------------------------------------------------
# parser
# -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="warpflow",
        description="Warping-based iterative optical flow: desk-scale "
                    "training, evaluation, ablation, and profiling.")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread count (default 1, reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on streamed synthetic pairs")
    p.add_argument("--config", help="JSON file of training-config overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--stop-epe", type=float, default=None,
                   help="stop early once validation EPE drops below this")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory from dump-data")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--max-disp", type=float, default=8.0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare design variants")
    p.add_argument("--config", help="JSON file of training-config overrides")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", help="comma-separated subset of variant names")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="emit the indexing-memory grid")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--r", type=int, default=4)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("viz", help="render a .flo file to a color-wheel PNG")
    p.add_argument("flow_file")
    p.add_argument("--out")
    p.add_argument("--max-magnitude", type=float, default=None)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("dump-data", help="write a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-disp", type=float, default=8.0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_dump_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if "numpy" not in sys.modules:
        _set_threads(args.threads)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:
        from .train import NumericFailure
        if isinstance(e, NumericFailure):
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())

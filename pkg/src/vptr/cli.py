"""Command-line surface: data generation, the two training stages,
prediction, evaluation with figures, the attention bench, and the
gradient suite.

Exit codes: 0 success, 1 usage problems, 2 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .bench import VARIANTS, bench_walltime, write_bench_csv
from .config import ModelConfig, TrainRunConfig
from .data import export_pgm, generate_dataset, load_split
from .figures import (load_jsonl, save_loss_curve, save_mse_curves,
                      save_prediction_strip)
from .gradcheck import run_suite, tolerance_for
from .inference import (PREDICTORS, PredictionRun, evaluate_regime,
                        metric_rows, summarize_rows, write_metrics_csv,
                        write_summary_json)
from .models import load_model
from .training import train_stage_one, train_stage_two


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems instead of exiting with 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _model_config(args) -> ModelConfig:
    """Model settings: config file first, then --set overrides."""
    fields = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError(f"config file {args.config} must hold a JSON "
                             f"object")
        fields.update(raw.get("model", raw))
        fields.pop("train", None)
    for item in getattr(args, "overrides", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        fields[key.replace("-", "_")] = parsed
    return ModelConfig.from_dict(fields)


def _train_config(args, stage: str, ae_checkpoint=None) -> TrainRunConfig:
    """Training settings: defaults, then the config file's "train"
    section, then explicit flags."""
    merged = TrainRunConfig(stage=stage).to_dict()
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        merged.update(raw.get("train", {}) if isinstance(raw, dict) else {})
    flags = {
        "steps": args.steps, "batch_size": args.batch_size,
        "seed": args.seed, "lr": args.lr, "clip_norm": args.clip_norm,
        "data_dir": args.data, "out_dir": args.out,
        "checkpoint_every": args.ckpt_every, "log_every": args.log_every,
        "augment": args.augment,
    }
    merged.update({k: v for k, v in flags.items() if v is not None})
    merged["stage"] = stage
    merged["ae_checkpoint"] = ae_checkpoint
    return TrainRunConfig.from_dict(merged).validate()


def _add_train_flags(p) -> None:
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--out", default=None, help="run output directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--ckpt-every", type=int, default=None)
    p.add_argument("--augment", action="store_true", default=None)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    _add_config_flags(p)


def _add_config_flags(p) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", dest="overrides",
                   metavar="KEY=VALUE",
                   help="model config override (repeatable)")


def _require_file(path, what: str) -> str:
    if not path:
        raise ValueError(f"{what} is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    counts = {}
    for split in ("train", "val", "test", "stress"):
        n = getattr(args, f"{split}_clips")
        if n is not None:
            counts[split] = n
    manifest = generate_dataset(
        args.out, seed=args.seed, counts=counts or None,
        t_frames=args.frames, h_img=args.hw, w_img=args.hw,
        shape_size=args.shape_size)
    total = sum(s["count"] for s in manifest["splits"].values())
    print(f"wrote {total} clips across {len(manifest['splits'])} splits "
          f"to {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    model_cfg = _model_config(args)
    run_cfg = _train_config(args, "ae")
    clips = load_split(run_cfg.data_dir, "train")
    _, _, reports = train_stage_one(run_cfg, model_cfg, clips,
                                    resume=args.resume)
    final = os.path.join(run_cfg.out_dir, "ae-final.vptc")
    if reports:
        print(f"step {run_cfg.steps}: total {reports[-1].total:.6f}")
    print(f"saved {final}")
    return 0


def cmd_train_vptr(args) -> int:
    ae_path = _require_file(args.ae, "stage-one checkpoint")
    if args.config or args.overrides:
        model_cfg = _model_config(args)
    else:
        _, meta, _ = load_model(ae_path, expect_kind="autoencoder")
        model_cfg = ModelConfig.from_dict(meta["config"])
    updates = {}
    if args.rpe:
        updates["pe_mode"] = "relative"
    if args.feda:
        updates["feda"] = True
    if updates:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), **updates})
    run_cfg = _train_config(args, args.variant, ae_checkpoint=ae_path)
    clips = load_split(run_cfg.data_dir, "train")
    _, _, reports = train_stage_two(run_cfg, model_cfg, clips,
                                    resume=args.resume)
    final = os.path.join(run_cfg.out_dir, f"{args.variant}-final.vptc")
    if reports:
        print(f"step {run_cfg.steps}: total {reports[-1].total:.6f}")
    print(f"saved {final}")
    return 0


def _load_predictor(args, regime: str):
    ae, _, _ = load_model(_require_file(args.ae, "stage-one checkpoint"),
                          expect_kind="autoencoder")
    kind = "nar" if regime == "nar" else "far"
    model, meta, _ = load_model(
        _require_file(args.model, "predictor checkpoint"), expect_kind=kind)
    return ae, model, ModelConfig.from_dict(meta["config"])


def cmd_predict(args) -> int:
    regime = args.regime
    ae, model, cfg = _load_predictor(args, regime)
    clips = load_split(args.data, args.split)
    if not 0 <= args.clip < len(clips):
        raise ValueError(f"clip index {args.clip} outside 0..{len(clips)-1}")
    horizon = args.horizon or cfg.future_frames
    past = clips[args.clip, :cfg.past_frames]
    frames = PREDICTORS[regime](past, (ae, model), horizon)
    run = PredictionRun(past=past, predicted=frames, regime=regime)
    t_have = clips.shape[1] - cfg.past_frames
    target = None
    if t_have >= horizon:
        target = clips[args.clip, cfg.past_frames:cfg.past_frames + horizon]
        run.table = metric_rows(regime, args.clip, target, frames)
    run.validate()
    os.makedirs(args.out, exist_ok=True)
    for t in range(horizon):
        export_pgm(frames[t],
                   os.path.join(args.out, f"{regime}-pred-{t + 1:02d}.pgm"))
    save_prediction_strip(past, frames,
                          os.path.join(args.out, f"{regime}-strip.png"),
                          target=target)
    if run.table:
        write_metrics_csv(os.path.join(args.out, f"{regime}-metrics.csv"),
                          run.table)
        mean_mse = float(np.mean([r["mse"] for r in run.table]))
        print(f"{regime} clip {args.clip}: horizon {horizon}, "
              f"mean MSE {mean_mse:.6f}")
    else:
        print(f"{regime} clip {args.clip}: horizon {horizon}")
    print(f"wrote frames and figures to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not args.far and not args.nar:
        raise ValueError("eval needs --far and/or --nar checkpoints")
    ae, _, _ = load_model(_require_file(args.ae, "stage-one checkpoint"),
                          expect_kind="autoencoder")
    runs = []
    cfg = None
    if args.far:
        far, meta, _ = load_model(_require_file(args.far, "far checkpoint"),
                                  expect_kind="far")
        cfg = ModelConfig.from_dict(meta["config"])
        runs += [("ril", far), ("rip", far)]
    if args.nar:
        nar, meta, _ = load_model(_require_file(args.nar, "nar checkpoint"),
                                  expect_kind="nar")
        cfg = cfg or ModelConfig.from_dict(meta["config"])
        runs.append(("nar", nar))
    clips = load_split(args.data, args.split)
    if args.clips:
        clips = clips[:args.clips]
    horizons = [int(h) for h in args.horizons.split(",") if h]
    os.makedirs(args.out, exist_ok=True)
    for f_frames in horizons:
        rows = []
        for regime, model in runs:
            if regime == "nar" and f_frames > cfg.future_frames:
                print(f"nar emits {cfg.future_frames} frames, skipping "
                      f"horizon {f_frames}")
                continue
            rows.extend(evaluate_regime(ae, model, clips, regime,
                                        cfg.past_frames, f_frames))
        if not rows:
            continue
        summary = summarize_rows(rows)
        write_metrics_csv(os.path.join(args.out,
                                       f"metrics-h{f_frames}.csv"), rows)
        write_summary_json(os.path.join(args.out,
                                        f"summary-h{f_frames}.json"),
                           summary)
        save_mse_curves(summary,
                        os.path.join(args.out, f"curves-h{f_frames}.png"))
        for regime in summary:
            print(f"h={f_frames} {regime}: mse {summary[regime]['mse']:.6f} "
                  f"psnr {summary[regime]['psnr']:.2f} "
                  f"ssim {summary[regime]['ssim']:.4f}")
    # qualitative strip for the first clip of each regime
    first = clips[0]
    for regime, model in runs:
        frames = PREDICTORS[regime](first[:cfg.past_frames], (ae, model),
                                    cfg.future_frames)
        save_prediction_strip(
            first[:cfg.past_frames], frames,
            os.path.join(args.out, f"strip-{regime}.png"),
            target=first[cfg.past_frames:cfg.past_frames
                         + cfg.future_frames])
    print(f"wrote report to {args.out}")
    return 0


def cmd_bench_attn(args) -> int:
    sizes = []
    for part in args.sizes.split(","):
        dims = part.strip().split("x")
        if len(dims) != 4:
            raise ValueError(f"size must be TxHxWxK, got {part!r}")
        sizes.append(tuple(int(d) for d in dims))
    records = []
    for variant in args.variants.split(","):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one "
                             f"of {', '.join(VARIANTS)}")
        records.extend(bench_walltime(variant, sizes, repeats=args.repeats,
                                      d_model=args.d_model,
                                      heads=args.heads))
    write_bench_csv(args.out, records)
    for r in records:
        flag = " (low confidence)" if r.low_confidence else ""
        print(f"{r.variant:<12} T={r.t_frames} {r.height}x{r.width} "
              f"K={r.window}: {r.entries} entries, "
              f"{r.wall_ns / 1e6:.2f} ms{flag}")
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    dtypes = {"32": [np.float32], "64": [np.float64],
              "both": [np.float64, np.float32]}[args.dtype]
    failed = False
    for dt in dtypes:
        tol = tolerance_for(dt)
        print(f"-- {np.dtype(dt).name} (tolerance {tol:g})")
        for name, err in run_suite(dt):
            ok = err < tol
            failed = failed or not ok
            print(f"{name:<18} {err:.3e}{'' if ok else '  FAIL'}")
    if failed:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


def cmd_report_figures(args) -> int:
    """Render a training-loss figure next to an existing run log."""
    records = load_jsonl(_require_file(args.log, "training log"))
    save_loss_curve(records, args.out, keys=tuple(args.keys.split(",")))
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="vptr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic clip splits")
    p.add_argument("--out", default="data")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--hw", type=int, default=32)
    p.add_argument("--shape-size", type=int, default=8)
    for split in ("train", "val", "test", "stress"):
        p.add_argument(f"--{split}-clips", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ae", help="stage one: frame autoencoder")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train-vptr", help="stage two: future prediction")
    p.add_argument("--variant", choices=("far", "nar"), required=True)
    p.add_argument("--ae", required=True,
                   help="stage-one autoencoder checkpoint")
    p.add_argument("--rpe", action="store_true",
                   help="learned relative position bias in window attention")
    p.add_argument("--feda", action="store_true",
                   help="joint spatio-temporal encoder-decoder attention")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_vptr)

    p = sub.add_parser("predict", help="roll one clip forward")
    p.add_argument("--regime", choices=sorted(PREDICTORS), required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--clip", type=int, default=0)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", default="predictions")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metric tables, summaries and figures")
    p.add_argument("--ae", required=True)
    p.add_argument("--far", default=None)
    p.add_argument("--nar", default=None)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="test")
    p.add_argument("--clips", type=int, default=None,
                   help="evaluate only the first N clips")
    p.add_argument("--horizons", default="10")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-attn", help="attention complexity bench")
    p.add_argument("--sizes", default="10x8x8x4,10x16x16x4")
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--repeats", type=int, default=9)
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench_attn)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--dtype", choices=("32", "64", "both"), default="both")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report-figures", help="loss curve from a run log")
    p.add_argument("--log", required=True, help="training JSONL log")
    p.add_argument("--keys", default="total")
    p.add_argument("--out", default="loss.png")
    p.set_defaults(func=cmd_report_figures)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError:
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Commands: gen-data, train, cv, ablate, eval, gradcheck, losscheck.  Every
command is driven by one JSON config; outputs land in a directory named by
the hash of the resolved config, which is stored alongside so any run can be
reproduced from its artifacts alone.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 non-finite loss,
5 checkpoint/config mismatch, 6 failed internal checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks as chk
from . import metrics as met
from . import trainer as tr
from ._alloc import tune_allocator
from .curves import drops_to_ffr, read_dataset, resample_linear, write_dataset
from .network import forward, prepare_records
from .runconfig import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    load_run_config,
    run_config_to_dict,
)
from .svgplot import line_plot_svg
from .synthetic import gen_dataset
from .trainer import TrainingDiverged

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_CHECKS = 2, 3, 4, 5, 6


def _out_root(path: str) -> Path:
    root = os.environ.get("FFR_RUN_DIR")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _run_dir(out: str, cfg: RunConfig) -> Path:
    run = _out_root(out) / config_hash(cfg)
    run.mkdir(parents=True, exist_ok=True)
    resolved = run_config_to_dict(cfg)
    with open(run / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(run / "manifest.json", "w") as fh:
        json.dump({"config_sha256_12": config_hash(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects path=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        overrides[dotted] = json.loads(raw)
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _load_records(path):
    records, header = read_dataset(path)
    if not records:
        raise OSError(f"dataset {path} contains no arteries")
    return records, header


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    records, header = gen_dataset(cfg.synthetic)
    out = _out_root(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, records, header)
    print(f"wrote {len(records)} arteries to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    records, _ = _load_records(args.data)
    run = _run_dir(args.out, cfg)
    result = tr.train(records, cfg.train, cfg.network, log_every=10)
    threshold = tr.training_ppg_threshold(
        [r for r in records if r.ref_drops is not None], cfg.network, cfg.ppg
    )
    tr.save_checkpoint(
        run / "checkpoint.json",
        result["params"],
        cfg.network,
        result["stats"],
        extra={"ppg_threshold": threshold, "train_seed": cfg.train.seed},
    )
    with open(run / "train_log.json", "w") as fh:
        json.dump(result["log"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"checkpoint and log in {run}")
    return 0


def cmd_cv(args) -> int:
    cfg = _load_config(args)
    records, _ = _load_records(args.data)
    run = _run_dir(args.out, cfg)
    folds = tr.build_folds(records, cfg.train.fold_count, cfg.train.seed)
    with open(run / "folds.json", "w") as fh:
        json.dump(folds, fh, indent=2)
        fh.write("\n")

    done = set()
    if args.resume:
        for i in range(len(folds)):
            if (run / f"fold-{i}.json").exists():
                done.add(i)
        if done:
            print(f"resume: reusing folds {sorted(done)}")

    results = []
    todo = [i for i in range(len(folds)) if i not in done]
    if todo:
        tasks = [(records, folds[i], cfg.train, cfg.network, cfg.ppg, i) for i in todo]
        if args.threads > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=args.threads) as pool:
                fresh = list(pool.map(tr._run_fold, tasks))
        else:
            fresh = []
            for t in tasks:
                fresh.append(tr._run_fold(t))
                print(f"fold {t[5]} trained", flush=True)
        for res in fresh:
            ck = res["checkpoint"]
            payload = {
                "header": {
                    "format": tr.CHECKPOINT_FORMAT,
                    "network": cfg.network.to_dict(),
                    "normalization": ck["stats"],
                    "ppg_threshold": ck["ppg_threshold"],
                    "fold": ck["fold"],
                },
                "params": ck["params"],
                "log": ck["log"],
            }
            with open(run / f"fold-{ck['fold']}.json", "w") as fh:
                json.dump(payload, fh, sort_keys=True)
                fh.write("\n")
            results.append(res)

    for i in sorted(done):
        results.append(_reevaluate_fold(run / f"fold-{i}.json", records, folds[i], cfg))

    rows, pairs, thresholds = [], [], []
    for res in sorted(results, key=lambda r: r["checkpoint"]["fold"]):
        rows.extend(res["rows"])
        pairs.extend(res["pairs"])
        thresholds.append(res["checkpoint"]["ppg_threshold"])
    aggregates = met.aggregate_rows(rows, pairs)
    aggregates["ppg_thresholds_per_fold"] = thresholds
    report = {"per_artery": sorted(rows, key=lambda r: r["id"]), "aggregates": aggregates}
    met.write_report_json(run / "report.json", report)
    met.write_per_artery_csv(run / "per_artery.csv", report)
    print(f"pooled report in {run}: accuracy={aggregates.get('accuracy')}")
    return 0


def _reevaluate_fold(path, records, fold_ids, cfg):
    with open(path) as fh:
        payload = json.load(fh)
    params = tr.params_from_arrays(payload["params"])
    stats = payload["header"]["normalization"]
    threshold = payload["header"]["ppg_threshold"]
    fold = payload["header"]["fold"]
    holdout = [r for r in records if r.id in set(fold_ids)]
    prepared, _ = prepare_records(holdout, stats)
    rows, pairs = [], []
    for raw, prep in zip(holdout, prepared):
        ref_curve = tr.reference_curve_2mm(raw, cfg.network.pool_kernel)
        if ref_curve is None:
            continue
        pred_curve = tr.prediction_curve_2mm(prep, params, cfg.network)
        rows.append(met.artery_row(raw.id, pred_curve, ref_curve, cfg.ppg))
        pairs.append((raw.id, pred_curve, ref_curve))
    met.apply_threshold(rows, threshold)
    return {
        "rows": rows,
        "pairs": pairs,
        "skipped": [],
        "checkpoint": {"fold": fold, "ppg_threshold": threshold},
    }


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    records, _ = _load_records(args.data)
    run = _run_dir(args.out, cfg)
    names = args.configs.split(",") if args.configs else None
    result = tr.run_ablation(
        records, cfg.train, cfg.network, cfg.ppg,
        configurations=names, n_workers=args.threads, progress=True,
    )
    with open(run / "ablation.json", "w") as fh:
        json.dump(result["table"], fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(run / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["configuration", "accuracy", "sensitivity", "specificity", "aupc_mad"])
        for name, row in result["table"].items():
            writer.writerow([name, row["accuracy"], row["sensitivity"], row["specificity"], row["aupc_mad"]])
    print(f"ablation table in {run}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args) if args.config else None
    try:
        params, net_cfg, stats, header = tr.load_checkpoint(args.checkpoint)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    if cfg is not None and cfg.network != net_cfg:
        print("error: --config network section conflicts with the checkpoint", file=sys.stderr)
        return EXIT_MISMATCH
    ppg_cfg = cfg.ppg if cfg is not None else met.PPGConfig()
    records, _ = _load_records(args.data)
    out = _out_root(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)

    threshold = header.get("ppg_threshold")
    prepared, _ = prepare_records(records, stats)
    rows, pairs, skipped = [], [], []
    for raw, prep in zip(records, prepared):
        ref_curve = tr.reference_curve_2mm(raw, net_cfg.pool_kernel)
        if ref_curve is None:
            print(f"warning: {raw.id} has no reference pullback; skipped", file=sys.stderr)
            skipped.append(raw.id)
            continue
        pred_curve = tr.prediction_curve_2mm(prep, params, net_cfg)
        rows.append(met.artery_row(raw.id, pred_curve, ref_curve, ppg_cfg))
        pairs.append((raw.id, pred_curve, ref_curve))
        _write_curve_csv(out / "curves" / f"{raw.id}.csv", raw, prep, params, net_cfg)
    if threshold is None:
        ref_ppgs = [r["ppg_ref"] for r in rows if r["ppg_ref"] is not None]
        threshold = float(np.median(ref_ppgs))
    met.apply_threshold(rows, threshold)
    aggregates = met.aggregate_rows(rows, pairs)
    aggregates["ppg_threshold"] = threshold
    aggregates["n_skipped"] = len(skipped)
    report = {"per_artery": rows, "aggregates": aggregates, "skipped": skipped}
    met.write_report_json(out / "report.json", report)
    met.write_per_artery_csv(out / "per_artery.csv", report)
    print(f"evaluation report in {out}")
    return 0


def _write_curve_csv(path, raw, prepared, params, net_cfg):
    pred = forward(prepared, params, net_cfg)
    fine = resample_linear(pred.ffr_2mm, raw.grid.spacing_mm)
    n = raw.grid.n_points
    ffr_pred = np.empty(n)
    m = min(n, fine.grid.n_points)
    ffr_pred[:m] = fine.ffr[:m]
    ffr_pred[m:] = fine.ffr[-1]
    ref_ffr = drops_to_ffr(raw.ref_drops).ffr if raw.ref_drops is not None else np.full(n, np.nan)
    positions = raw.grid.positions_mm()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position_mm", "ffr_pred", "ffr_ref", "lumen_area"])
        for i in range(n):
            writer.writerow(
                [f"{positions[i]:.2f}", repr(float(ffr_pred[i])), repr(float(ref_ffr[i])),
                 repr(float(raw.characteristics.lumen_area[i]))]
            )


def cmd_gradcheck(args) -> int:
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok, lines = chk.run_gradient_suite(n_seeds=args.seeds)
    with open(out / "gradcheck.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if not ok:
        print("gradient checks FAILED", file=sys.stderr)
        return EXIT_CHECKS
    return 0


def cmd_losscheck(args) -> int:
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ok, lines, land = chk.run_landscape_suite()
    with open(out / "loss_landscape.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shift_mm", "emd_symmetric", "mae", "histogram"])
        for i in range(land["shift_mm"].shape[0]):
            writer.writerow(
                [land["shift_mm"][i], repr(land["emd_symmetric"][i]), repr(land["mae"][i]), repr(land["histogram"][i])]
            )
    line_plot_svg(
        out / "positional_loss_landscape.svg",
        land["shift_mm"],
        {"symmetric EMD": land["emd_symmetric"]},
        hlines={"EMD, no drop predicted": land["emd_no_drop"]},
        title="Positional loss vs drop displacement",
        xlabel="displacement (mm)",
        ylabel="loss",
    )
    line_plot_svg(
        out / "mae_histogram_landscape.svg",
        land["shift_mm"],
        {"MAE": land["mae"], "histogram loss": land["histogram"]},
        hlines={"MAE, no drop predicted": land["mae_no_drop"]},
        title="MAE and histogram loss vs drop displacement",
        xlabel="displacement (mm)",
        ylabel="loss",
    )
    with open(out / "losscheck.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if not ok:
        print("loss-landscape checks FAILED", file=sys.stderr)
        return EXIT_CHECKS
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffrpullback",
        description="FFR pullback-curve prediction: synthetic data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="PATH=JSON",
                       help="override a scalar config field, e.g. train.seed=7")
        if data:
            p.add_argument("--data", required=True, help="JSONL artery dataset")
        if out:
            p.add_argument("--out", required=True, help="output directory or file")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model on the full dataset")
    common(p)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cv", help="8-fold cross-validation")
    common(p)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--threads", type=int, default=1, help="parallel fold workers")
    p.add_argument("--resume", action="store_true", help="skip folds with existing checkpoints")
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("ablate", help="cross-validated ablation table")
    common(p)
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--configs", help="comma-separated subset of configurations")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("losscheck", help="loss-landscape verification and plots")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_losscheck)
    return parser


def main(argv=None) -> int:
    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command line: train, eval, forecast, synth, corrupt, export-structure.

Exit codes: 2 bad config or usage, 3 bad data, 4 non-finite loss,
5 checkpoint/config hash mismatch, 6 hypergraph module ablated.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import numeric as nm
from .config import ConfigError, RunConfig, load_config, save_config
from .data import (DataError, RawSeries, apply_scaler, generate_synthetic, invert_scaler,
                   load_series, plant_structures, save_distances, save_mask, save_matrix,
                   save_series, simulate_missing)
from .hg_infer import save_structure_matrix
from .pipeline import build_model, prepare_data
from .training import (HorizonMetrics, MetricReport, NonFiniteLossError, compute_metrics,
                       evaluate, ha_baseline, train_loop)

log = logging.getLogger("eikfnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE, EXIT_HASH, EXIT_ABLATED = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --- helpers ------------------------------------------------------------------
def _fmt(v) -> str:
    return "NA" if v is None else repr(float(v))


def _parse(cell: str):
    return None if cell == "NA" else float(cell)


def _config(args) -> RunConfig:
    if args.config is None:
        raise CliError(EXIT_CONFIG, "--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_checkpoint(args) -> ckpt.Checkpoint:
    expected = _config(args).digest() if args.config is not None else None
    return ckpt.load(args.checkpoint, expected_hash=expected)


REPORT_COLUMNS = ["horizon", "mae", "rmse", "mape", "count"]


def write_report(path, report: MetricReport, with_sigma: bool) -> str:
    cols = REPORT_COLUMNS + (["mean_sigma"] if with_sigma else [])
    lines = [",".join(cols)]
    rows = [(str(h + 1), m) for h, m in enumerate(report.horizons)] + [("all", report.overall)]
    for label, m in rows:
        cells = [label, _fmt(m.mae), _fmt(m.rmse), _fmt(m.mape), str(m.count)]
        if with_sigma:
            cells.append(_fmt(m.mean_sigma))
        lines.append(",".join(cells))
    lines.append(f"# excluded,{report.excluded}")
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


def read_report(path) -> MetricReport:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    excluded = 0
    if body and body[-1][0] == "# excluded":
        excluded = int(body.pop()[1])
    with_sigma = "mean_sigma" in header
    metrics = []
    for row in body:
        metrics.append(HorizonMetrics(_parse(row[1]), _parse(row[2]), _parse(row[3]),
                                      _parse(row[5]) if with_sigma else None, int(row[4])))
    return MetricReport(metrics[:-1], metrics[-1], excluded)


# --- commands -----------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "run")
    data = prepare_data(cfg)
    model = build_model(cfg, data)
    log_path = out / "epochs.csv"
    with log_path.open("w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_mae,lr\n")

        def on_epoch(rec):
            fh.write(f"{rec.epoch},{rec.train_loss!r},{rec.val_mae!r},{rec.lr!r}\n")
            fh.flush()

        result = train_loop(model, data, cfg.train, cfg.model.lambda_sparsity, on_epoch)
    ck = ckpt.from_training(cfg, model, data.scaler, data.sensor_ids, result)
    ckpt.save(out / "checkpoint.json", ck)
    print(f"best_val_mae={result.best_val_mae!r} best_epoch={result.best_epoch} "
          f"epochs={len(result.history)} checkpoint={out / 'checkpoint.json'}")
    return 0


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args)
    cfg = ck.config
    data = prepare_data(cfg)
    windows = getattr(data, args.split)
    if args.baseline == "ha":
        # the scaled-domain training mean is zero, so the fallback is 0 before inversion
        pred = invert_scaler(ha_baseline(windows.history, cfg.data.upsilon, windows.history_mask),
                             ck.scaler, axis=-2)
        truth = invert_scaler(windows.target, ck.scaler, axis=-2)
        report = compute_metrics(truth, pred, windows.target_mask)
        with_sigma = False
    else:
        report = evaluate(ck.build_model(), windows, ck.scaler)
        with_sigma = cfg.model.uncertainty
    path = Path(args.out or f"report_{args.split}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    sys.stdout.write(write_report(path, report, with_sigma))
    if args.check:
        again = read_report(path)
        if again != report:
            print("check: report round-trip mismatch", file=sys.stderr)
            return 1
        print("check: ok")
    return 0


def cmd_forecast(args) -> int:
    ck = _load_checkpoint(args)
    cfg = ck.config
    window = load_series(args.window)
    if window.sensor_ids != ck.sensor_ids:
        raise CliError(EXIT_DATA, "window sensor ids do not match the checkpoint")
    if window.T != cfg.data.tau:
        raise CliError(EXIT_CONFIG, f"window has {window.T} steps, model expects tau={cfg.data.tau}")
    model = ck.build_model()
    history = apply_scaler(window.values, ck.scaler).T[None]  # (1, n, tau)
    with nm.no_grad():
        res = model.forward(history, np.ones_like(history), train=False)
    mean = invert_scaler(res.mean.data[0], ck.scaler, axis=-2)
    sigma = None if res.var is None else np.sqrt(res.var.data[0]) * ck.scaler.std[:, None]
    path = Path(args.out or "forecast.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor", "horizon_step", "y_pred"] + (["sigma"] if sigma is not None else []))
        for i, sid in enumerate(ck.sensor_ids):
            for h in range(cfg.data.upsilon):
                row = [sid, h + 1, repr(float(mean[i, h]))]
                if sigma is not None:
                    row.append(repr(float(sigma[i, h])))
                w.writerow(row)
    print(f"wrote {len(ck.sensor_ids) * cfg.data.upsilon} forecasts to {path}")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args, "synth")
    seed = 0 if args.seed is None else args.seed
    dist, adjacency, incidence = plant_structures(args.n, args.communities, seed=seed)
    syn = generate_synthetic(args.n, args.T, adjacency, incidence, theta=args.theta,
                             noise_std=args.noise, seed=seed)
    ids = syn.series.sensor_ids
    save_series(out / "series.csv", syn.series)
    save_distances(out / "distances.csv", ids, dist)
    save_matrix(out / "adjacency.csv", ids, adjacency, fmt=str)
    save_structure_matrix(out / "incidence.csv", incidence.astype(np.int64), ids, fmt=str)
    cfg = RunConfig()
    cfg.data.series_path, cfg.data.distance_path = "series.csv", "distances.csv"
    cfg.train.seed = seed
    save_config(out / "config.json", cfg)
    print(f"wrote n={args.n} T={args.T} dataset with {int(adjacency.sum()) // 2} edges "
          f"and {incidence.shape[1]} communities to {out}")
    return 0


def cmd_corrupt(args) -> int:
    series = load_series(args.series)
    out = _out_dir(args, "corrupt")
    seed = 0 if args.seed is None else args.seed
    mm = simulate_missing(args.scheme, series.T, series.n, args.rate, seed, args.p_failure)
    # missing cells are zero-filled; the mask file is the source of truth
    save_series(out / "series.csv", RawSeries(series.values * mm.mask, series.sensor_ids))
    save_mask(out / "mask.csv", series.sensor_ids, mm.mask)
    print(f"scheme={args.scheme} target_rate={args.rate} missing_fraction={mm.missing_fraction!r}")
    return 0


def cmd_export_structure(args) -> int:
    ck = _load_checkpoint(args)
    m = ck.config.model
    if not (m.enable_spatial and m.enable_implicit_hypergraph):
        raise CliError(EXIT_ABLATED, "checkpoint has no implicit hypergraph module")
    model = ck.build_model()
    incidence = model.eval_incidence()
    probs = model.edge_probs().data[..., 0]
    out = _out_dir(args, "structure")
    save_structure_matrix(out / "incidence.csv", incidence.astype(np.int64), ck.sensor_ids, fmt=str)
    save_structure_matrix(out / "edge_probs.csv", probs, ck.sensor_ids)
    for j, frac in enumerate(incidence.mean(axis=0)):
        print(f"e{j},{float(frac)!r}")
    return 0


# --- entry point --------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory or file")

    p = argparse.ArgumentParser(prog="eikfnet", parents=[common])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="metric report for a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"], default="test")
    sp.add_argument("--baseline", choices=["model", "ha"], default="model")
    sp.add_argument("--check", action="store_true", help="reparse the written report and compare")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("forecast", parents=[common], help="forecast from one look-back window")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--window", required=True, help="csv with tau rows and one column per sensor")
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("synth", parents=[common], help="generate a planted-structure dataset")
    sp.add_argument("--n", type=int, default=12)
    sp.add_argument("--T", type=int, default=2000)
    sp.add_argument("--communities", type=int, default=3)
    sp.add_argument("--theta", type=float, default=0.8)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("corrupt", parents=[common], help="simulate missing observations")
    sp.add_argument("--series", required=True)
    sp.add_argument("--scheme", choices=["point", "block"], required=True)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--p-failure", type=float, default=0.0015)
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("export-structure", parents=[common], help="write the learned hypergraph")
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_export_structure)
    return p


def _thread_limit():
    raw = os.environ.get("EIKF_THREADS")
    if not raw:
        return nullcontext()
    try:
        limit = int(raw)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"EIKF_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.HashMismatchError as exc:
        print(f"hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except NonFiniteLossError as exc:
        print(f"non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DataError, ckpt.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"non-finite value: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``predict``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import secrets
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics as M
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SyntheticParams, generate_synthetic, write_edge_csv, write_speed_csv
from .errors import NonFiniteError, SgcnError
from .model import init_params
from .pipeline import (
    RunConfig,
    StageError,
    file_digest,
    parse_bool,
    prepare_data,
    stage,
    write_json,
)
from .train import fit, predict

logger = logging.getLogger("sgcn_lstm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _deterministic_scope(cfg: RunConfig):
    # single BLAS thread => one fixed reduction order
    return threadpool_limits(1) if cfg.deterministic else threadpool_limits(None)


def _resolve_seed(cfg: RunConfig) -> RunConfig:
    if cfg.seed is None:
        cfg = cfg.merged({"seed": secrets.randbits(31)})
    print(f"seed: {cfg.seed}")
    return cfg


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> dict[str, Path]:
    """Write a synthetic speed CSV, edge CSV and JSON sidecar."""
    cfg = _resolve_seed(cfg)
    with stage("synth"):
        params = SyntheticParams(cfg.nodes, cfg.timesteps, cfg.seed, cfg.beta, cfg.period,
                                 cfg.noise, cfg.amplitude, cfg.radius)
        edges, ds = generate_synthetic(**params.__dict__)
    with stage("write"):
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"speeds": out / "speeds.csv", "edges": out / "edges.csv",
                 "sidecar": out / "synthetic.json"}
        write_speed_csv(paths["speeds"], ds)
        write_edge_csv(paths["edges"], edges)
        paths["sidecar"].write_text(params.to_json() + "\n")
    return paths


def cmd_train(cfg: RunConfig) -> dict[str, Path]:
    """Train on the configured dataset; write checkpoint, epoch log and effective config."""
    cfg = _resolve_seed(cfg)
    out = Path(cfg.out)
    with stage("config"):
        tcfg = cfg.train_config()
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.ini")
    prep = prepare_data(cfg)
    with stage("fit"), _deterministic_scope(cfg):
        params = init_params(1, cfg.h_g, cfg.h_l, tcfg.seed)
        best, record, opt = fit(params, prep.train, prep.val, prep.adj, tcfg)
    with stage("write"):
        ckpt = save_checkpoint(best, opt, prep.scaler, cfg.model_config(), cfg.checkpoint_path())
        log_path = out / "epoch_log.csv"
        rows = [
            (i + 1, tl, vl, int(i + 1 == record.best_epoch))
            for i, (tl, vl) in enumerate(zip(record.train_loss, record.val_loss))
        ]
        M.write_csv(log_path, ["epoch", "train_loss", "val_loss", "best"], rows)
        record_path = write_json(out / "train_record.json", {
            "best_epoch": record.best_epoch,
            "best_val_loss": record.best_val_loss,
            "epochs_run": record.epochs_run,
            "stop_reason": record.stop_reason,
            "wall_time": record.wall_time,
        })
    print(f"best epoch {record.best_epoch} of {record.epochs_run} "
          f"({record.stop_reason}), val loss {record.best_val_loss:.6f}")
    return {"checkpoint": ckpt, "epoch_log": log_path, "record": record_path,
            "config": out / "config.ini"}


def _load_for_inference(cfg: RunConfig):
    with stage("checkpoint-load"):
        ckpt = load_checkpoint(cfg.checkpoint_path(),
                               expected_dims={"f_in": 1, "h_g": cfg.h_g, "h_l": cfg.h_l})
    prep = prepare_data(cfg, scaler=ckpt.scaler)
    return ckpt, prep


def evaluate(cfg: RunConfig):
    """Test-split predictions in standardized units, plus everything needed to report."""
    ckpt, prep = _load_for_inference(cfg)
    with stage("evaluate"), _deterministic_scope(cfg):
        y_std = predict(ckpt.params, prep.adj, prep.test, cfg.batch_size)
    return ckpt, prep, y_std


def cmd_eval(cfg: RunConfig) -> dict:
    """Metrics (standardized and mph) on the test split, persistence baseline, figure data."""
    ckpt, prep, y_std = evaluate(cfg)
    test, sc = prep.test, prep.scaler
    with stage("evaluate"):
        t_std = test.targets
        base_std = M.persistence_baseline(test)
        y_mph, t_mph, base_mph = sc.invert(y_std), sc.invert(t_std), sc.invert(base_std)
        report = {
            "model": {
                "standardized": M.compute_metrics(y_std, t_std, "standardized").to_dict(),
                "mph": M.compute_metrics(y_mph, t_mph, "mph").to_dict(),
            },
            "persistence": {
                "standardized": M.compute_metrics(base_std, t_std, "standardized").to_dict(),
                "mph": M.compute_metrics(base_mph, t_mph, "mph").to_dict(),
            },
        }
    with stage("export"):
        out = Path(cfg.out) / "eval"
        out.mkdir(parents=True, exist_ok=True)
        steps = test.target_index
        n_ts = min(cfg.timeseries_steps, len(test))
        M.write_csv(out / "fig1_timeseries.csv", ["t", "actual", "predicted"],
                    M.export_timeseries(y_mph, t_mph, steps, None, 0, n_ts))
        M.write_csv(out / "fig2_scatter.csv", ["actual", "predicted"],
                    M.export_scatter(y_mph, t_mph, cfg.scatter_points, seed=0))
        M.write_csv(out / "fig3_range.csv",
                    ["t", "actual_min", "actual_max", "predicted_min", "predicted_max"],
                    M.export_range(y_mph, t_mph, steps))
        counts, edges = M.histogram(M.residuals(y_mph, t_mph), cfg.hist_bins)
        M.write_csv(out / "fig4_residual_hist.csv", ["bin_lo", "bin_hi", "count"],
                    [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)])
        grid = M.error_speed_heatmap(y_mph, t_mph, cfg.heatmap_bins, cfg.heatmap_bins)
        se, ee = grid.speed_bin_edges, grid.error_bin_edges
        M.write_csv(out / "fig5_error_heatmap.csv",
                    ["speed_lo", "speed_hi", "error_lo", "error_hi", "log_count"],
                    [(float(se[i]), float(se[i + 1]), float(ee[j]), float(ee[j + 1]),
                      float(grid.log_counts[i, j]))
                     for i in range(se.size - 1) for j in range(ee.size - 1)])
        report["metadata"] = {
            "checkpoint": str(cfg.checkpoint_path()),
            "checkpoint_id": file_digest(cfg.checkpoint_path()),
            "split": "test",
            "test_steps": [prep.split.test.start, prep.split.test.stop],
            "n_windows": len(test),
            "figures": {
                "fig1_timeseries.csv": {"units": "mph", "aggregate": "mean over nodes",
                                        "rows": n_ts, "step_minutes": 5},
                "fig2_scatter.csv": {"units": "mph", "max_points": cfg.scatter_points},
                "fig3_range.csv": {"units": "mph", "aggregate": "min/max over nodes"},
                "fig4_residual_hist.csv": {"units": "mph", "bins": cfg.hist_bins,
                                           "residual": "predicted - actual"},
                "fig5_error_heatmap.csv": {"units": "mph", "bins": [cfg.heatmap_bins] * 2,
                                           "cell": "ln(1 + count)", "clamped": True},
            },
        }
        write_json(out / "metrics.json", report)
    m, b = report["model"]["mph"], report["persistence"]["mph"]
    print(f"test MAE {m['mae']:.4f} mph (persistence {b['mae']:.4f}), "
          f"RMSE {m['rmse']:.4f}, standardized MAE {report['model']['standardized']['mae']:.4f}")
    return report


def cmd_predict(cfg: RunConfig) -> Path:
    """Predictions in mph (clamped at 0) for target timesteps ``[start, stop)``."""
    ckpt, prep = _load_for_inference(cfg)
    with stage("predict"):
        first = prep.windows.target_index[0]
        T = prep.dataset.num_steps
        start = first if cfg.start is None else cfg.start
        stop = start + 1 if cfg.stop is None else cfg.stop
        if not first <= start < stop <= T:
            raise ValueError(f"timestep range [{start}, {stop}) outside [{first}, {T})")
        sel = prep.windows.select(range(start, stop))
        with _deterministic_scope(cfg):
            y = predict(ckpt.params, prep.adj, sel, cfg.batch_size)
        y_mph = np.maximum(prep.scaler.invert(y), 0.0)
        path = Path(cfg.out) / "predictions.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        M.write_csv(path, ["t", *prep.dataset.node_ids],
                    [(int(t), *map(float, row)) for t, row in zip(sel.target_index, y_mph)])
    return path


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI-style config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else str(f.type)
        if kind.startswith("bool"):
            common.add_argument(flag, type=parse_bool, metavar="BOOL")
        elif kind.startswith("int"):
            common.add_argument(flag, type=int)
        elif kind.startswith("float"):
            common.add_argument(flag, type=float)
        else:
            common.add_argument(flag)
    parser = _Parser(prog="sgcn-lstm", description="SGCN-LSTM traffic speed forecasting")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train a model")
    sub.add_parser("eval", parents=[common], help="evaluate on the test split, export figure data")
    sub.add_parser("predict", parents=[common], help="write predictions for a timestep range")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return cfg.merged(overrides)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (synth, train, eval, predict)")
        try:
            cfg = resolve_config(args)
        except (OSError, ValueError) as exc:
            raise StageError("config", exc) from exc
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        code = EXIT_NUMERIC if isinstance(exc.error, (NonFiniteError, FloatingPointError)) else EXIT_DATA
        print(f"error {exc}".replace("\n", " "), file=sys.stderr)
        return code
    except SgcnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: fit, predict, federate (server or client role), experiment,
synth, report.  Exit codes: 0 success, 2 configuration error, 3 protocol
error, 4 data error.
"""

from __future__ import annotations

import argparse
import csv
import socket
import sys
from pathlib import Path

import numpy as np

from .bttr import FitConfig, FitError, NormStats, fit, predict, residual_trace, select_k_cv
from .data import CsvSchema, DataError, Dataset, load_csv, load_npz, make_synthetic, save_npz
from .experiment import (
    ConfigError,
    ExperimentConfig,
    build_report,
    read_metrics_csv,
    run_experiment,
    _parse_range,
    _target_matrix,
)
from .federated import federated_fit_over, run_socket_client
from .model_io import ModelFormatError, load_model, save_model
from .sparse_tucker import HyperGrid
from .transport import ProtocolError, TransportError, serve_clients
from .wire import WireError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_DATA = 4

__all__ = ["main"]


def _schema_from_args(args) -> CsvSchema:
    if not args.response:
        raise ConfigError("response", "required for CSV data")
    return CsvSchema(
        response=[c.strip() for c in args.response.split(",")],
        task=args.task,
        event_col=args.event_col or None,
        site_col=args.site_col or None,
    )


def _load_any(path: str, args) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{path}: no such file")
    if p.suffix == ".npz":
        return load_npz(p)
    return load_csv(p, _schema_from_args(args))


def _grid_from_args(args) -> HyperGrid:
    return HyperGrid(
        snr_values=_parse_range(args.grid_snr, "grid_snr"),
        tau_values=_parse_range(args.grid_tau, "grid_tau"),
    )


def _host_port(text: str) -> tuple:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError("address", f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--response", default="", help="response column name(s), comma separated")
    p.add_argument("--task", default="regression", choices=["regression", "binary", "survival"])
    p.add_argument("--event-col", default="", help="survival event indicator column")
    p.add_argument("--site-col", default="", help="site column for by-column partitioning")


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", type=int, default=2, help="number of blocks K")
    p.add_argument("--epsilon", type=float, default=1e-8, help="residual stop threshold")
    p.add_argument("--grid-snr", default="1:50:1", help="SNR grid start:stop[:step]")
    p.add_argument("--grid-tau", default="90:100:1", help="tau grid start:stop[:step]")


def _prepare_training(ds: Dataset):
    target = _target_matrix(ds)
    stats = NormStats.from_training(ds.x, target, scale_y=ds.task != "binary")
    return stats.apply_x(ds.x), stats.apply_y(target), stats


def cmd_fit(args) -> int:
    ds = _load_any(args.data, args)
    x, y, stats = _prepare_training(ds)
    grid = _grid_from_args(args)
    if args.cv:
        search = FitConfig(max_blocks=args.blocks, epsilon=args.epsilon, grid=grid)
        cv_task = "binary" if ds.task == "binary" else "regression"
        k = select_k_cv(x, y, search, folds=args.folds, task=cv_task)
        print(f"cross-validation selected K={k}")
    else:
        k = args.blocks
    cfg = FitConfig(max_blocks=k, epsilon=args.epsilon, grid=grid)
    model = fit(x, y, cfg, normalization=stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.fbttr"
    save_model(model, path)
    trace = residual_trace(model)
    print(f"fitted {model.n_blocks} block(s) on {ds.n_samples} samples -> {path}")
    for i, (e, f) in enumerate(trace):
        print(f"  after block {i}: |E|={e:.6g} |F|={f:.6g}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    ds = _load_any(args.data, args) if args.response or args.data.endswith(".npz") \
        else _load_csv_features_only(args.data, model)
    x = ds.x
    if model.normalization is not None:
        x = model.normalization.apply_x(x)
    scores = predict(model, x)
    if model.normalization is not None:
        scores = model.normalization.invert_y(scores)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"prediction_{m}" for m in range(scores.shape[1])])
        writer.writerows(scores.tolist())
    print(f"wrote {scores.shape[0]} predictions -> {out}")
    return EXIT_OK


def _load_csv_features_only(path: str, model) -> Dataset:
    # prediction-only CSVs need no response column; all columns are features
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    try:
        x = np.array([[float(v) for v in row] for row in body])
    except ValueError as e:
        raise DataError(f"{path}: non-numeric feature value ({e})") from e
    expected = int(np.prod(model.input_shape))
    if x.shape[1] != expected:
        raise DataError(f"{path}: model expects {expected} features, file has {x.shape[1]}")
    x = x.reshape((x.shape[0],) + tuple(model.input_shape))
    return Dataset(x=x, y=np.zeros((x.shape[0], 1)), feature_names=header, task="regression")


def cmd_federate(args) -> int:
    grid = _grid_from_args(args)
    cfg = FitConfig(max_blocks=args.blocks, epsilon=args.epsilon, grid=grid)
    if args.role == "server":
        host, port = _host_port(args.listen)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(args.clients)
        print(f"listening on {host}:{listener.getsockname()[1]} for {args.clients} client(s)")
        transport = serve_clients(listener, args.clients,
                                  round_timeout=args.round_timeout, heartbeat=args.heartbeat)
        try:
            model = federated_fit_over(transport, cfg)
        finally:
            transport.close()
            listener.close()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "model.fbttr"
        save_model(model, path)
        print(f"federated model with {model.n_blocks} block(s) -> {path}")
        return EXIT_OK
    # client role
    if not args.data:
        raise ConfigError("data", "client role requires --data")
    ds = _load_any(args.data, args)
    x, y, _ = _prepare_training(ds)
    host, port = _host_port(args.connect)
    try:
        state = run_socket_client(host, port, x, y,
                                  round_timeout=args.round_timeout, heartbeat=args.heartbeat)
    except OSError as e:
        raise ProtocolError(f"cannot reach server at {host}:{port}: {e}") from e
    print(f"client finished after {len(state.local_blocks)} block(s)")
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if args.mode:
        overrides["mode"] = tuple(m.strip() for m in args.mode.split(","))
    if args.clients is not None:
        overrides["clients"] = args.clients
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.blocks is not None:
        overrides["blocks"] = args.blocks
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.out:
        overrides["out"] = args.out
    for key, value in overrides.items():
        setattr(cfg, key, value)
    report = run_experiment(cfg)
    for (method, metric), (mu, sd) in sorted(report.summary.items()):
        print(f"{method:>16} {metric:<10} {mu:.4f} +/- {sd:.4f}")
    for comp in report.comparisons:
        print(
            f"wilcoxon {comp['method_a']} vs {comp['method_b']} on {comp['metric']}: "
            f"p={comp['p_value']:.4g} (n={comp['n']})"
        )
    print(f"artifacts in {cfg.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    shape = tuple(int(v) for v in args.shape.replace("x", ",").split(",") if v.strip())
    snr = None if args.snr_db in (None, "", "inf") else float(args.snr_db)
    ds, _ = make_synthetic(shape, n_blocks=args.blocks, noise_snr_db=snr,
                           seed=args.seed, n_responses=args.responses, task=args.task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_npz(ds, out)
    print(f"wrote synthetic dataset {ds.x.shape} -> {out}")
    if ds.x.ndim == 2:
        csv_path = out.with_suffix(".csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            response_cols = (["time", "event"] if ds.task == "survival"
                             else [f"target_{m}" for m in range(ds.y.shape[1])])
            writer.writerow(ds.feature_names + response_cols)
            for xi, yi in zip(ds.x, ds.y):
                writer.writerow(list(xi) + list(yi))
        print(f"wrote CSV twin -> {csv_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        rows.extend(read_metrics_csv(path))
    if not rows:
        raise DataError("no metric rows found in the given files")
    report = build_report(rows, pairing=args.pairing)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote report -> {args.out}")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbttr",
        description="Federated block-term tensor regression toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a centralized model on one dataset")
    p.add_argument("--data", required=True, help="CSV or NPZ dataset")
    _add_schema_flags(p)
    _add_fit_flags(p)
    p.add_argument("--cv", action="store_true", help="select K by cross-validation up to --blocks")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fbttr-out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_schema_flags(p)
    p.add_argument("--out", default="predictions.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("federate", help="run one side of a federated training session")
    p.add_argument("--role", required=True, choices=["server", "client"])
    p.add_argument("--listen", default="127.0.0.1:9001", help="server bind address HOST:PORT")
    p.add_argument("--connect", default="127.0.0.1:9001", help="client target address HOST:PORT")
    p.add_argument("--clients", type=int, default=2, help="client count the server waits for")
    p.add_argument("--data", default="", help="client dataset (CSV or NPZ)")
    _add_schema_flags(p)
    _add_fit_flags(p)
    p.add_argument("--heartbeat", type=float, default=5.0, help="liveness poll interval, seconds")
    p.add_argument("--round-timeout", type=float, default=120.0, help="per-round timeout, seconds")
    p.add_argument("--out", default="fbttr-out")
    p.set_defaults(func=cmd_federate)

    p = sub.add_parser("experiment", help="run a configured experiment")
    p.add_argument("--config", default="", help="flat key=value config file")
    p.add_argument("--mode", default="", help="override: centralized,federated,hybrid,local")
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--blocks", default=None, help="override: K or 'cv'")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("synth", help="generate a planted-component synthetic dataset")
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--shape", required=True, help="samples-first shape, e.g. 200x8x6")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--snr-db", default="30", help="noise SNR in dB, or 'inf' for noiseless")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--responses", type=int, default=1)
    p.add_argument("--task", default="regression", choices=["regression", "binary", "survival"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="merge metrics tables into a comparison report")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    p.add_argument("--pairing", default="seed_block", choices=["seed_block", "block"])
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, WireError, TransportError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (DataError, ModelFormatError, FitError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: synthetic trace generation, featurization,
inter-arrival analysis, LSTM training and evaluation, clustering, and the named
end-to-end experiment replications."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, dataset, features, ingest, lstm, synth

EXPERIMENT_NAMES = ("1x60", "3x20", "60x1", "propad-1x10", "nonzero-1x10", "cluster-grid")

# experiment name -> (window preset, padding mode, nonzero filter)
_LSTM_EXPERIMENTS = {
    "1x60": ("cfg-1x60", "zero", False),
    "3x20": ("cfg-3x20", "zero", False),
    "60x1": ("cfg-60x1", "zero", False),
    "propad-1x10": ("cfg-1x10", "pro", False),
    "nonzero-1x10": ("cfg-1x10", "zero", True),
}

CONFIG_KEYS = (
    "input", "synth", "duration", "sessions", "preset", "bin_size", "history",
    "padding", "max_run", "features", "target", "train_fraction", "nonzero_filter",
    "head", "learning_rate", "epochs", "batch_size", "clip_norm", "hidden",
    "seed", "out", "tower", "users",
)


def read_config(path: str) -> dict[str, str]:
    """Key-value config file: one ``key = value`` per line, ``#`` comments."""
    out: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{line_no}: unknown config key {key!r} (valid: {', '.join(CONFIG_KEYS)})")
        out[key] = value
    return out


def _schema_from_args(args) -> dict[str, str]:
    return {
        "time": args.col_time,
        "src": args.col_src,
        "dst": args.col_dst,
        "length": args.col_length,
        "protocol": args.col_protocol,
    }


def _add_capture_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tower", help="tower address (skips inference; requires --users)")
    parser.add_argument("--users", help="comma-separated user addresses")
    parser.add_argument("--drop-bad-rows", action="store_true", help="skip malformed rows instead of failing")
    parser.add_argument("--col-time", default=ingest.DEFAULT_SCHEMA["time"])
    parser.add_argument("--col-src", default=ingest.DEFAULT_SCHEMA["src"])
    parser.add_argument("--col-dst", default=ingest.DEFAULT_SCHEMA["dst"])
    parser.add_argument("--col-length", default=ingest.DEFAULT_SCHEMA["length"])
    parser.add_argument("--col-protocol", default=ingest.DEFAULT_SCHEMA["protocol"])


def _load_labeled(path: str, args) -> tuple[list[ingest.LabeledPacket], int]:
    with open(path, newline="") as fh:
        records = ingest.parse_capture(fh, _schema_from_args(args), drop_bad_rows=args.drop_bad_rows)
    if args.tower or args.users:
        if not (args.tower and args.users):
            raise ValueError("--tower and --users must be given together")
        endpoints = ingest.EndpointMap(args.tower, frozenset(args.users.split(",")))
    else:
        try:
            endpoints = ingest.infer_endpoints(records)
        except ingest.AmbiguousEndpointsError:
            # a single-user synthetic trace is one symmetric flow; fall back to
            # the generator's fixed addresses when they match exactly
            addrs = {r.src_addr for r in records} | {r.dst_addr for r in records}
            if addrs != {synth.USER_ADDR, synth.TOWER_ADDR}:
                raise
            endpoints = synth.endpoints()
    return ingest.label_direction(records, endpoints)


def _out_dir(value: str | None) -> Path:
    out = value or os.environ.get("CELLFLOW_OUT_DIR")
    if not out:
        raise ValueError("no output directory: pass --out or set CELLFLOW_OUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _out_file(value: str | None, default_name: str) -> Path:
    if value:
        path = Path(value)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    return _out_dir(None) / default_name


def _pad_bins(bins, bin_size: float, mode: str, max_run: int):
    if mode == "zero":
        return features.zero_pad(bins, bin_size)
    if mode == "pro":
        return features.pro_pad(bins, bin_size, max_run)
    if mode == "none":
        return list(bins)
    raise ValueError(f"unknown padding mode {mode!r}")


def _window_config(args) -> dataset.WindowConfig:
    feature_names = tuple(args.features.split(",")) if args.features else dataset.DEFAULT_FEATURES
    if args.preset:
        if args.preset not in dataset.PRESETS:
            raise ValueError(f"unknown preset {args.preset!r} (valid: {', '.join(sorted(dataset.PRESETS))})")
        base = dataset.PRESETS[args.preset]
        return dataset.WindowConfig(base.bin_size, base.history_len, feature_names, args.target)
    if args.bin_size is None or args.history is None:
        raise ValueError("pass --preset or both --bin-size and --history")
    return dataset.WindowConfig(args.bin_size, args.history, feature_names, args.target)


def _train_config(args) -> lstm.TrainConfig:
    clip = None if args.clip_norm is not None and args.clip_norm <= 0 else args.clip_norm
    return lstm.TrainConfig(
        seed=args.seed,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        clip_norm=clip,
    )


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    if args.mixed:
        profiles = list(synth.DEFAULT_PROFILES.values())
        n_sessions = args.sessions or max(1, int(args.duration // 30))
        trace = synth.generate_mixed(profiles, [1.0] * len(profiles), args.duration, args.seed, n_sessions)
    else:
        if args.profile not in synth.DEFAULT_PROFILES:
            raise ValueError(f"unknown profile {args.profile!r} (valid: {', '.join(synth.DEFAULT_PROFILES)})")
        trace = synth.generate(synth.DEFAULT_PROFILES[args.profile], args.duration, args.seed)

    with open(out / "trace.csv", "w", newline="") as fh:
        ingest.write_capture(trace.packets, fh)
    with open(out / "sessions.csv", "w") as fh:
        synth.write_sessions(trace.sessions, fh)
    print(f"wrote {len(trace.packets)} packets over {len(trace.sessions)} session(s) to {out / 'trace.csv'}")
    return 0


def cmd_featurize(args) -> int:
    labeled, skipped = _load_labeled(args.input, args)
    if not labeled:
        raise ValueError("no labelable packets in the capture")
    bins = features.bin_packets(labeled, args.bin_size)
    padded = _pad_bins(bins, args.bin_size, args.padding, args.max_run)
    out = _out_file(args.out, "bins.csv")
    with open(out, "w") as fh:
        features.write_bins(padded, fh)
    print(f"wrote {len(padded)} bins ({len(bins)} non-empty) to {out}; skipped {skipped} unlabelable packet(s)")
    return 0


def cmd_interarrival(args) -> int:
    with open(args.input, newline="") as fh:
        records = ingest.parse_capture(fh, _schema_from_args(args), drop_bad_rows=args.drop_bad_rows)
    stats = features.interarrival(records, args.bucket_width)
    out = _out_file(args.out, "interarrival.csv")
    with open(out, "w") as fh:
        fh.write("bucket_upper_bound,count\n")
        for upper, count in stats.histogram:
            fh.write(f"{upper!r},{count}\n")
    print(f"deltas {len(stats.deltas)}")
    print(f"mean {stats.mean!r}")
    print(f"variance {stats.variance!r}")
    print(f"min {stats.min!r}")
    print(f"max {stats.max!r}")
    print(f"histogram written to {out}")
    return 0


def _train_regression(args) -> int:
    with open(args.in_features) as fh:
        bins = features.read_bins(fh)
    config = _window_config(args)
    ds = dataset.make_windows(bins, config)
    if args.nonzero_filter:
        ds = dataset.filter_nonzero_targets(ds)
    train_ds, _ = dataset.split(ds, args.train_fraction)
    model, losses = lstm.train(train_ds, _train_config(args), lstm.REGRESSION, hidden_size=args.hidden)
    out = _out_file(args.model_out, "model.txt")
    with open(out, "w") as fh:
        lstm.save_model(model, fh)
    print(f"trained on {len(train_ds)} windows; loss {losses[0]!r} -> {losses[-1]!r}; model saved to {out}")
    return 0


def _train_softmax(args) -> int:
    if not args.in_capture or not args.sessions_file:
        raise ValueError("softmax training needs --in-capture and --sessions")
    labeled, _ = _load_labeled(args.in_capture, args)
    with open(args.sessions_file) as fh:
        sessions = synth.read_sessions(fh)
    class_names = sorted({s.app_label for s in sessions})
    if len(class_names) > 4:
        raise ValueError(f"softmax head supports at most 4 classes, got {len(class_names)}")
    config = _window_config(args)
    ds = dataset.make_classification_windows(labeled, sessions, class_names, config)
    train_ds, test_ds = dataset.split(ds, args.train_fraction)
    model, losses = lstm.train(train_ds, _train_config(args), lstm.SOFTMAX4, hidden_size=args.hidden)
    model.class_names = tuple(class_names)
    probs = lstm.predict(test_ds, model)
    accuracy = float((probs.argmax(axis=1) == test_ds.targets.astype(int)).mean())
    out = _out_file(args.model_out, "model.txt")
    with open(out, "w") as fh:
        lstm.save_model(model, fh)
    print(
        f"trained on {len(train_ds)} windows; loss {losses[0]!r} -> {losses[-1]!r}; "
        f"held-out accuracy {accuracy:.3f} on {len(test_ds)} windows; model saved to {out}"
    )
    return 0


def cmd_train(args) -> int:
    if args.head == "softmax":
        return _train_softmax(args)
    if not args.in_features:
        raise ValueError("regression training needs --in-features")
    return _train_regression(args)


def cmd_evaluate(args) -> int:
    with open(args.model) as fh:
        model = lstm.load_model(fh)
    if model.head.kind != lstm.REGRESSION:
        raise ValueError("evaluate supports regression models; classifier accuracy is reported by train --head softmax")
    with open(args.in_features) as fh:
        bins = features.read_bins(fh)
    ds = dataset.make_windows(bins, model.window)
    if args.nonzero_filter:
        ds = dataset.filter_nonzero_targets(ds)
    train_ds, test_ds = dataset.split(ds, args.train_fraction)

    threshold = analysis.burst_threshold(train_ds.targets)
    predicted = lstm.predict(test_ds, model)
    report = analysis.evaluate_predictions(test_ds.targets, predicted, threshold)

    out = _out_dir(args.out)
    with open(out / "predictions.csv", "w") as fh:
        analysis.write_predictions(fh, test_ds.target_indices, test_ds.targets, predicted)
    with open(out / "report.txt", "w") as fh:
        fh.write(f"rmse {report.rmse!r}\n")
        fh.write(analysis.format_burst_report(report.burst))
    print(f"rmse {report.rmse!r} f1 {report.burst.f1!r} over {len(test_ds)} test windows; outputs in {out}")
    return 0


def _size_label(size: float) -> str:
    return str(int(size)) if float(size).is_integer() else str(size)


def _run_cluster_grid(labeled, bin_sizes, subsets, k, seed, out: Path) -> int:
    bins_by_size = {size: features.bin_packets(labeled, size) for size in bin_sizes}
    cells = analysis.cluster_grid(bins_by_size, seed, k=k, subsets=subsets)
    summary_lines = []
    for cell in cells:
        tag = f"{_size_label(cell.bin_size)}s_{'ratio' if 'ud_ratio' in cell.feature_subset else 'counts'}"
        with open(out / f"clusters_{tag}.csv", "w") as fh:
            analysis.write_cluster_cell(fh, cell)
        if cell.result is None:
            summary_lines.append(f"cell {tag} skipped: {cell.skip_reason}")
        else:
            sizes = np.bincount(cell.result.assignments, minlength=cell.result.k)
            summary_lines.append(
                f"cell {tag} k {cell.result.k} inertia {cell.result.inertia!r} "
                f"iterations {cell.result.iterations} sizes {'/'.join(str(int(s)) for s in sizes)}"
            )
    (out / "summary.txt").write_text("\n".join(summary_lines) + "\n")
    for line in summary_lines:
        print(line)
    return 0


def cmd_cluster(args) -> int:
    labeled, _ = _load_labeled(args.input, args)
    if not labeled:
        raise ValueError("no labelable packets in the capture")
    bin_sizes = [float(s) for s in args.bin_sizes.split(",")]
    if args.ratio == "with":
        subsets = (analysis.CLUSTER_FEATURE_SUBSETS[1],)
    elif args.ratio == "without":
        subsets = (analysis.CLUSTER_FEATURE_SUBSETS[0],)
    else:
        subsets = analysis.CLUSTER_FEATURE_SUBSETS
    return _run_cluster_grid(labeled, bin_sizes, subsets, args.k, args.seed, _out_dir(args.out))


def _experiment_packets(args) -> list[ingest.LabeledPacket]:
    if args.input:
        labeled, _ = _load_labeled(args.input, args)
        return labeled
    profiles = list(synth.DEFAULT_PROFILES.values())
    n_sessions = args.sessions or max(1, int(args.duration // 30))
    trace = synth.generate_mixed(profiles, [1.0] * len(profiles), args.duration, args.seed, n_sessions)
    out = _out_dir(args.out)
    with open(out / "trace.csv", "w", newline="") as fh:
        ingest.write_capture(trace.packets, fh)
    with open(out / "sessions.csv", "w") as fh:
        synth.write_sessions(trace.sessions, fh)
    labeled, _ = ingest.label_direction(trace.packets, synth.endpoints())
    return labeled


def _experiment_lstm(name: str, args) -> int:
    preset, padding, nonzero = _LSTM_EXPERIMENTS[name]
    base = dataset.PRESETS[preset]
    feature_names = tuple(args.features.split(",")) if args.features else dataset.DEFAULT_FEATURES
    config = dataset.WindowConfig(base.bin_size, base.history_len, feature_names, args.target)
    out = _out_dir(args.out)

    labeled = _experiment_packets(args)
    bins = features.bin_packets(labeled, config.bin_size)
    padded = _pad_bins(bins, config.bin_size, padding, args.max_run)
    ds = dataset.make_windows(padded, config)
    if nonzero:
        ds = dataset.filter_nonzero_targets(ds)
    train_ds, test_ds = dataset.split(ds, args.train_fraction)

    model, losses = lstm.train(train_ds, _train_config(args), lstm.REGRESSION, hidden_size=args.hidden)
    pred_train = lstm.predict(train_ds, model)
    pred_test = lstm.predict(test_ds, model)
    threshold = analysis.burst_threshold(train_ds.targets)
    rmse_train = analysis.rmse(pred_train, train_ds.targets)
    report = analysis.evaluate_predictions(test_ds.targets, pred_test, threshold)

    with open(out / "model.txt", "w") as fh:
        lstm.save_model(model, fh)
    with open(out / "loss_history.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(losses):
            fh.write(f"{epoch},{loss!r}\n")
    with open(out / "predictions_train.csv", "w") as fh:
        analysis.write_predictions(fh, train_ds.target_indices, train_ds.targets, pred_train)
    with open(out / "predictions_test.csv", "w") as fh:
        analysis.write_predictions(fh, test_ds.target_indices, test_ds.targets, pred_test)

    summary = [
        f"experiment {name}",
        f"seed {args.seed}",
        f"bin_size {config.bin_size!r}",
        f"history {config.history_len}",
        f"padding {padding}",
        f"nonzero_filter {'true' if nonzero else 'false'}",
        f"bins_nonempty {len(bins)}",
        f"bins_series {len(padded)}",
        f"train_windows {len(train_ds)}",
        f"test_windows {len(test_ds)}",
        f"loss_first {losses[0]!r}",
        f"loss_last {losses[-1]!r}",
        f"rmse_train {rmse_train!r}",
        f"rmse_test {report.rmse!r}",
    ] + analysis.format_burst_report(report.burst).splitlines()
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print(f"{name}: rmse_train {rmse_train!r} rmse_test {report.rmse!r} burst_f1 {report.burst.f1!r}")
    print(f"outputs in {out}")
    return 0


def _apply_config_file(args) -> None:
    """Config file values fill in any option the command line left at None."""
    if not args.config:
        return
    cfg = read_config(args.config)
    conversions = {
        "duration": float, "sessions": int, "bin_size": float, "history": int,
        "max_run": int, "train_fraction": float, "learning_rate": float,
        "epochs": int, "batch_size": int, "clip_norm": float, "hidden": int,
        "seed": int, "nonzero_filter": lambda v: v.lower() == "true",
    }
    dest_names = {"input": "input", "out": "out", "synth": "synth_spec"}
    for key, value in cfg.items():
        dest = dest_names.get(key, key)
        if getattr(args, dest, None) is None:
            setattr(args, dest, conversions.get(key, str)(value))


def cmd_experiment(args) -> int:
    _apply_config_file(args)
    if args.seed is None:
        raise ValueError("a seed is required (pass --seed or set it in the config file); wall-clock seeding is not supported")
    if args.input and args.synth_spec:
        raise ValueError("pass exactly one of --in / synth spec, not both")
    # fill residual defaults left open for the config file
    args.duration = 600.0 if args.duration is None else args.duration
    args.max_run = 2 if args.max_run is None else args.max_run
    args.train_fraction = 0.8 if args.train_fraction is None else args.train_fraction
    args.learning_rate = 0.01 if args.learning_rate is None else args.learning_rate
    args.epochs = 50 if args.epochs is None else args.epochs
    args.batch_size = 32 if args.batch_size is None else args.batch_size
    args.clip_norm = 5.0 if args.clip_norm is None else args.clip_norm
    args.hidden = 100 if args.hidden is None else args.hidden
    args.target = dataset.DEFAULT_TARGET if args.target is None else args.target

    if args.name == "cluster-grid":
        labeled = _experiment_packets(args)
        return _run_cluster_grid(
            labeled, list(analysis.CLUSTER_BIN_SIZES), analysis.CLUSTER_FEATURE_SUBSETS,
            4, args.seed, _out_dir(args.out),
        )
    return _experiment_lstm(args.name, args)


# --------------------------------------------------------------- parser setup


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellflow",
        description="Cellular-traffic forecasting pipeline: synthetic traces, features, LSTM, bursts, clustering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled trace")
    p.add_argument("--profile", default="voice_call", help="application profile name")
    p.add_argument("--mixed", action="store_true", help="mix all four default profiles with equal weights")
    p.add_argument("--sessions", type=int, help="number of sessions for --mixed")
    p.add_argument("--duration", type=float, required=True, help="trace duration in seconds")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="output directory (default: $CELLFLOW_OUT_DIR)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="bin a capture into per-interval features")
    p.add_argument("--in", dest="input", required=True, help="capture file (delimited text)")
    p.add_argument("--bin-size", type=float, required=True)
    p.add_argument("--padding", choices=("none", "zero", "pro"), default="zero")
    p.add_argument("--max-run", type=int, default=2, help="zero-run cap for pro padding")
    p.add_argument("--out", help="output bins file")
    _add_capture_args(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("interarrival", help="inter-arrival statistics over all packets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bucket-width", type=float, required=True, help="histogram bucket width in seconds")
    p.add_argument("--out", help="output histogram file")
    _add_capture_args(p)
    p.set_defaults(func=cmd_interarrival)

    p = sub.add_parser("train", help="train the LSTM on a features file (or labeled capture for --head softmax)")
    p.add_argument("--in-features", help="bins file from featurize (regression head)")
    p.add_argument("--in-capture", help="capture file (softmax head)")
    p.add_argument("--sessions", dest="sessions_file", help="session label sidecar (softmax head)")
    p.add_argument("--preset", help="named window configuration: " + ", ".join(sorted(dataset.PRESETS)))
    p.add_argument("--bin-size", type=float)
    p.add_argument("--history", type=int)
    p.add_argument("--features", help="comma-separated bin feature names")
    p.add_argument("--target", default=dataset.DEFAULT_TARGET)
    p.add_argument("--nonzero-filter", action="store_true", help="drop windows with a zero target")
    p.add_argument("--head", choices=("regression", "softmax"), default="regression")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--clip-norm", type=float, default=5.0, help="global gradient-norm cap; <=0 disables")
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--model-out", help="model output file")
    _add_capture_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE, prediction series and burst report for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in-features", required=True)
    p.add_argument("--nonzero-filter", action="store_true")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cluster", help="k-means over bin features for several bin sizes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bin-sizes", default="1,30,60", help="comma-separated bin sizes in seconds")
    p.add_argument("--with-ratio", dest="ratio", action="store_const", const="with",
                   help="cluster only the subset that includes the UL/DL ratio")
    p.add_argument("--without-ratio", dest="ratio", action="store_const", const="without",
                   help="cluster only the counts-only subset")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="output directory")
    _add_capture_args(p)
    p.set_defaults(func=cmd_cluster, ratio=None)

    p = sub.add_parser("experiment", help="run a named end-to-end replication")
    p.add_argument("name", choices=EXPERIMENT_NAMES)
    p.add_argument("--config", help="key-value config file; command-line flags take precedence")
    p.add_argument("--in", dest="input", help="capture file (default: a bundled synthetic mixed trace)")
    p.add_argument("--duration", type=float, help="synthetic trace duration (default 600)")
    p.add_argument("--sessions", type=int, help="synthetic session count (default duration/30)")
    p.add_argument("--features", help="comma-separated bin feature names")
    p.add_argument("--target", help=f"target feature (default {dataset.DEFAULT_TARGET})")
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--max-run", type=int, help="zero-run cap for propad-1x10 (default 2)")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    _add_capture_args(p)
    p.set_defaults(func=cmd_experiment, synth_spec=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

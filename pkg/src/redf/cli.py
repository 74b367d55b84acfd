"""Command-line interface: ``redf {synth,train,score,eval,forecast,ad-score}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __name__ as _pkg
from .core import Config, ConfigError, coerce_value, parse_config_text
from .data import DatasetError, Precursor, SynthSpec, load_dataset, write_synthetic
from .evalmetrics import metrics_report
from .pipeline import (DataError, NumericalError, forecast_errors, forecast_only, load_checkpoint,
                       rem_ad_score, save_checkpoint, score, split_train_val, threshold, train)

log = logging.getLogger(_pkg)

CHECKPOINT = "checkpoint.zip"
SCORES = "scores.csv"
VAL_SCORES = "val_scores.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# run directory helpers -------------------------------------------------------

def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _input_hashes(paths: Sequence[Path]) -> dict[str, str]:
    return {p.name: sha256_file(p) for p in paths if p.is_file()}


def _dataset_files(root: Path) -> list[Path]:
    return [root / name for name in ("train.csv", "test.csv", "test_label.csv")]


def _write_json(path: Path, doc: Any) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_meta(out: Path, command: str, config: Optional[Config], inputs: dict[str, str],
                extra: Optional[dict] = None) -> None:
    """Merge this command's record into ``run_meta.json``."""
    path = out / "run_meta.json"
    doc = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    entry = {"inputs_sha256": inputs, **(extra or {})}
    if config is not None:
        entry["config"] = config.to_dict()
        entry["seed"] = config.seed
    doc[command] = entry
    _write_json(path, doc)


def _read_meta(run: Path) -> dict:
    path = run / "run_meta.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# config flags ----------------------------------------------------------------

_SWITCHES = {
    "no_msp": {"msp_count": 0},
    "no_contrastive_loss": {"lambda_contra": 0.0},
    "no_graph": {"use_graph": False},
    "detach_purified": {"detach_purified": True},
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file")
    group = parser.add_argument_group("config overrides")
    for f in fields(Config):
        if f.name in ("detach_purified",):
            continue
        names = [f"--{f.name}"]
        if "_" in f.name:
            names.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*names, dest=f"cfg_{f.name}", metavar="VALUE")
    group.add_argument("--no-msp", action="store_true", help="train without MSP modules")
    group.add_argument("--no-contrastive-loss", action="store_true",
                       help="drop the dual-stream contrastive term")
    group.add_argument("--no-graph", action="store_true", help="unmasked inter-channel attention")
    group.add_argument("--detach-purified", action="store_true",
                       help="stop the contrastive gradient at the purified window")


def _config_values(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        values.update(parse_config_text(args.config.read_text(encoding="utf-8")))
    for f in fields(Config):
        raw = getattr(args, f"cfg_{f.name}", None)
        if raw is not None:
            values[f.name] = coerce_value(f.name, raw)
    for switch, change in _SWITCHES.items():
        if getattr(args, switch, False):
            values.update(change)
    return values


# commands --------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    if args.spec is not None:
        spec = SynthSpec.from_dict(json.loads(args.spec.read_text(encoding="utf-8")))
    else:
        spec = SynthSpec()
    changes = {k: getattr(args, k) for k in ("num_channels", "length", "num_events", "magnitude",
                                              "noise_sigma", "seed") if getattr(args, k) is not None}
    if args.kinds:
        changes["kinds"] = tuple(args.kinds.split(","))
    precursor = Precursor(
        lead=args.lead if args.lead is not None else spec.precursor.lead,
        alpha=args.alpha if args.alpha is not None else spec.precursor.alpha,
        shape=args.shape or spec.precursor.shape,
    )
    spec = SynthSpec.from_dict({**json.loads(spec.to_json()), **changes,
                                "precursor": vars(precursor)})
    try:
        out = write_synthetic(spec, args.out, args.name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_meta(out, "synth", None, {}, {"spec": json.loads(spec.to_json())})
    print(out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    values = _config_values(args)
    values.setdefault("num_channels", dataset.num_channels)
    config = Config.from_dict(values)
    if config.num_channels != dataset.num_channels:
        raise DataError(f"config expects {config.num_channels} channels, data has {dataset.num_channels}")
    train_part, _ = split_train_val(dataset.train, config.val_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, train_log = train(train_part, config, rem_only=args.rem_only)
    data_root = Path(args.data).resolve()
    save_checkpoint(model, out / CHECKPOINT, {"rem_only": args.rem_only})
    (out / "train_log.csv").write_text(train_log.to_csv(), encoding="utf-8")
    _write_meta(out, "train", config, _input_hashes(_dataset_files(data_root)),
                {"data": str(data_root), "rem_only": args.rem_only})
    log.info("wrote %s", out / CHECKPOINT)
    return 0


def _load_run(args: argparse.Namespace):
    run = Path(args.run)
    ckpt = run / CHECKPOINT
    if not ckpt.is_file():
        raise DataError(f"no checkpoint in {run}; run `redf train` first")
    model, meta = load_checkpoint(ckpt)
    data = args.data or _read_meta(run).get("train", {}).get("data")
    if data is None:
        raise DataError("no dataset given and none recorded by `redf train`")
    dataset = load_dataset(data)
    if dataset.num_channels != model.config.num_channels:
        raise DataError(f"checkpoint expects {model.config.num_channels} channels, "
                        f"data has {dataset.num_channels}")
    return run, model, dataset, Path(data).resolve()


def cmd_score(args: argparse.Namespace) -> int:
    run, model, dataset, data_root = _load_run(args)
    _, val = split_train_val(dataset.train, model.config.val_fraction)
    stride = args.stride or None
    test_scores = score(model, dataset.test, stride)
    val_scores = score(model, val, stride)
    _write_csv(run / SCORES, ["timestep", "score", "label"],
               ([int(t), _fmt(s), int(dataset.test_labels[t])]
                for t, s in zip(test_scores.index, test_scores.scores)))
    _write_csv(run / VAL_SCORES, ["timestep", "score"],
               ([int(t), _fmt(s)] for t, s in zip(val_scores.index, val_scores.scores)))
    _write_meta(run, "score", model.config,
                {**_input_hashes(_dataset_files(data_root)),
                 CHECKPOINT: sha256_file(run / CHECKPOINT)}, {"stride": stride})
    return 0


def _read_scores(path: Path) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    if not path.is_file():
        raise DataError(f"missing {path.name} in {path.parent}; run `redf score` first")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    try:
        index = np.array([int(r[0]) for r in body], dtype=np.int64)
        values = np.array([float(r[1]) for r in body])
        labels = np.array([int(r[2]) for r in body]) if rows and len(rows[0]) > 2 else None
    except (ValueError, IndexError):
        raise DataError(f"malformed score file {path}") from None
    return index, values, labels


def cmd_eval(args: argparse.Namespace) -> int:
    run = Path(args.run)
    index, test_scores, _ = _read_scores(run / SCORES)
    _, val_scores, _ = _read_scores(run / VAL_SCORES)
    meta = _read_meta(run)
    config = Config.from_dict(meta.get("train", {}).get("config", {}) or {})
    values = _config_values(args)
    r_pct = values.get("anomaly_ratio", config.anomaly_ratio)
    split = values.get("threshold_split", config.threshold_split)
    data = args.data or meta.get("train", {}).get("data")
    if data is None:
        raise DataError("no dataset given and none recorded by `redf train`")
    dataset = load_dataset(data)
    pooled_test = test_scores if split == "val+test" else np.array([])
    thr = threshold(val_scores, pooled_test, r_pct)
    dense = np.zeros(len(dataset.test_labels))
    dense[index] = test_scores
    pred = thr.apply(dense)
    pred[np.setdiff1d(np.arange(len(dense)), index)] = 0
    report = metrics_report(pred, dataset.test_labels, thr.delta, r_pct)
    report["threshold_split"] = split
    _write_json(run / "metrics.json", report)
    _write_csv(run / "predictions.csv", ["timestep", "pred", "label"],
               ([t, int(pred[t]), int(dataset.test_labels[t])] for t in range(len(pred))))
    _write_meta(run, "eval", None, {SCORES: sha256_file(run / SCORES),
                                    VAL_SCORES: sha256_file(run / VAL_SCORES)},
                {"r_pct": r_pct, "threshold_split": split})
    print(json.dumps({k: report[k] for k in ("aff_precision", "aff_recall", "aff_f1")}))
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    run, model, dataset, data_root = _load_run(args)
    _, val = split_train_val(dataset.train, model.config.val_fraction)
    series = dataset.test if args.split == "test" else val
    starts, forecasts = forecast_only(model, series, args.stride or None)
    errors = forecast_errors(series, starts, forecasts, model.config.lookback)
    rows = []
    for s, fc in zip(starts, forecasts):
        for c in range(fc.shape[0]):
            rows.extend([int(s + model.config.lookback + h), dataset.channel_names[c], _fmt(v)]
                        for h, v in enumerate(fc[c]))
    _write_csv(run / "forecasts.csv", ["timestep", "channel", "forecast"], rows)
    _write_json(run / "forecast_metrics.json", {"split": args.split, **errors})
    _write_meta(run, "forecast", model.config,
                {**_input_hashes(_dataset_files(data_root)),
                 CHECKPOINT: sha256_file(run / CHECKPOINT)}, {"split": args.split})
    print(json.dumps(errors))
    return 0


def cmd_ad_score(args: argparse.Namespace) -> int:
    run, model, dataset, data_root = _load_run(args)
    try:
        result = rem_ad_score(model, dataset.test, args.window)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    _write_csv(run / "ad_scores.csv", ["timestep", "score", "label"],
               ([int(t), _fmt(s), int(dataset.test_labels[t])]
                for t, s in zip(result.index, result.scores)))
    _write_meta(run, "ad-score", model.config,
                {**_input_hashes(_dataset_files(data_root)),
                 CHECKPOINT: sha256_file(run / CHECKPOINT)}, {"window": args.window})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="redf", description="Anomaly prediction with purified dual-stream forecasts.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset with anomaly precursors")
    p.add_argument("--out", type=Path, required=True, help="root directory")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--spec", type=Path, help="JSON generator spec")
    p.add_argument("--num-channels", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--num-events", type=int)
    p.add_argument("--magnitude", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--kinds", help="comma-separated event kinds, e.g. spike,level_shift")
    p.add_argument("--lead", type=int, help="precursor length")
    p.add_argument("--alpha", type=float, help="precursor amplitude as a fraction of magnitude")
    p.add_argument("--shape", choices=["ramp", "oscillation"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="jointly train REM and DFM")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--rem-only", action="store_true", help="train only the reconstruction model")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("score", cmd_score, "anomaly scores for the test split"),
                                  ("forecast", cmd_forecast, "single-stream forecasts and errors"),
                                  ("ad-score", cmd_ad_score, "reconstruction-error detection scores")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run", type=Path, required=True, help="run directory with a checkpoint")
        p.add_argument("--data", type=Path, help="dataset directory (default: the training one)")
        if name != "ad-score":
            p.add_argument("--stride", type=int, default=0, help="window stride (default: horizon)")
        if name == "forecast":
            p.add_argument("--split", choices=["test", "val"], default="test")
        if name == "ad-score":
            p.add_argument("--window", type=int, help="window length (must equal the lookback)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="threshold scores and compute affiliation metrics")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    p.add_argument("--anomaly_ratio", "--anomaly-ratio", "--r-pct", dest="cfg_anomaly_ratio",
                   metavar="R")
    p.add_argument("--threshold_split", "--threshold-split", dest="cfg_threshold_split",
                   choices=["val+test", "val-only"])
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"redf {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, DataError, FileNotFoundError) as exc:
        print(f"redf {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"redf {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

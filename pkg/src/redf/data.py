"""Dataset loading/saving and the synthetic precursor-injection generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class Dataset:
    train: np.ndarray  # (C, T_train), unlabeled
    test: np.ndarray  # (C, T_test)
    test_labels: np.ndarray  # (T_test,) in {0, 1}
    name: str = "dataset"
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.train.shape[0] != self.test.shape[0]:
            raise DatasetError("train and test disagree on the number of channels")
        if self.test_labels.shape != (self.test.shape[1],):
            raise DatasetError("test labels must have one entry per test timestep")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.train.shape[0])]

    @property
    def num_channels(self) -> int:
        return self.train.shape[0]


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    values = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DatasetError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            try:
                values[i, j] = float(cell) if cell else math.nan
            except ValueError:
                raise DatasetError(f"{path}: non-numeric value {cell!r} in row {i + 2}") from None
    return header, values


def impute(values: np.ndarray) -> np.ndarray:
    """Forward-fill NaNs down each column, then zero-fill what is left."""
    out = values.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        valid = ~np.isnan(col)
        idx = np.where(valid, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        filled = col[idx]
        filled[np.isnan(filled)] = 0.0
        out[:, j] = filled
    return out


def _read_labels(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    labels = []
    for i, row in enumerate(rows):
        if len(row) != 1:
            raise DatasetError(f"{path}: label row {i + 1} must have a single column")
        try:
            value = float(row[0])
        except ValueError:
            raise DatasetError(f"{path}: non-numeric label {row[0]!r}") from None
        if value not in (0.0, 1.0):
            raise DatasetError(f"{path}: non-binary label {row[0]!r}")
        labels.append(int(value))
    return np.asarray(labels, dtype=np.int8)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_dataset(path: str | Path) -> Dataset:
    """Read ``train.csv``, ``test.csv`` and ``test_label.csv`` from a directory."""
    root = Path(path)
    train_names, train = _read_matrix(root / "train.csv")
    test_names, test = _read_matrix(root / "test.csv")
    if len(train_names) != len(test_names):
        raise DatasetError(
            f"train has {len(train_names)} channels but test has {len(test_names)}"
        )
    labels = _read_labels(root / "test_label.csv")
    if len(labels) != test.shape[0]:
        raise DatasetError(f"{len(labels)} labels for {test.shape[0]} test rows")
    return Dataset(impute(train).T.copy(), impute(test).T.copy(), labels, root.name, train_names)


def _write_matrix(path: Path, names: list[str], values: np.ndarray) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in values.T:
            writer.writerow([format(float(v), ".17g") for v in row])


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_matrix(root / "train.csv", dataset.channel_names, dataset.train)
    _write_matrix(root / "test.csv", dataset.channel_names, dataset.test)
    with (root / "test_label.csv").open("w", encoding="utf-8") as fh:
        fh.write("label\n")
        fh.writelines(f"{int(v)}\n" for v in dataset.test_labels)
    return root


# synthetic data ------------------------------------------------------------

@dataclass
class AnomalyEvent:
    kind: str  # "spike" | "level_shift"
    start: int
    duration: int
    magnitude: float  # multiples of the clean channel's standard deviation
    channels: list[int] = field(default_factory=list)


@dataclass
class Precursor:
    lead: int = 32
    alpha: float = 0.3
    shape: str = "ramp"  # "ramp" | "oscillation"


@dataclass
class SynthSpec:
    num_channels: int = 4
    length: int = 20_000
    train_length: Optional[int] = None  # defaults to ``length``
    periods: Optional[list[list[float]]] = None
    noise_sigma: float = 0.1
    num_events: int = 20
    events: Optional[list[AnomalyEvent]] = None
    magnitude: float = 5.0
    # kinds cycled through by the default event plan
    kinds: tuple[str, ...] = ("spike",)
    spike_duration: tuple[int, int] = (16, 32)
    shift_duration: tuple[int, int] = (48, 96)
    precursor: Precursor = field(default_factory=Precursor)
    min_start: int = 256
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, values: dict) -> "SynthSpec":
        values = dict(values)
        for key in ("kinds", "spike_duration", "shift_duration"):
            if key in values:
                values[key] = tuple(values[key])
        if values.get("events") is not None:
            values["events"] = [AnomalyEvent(**e) for e in values["events"]]
        if isinstance(values.get("precursor"), dict):
            values["precursor"] = Precursor(**values["precursor"])
        return cls(**values)


def default_periods(num_channels: int) -> list[list[float]]:
    base = [(48.0, 100.0), (36.0, 75.0), (60.0, 130.0), (40.0, 90.0), (52.0, 115.0), (30.0, 66.0)]
    return [list(base[c % len(base)]) for c in range(num_channels)]


def plan_events(spec: SynthSpec, rng: np.random.Generator) -> list[AnomalyEvent]:
    """Evenly spaced events with jittered onsets, cycling through ``spec.kinds``."""
    slot = (spec.length - spec.min_start) // max(spec.num_events, 1)
    events = []
    for i in range(spec.num_events):
        kind = spec.kinds[i % len(spec.kinds)]
        lo_d, hi_d = spec.spike_duration if kind == "spike" else spec.shift_duration
        duration = int(rng.integers(lo_d, hi_d + 1))
        lo = spec.min_start + i * slot + spec.precursor.lead
        hi = spec.min_start + (i + 1) * slot - duration
        start = int(rng.integers(lo, max(hi, lo + 1)))
        events.append(AnomalyEvent(kind, start, duration, spec.magnitude))
    return events


def _check_events(events: list[AnomalyEvent], spec: SynthSpec) -> None:
    lead = spec.precursor.lead
    if lead < 1:
        raise ValueError("precursor lead must be >= 1")
    if not 0 <= spec.precursor.alpha <= 1:
        raise ValueError("precursor alpha must lie in [0, 1]")
    ordered = sorted(events, key=lambda e: e.start)
    for e in ordered:
        if e.kind not in ("spike", "level_shift"):
            raise ValueError(f"unknown event kind {e.kind!r}")
        if e.start - lead < 0 or e.start + e.duration > spec.length or e.duration < 1:
            raise ValueError(f"event at {e.start} does not fit in the series")
    for a, b in zip(ordered, ordered[1:]):
        if b.start - lead < a.start + a.duration:
            raise ValueError(f"events at {a.start} and {b.start} overlap (precursor included)")


def _base_signal(spec: SynthSpec, periods: list[list[float]], phases: np.ndarray,
                 t: np.ndarray) -> np.ndarray:
    out = np.zeros((spec.num_channels, len(t)))
    for c, chan_periods in enumerate(periods):
        for j, period in enumerate(chan_periods):
            out[c] += (0.5 ** j) * np.sin(2 * np.pi * t / period + phases[c, j])
    return out


def precursor_profile(shape: str, lead: int) -> np.ndarray:
    """Unit-amplitude precursor over ``lead`` steps, ending at full amplitude."""
    ramp = np.arange(1, lead + 1) / lead
    if shape == "ramp":
        return ramp
    if shape == "oscillation":
        return ramp * np.sin(2 * np.pi * np.arange(lead) / 8.0)
    raise ValueError(f"unknown precursor shape {shape!r}")


def generate_synthetic(spec: SynthSpec, name: str = "synthetic") -> Dataset:
    """Sinusoid mixtures plus noise; the test split carries events with precursors.

    Labels mark only the event intervals. The train split precedes the test split
    in time and contains neither events nor precursors.
    """
    rng = np.random.default_rng(spec.seed)
    periods = spec.periods or default_periods(spec.num_channels)
    if len(periods) != spec.num_channels:
        raise ValueError("need one period list per channel")
    phases = rng.uniform(0, 2 * np.pi, size=(spec.num_channels, max(len(p) for p in periods)))
    train_len = spec.train_length or spec.length
    events = spec.events if spec.events is not None else plan_events(spec, rng)
    _check_events(events, spec)

    t_train = np.arange(train_len)
    t_test = np.arange(train_len, train_len + spec.length)
    clean_train = _base_signal(spec, periods, phases, t_train)
    clean_test = _base_signal(spec, periods, phases, t_test)
    scale = clean_train.std(axis=1)

    train = clean_train + rng.normal(0, spec.noise_sigma, clean_train.shape)
    test = clean_test + rng.normal(0, spec.noise_sigma, clean_test.shape)
    labels = np.zeros(spec.length, dtype=np.int8)
    pre = spec.precursor
    profile = precursor_profile(pre.shape, pre.lead)
    for e in events:
        chans = e.channels or list(range(spec.num_channels))
        for c in chans:
            amp = e.magnitude * scale[c]
            test[c, e.start - pre.lead:e.start] += pre.alpha * amp * profile
            if e.kind == "spike":
                # sharp rise and decay inside the event window
                shape = np.exp(-np.abs(np.arange(e.duration) - e.duration / 4) / (e.duration / 4))
                test[c, e.start:e.start + e.duration] += amp * shape
            else:
                test[c, e.start:e.start + e.duration] += amp
        labels[e.start:e.start + e.duration] = 1
    names = [f"ch{c}" for c in range(spec.num_channels)]
    return Dataset(train, test, labels, name, names)


def write_synthetic(spec: SynthSpec, root: str | Path, name: str = "synthetic") -> Path:
    """Generate and write ``<root>/<name>/`` with the CSVs and ``spec.json``."""
    dataset = generate_synthetic(spec, name)
    out = save_dataset(dataset, Path(root) / name)
    (out / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    return out

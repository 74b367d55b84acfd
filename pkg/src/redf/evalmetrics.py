"""Event-based affiliation metrics and pointwise diagnostics (no point adjustment).

Affiliation is evaluated in discrete time. Each ground-truth event owns the
timesteps closer to it than to any other event (a tie goes to the earlier event).
Inside a zone:

* precision: each predicted point x at distance d(x, E) from the event scores the
  fraction of zone timesteps u with d(u, E) >= d(x, E);
* recall: each event point y at distance d to the nearest prediction in the zone
  scores the fraction of zone timesteps u with |u - y| >= d (0 without predictions).

Zone precision/recall are means over points; the reported precision is the mean
over zones holding predictions, recall the mean over all zones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Event = tuple[int, int]  # [start, end)


@dataclass
class EventLabels:
    labels: np.ndarray
    events: list[Event]


@dataclass
class AffiliationReport:
    aff_precision: float
    aff_recall: float
    aff_f1: float
    precision_defined: bool = True
    recall_defined: bool = True
    zone_precision: list[float] = field(default_factory=list)
    zone_recall: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v: float):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "aff_precision": clean(self.aff_precision),
            "aff_recall": clean(self.aff_recall),
            "aff_f1": self.aff_f1,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "zone_precision": [clean(v) for v in self.zone_precision],
            "zone_recall": list(self.zone_recall),
        }


def extract_events(labels) -> EventLabels:
    """Maximal runs of 1s as half-open intervals."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be binary")
    padded = np.concatenate([[0], arr.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    events = [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]
    return EventLabels(arr.astype(np.int8), events)


def events_to_labels(events: list[Event], length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.int8)
    for a, b in events:
        out[a:b] = 1
    return out


def zone_bounds(events: list[Event], length: int, origin: int = 0) -> list[tuple[int, int]]:
    """Affiliation zone [lo, hi) of each (sorted, disjoint) ground-truth event.

    The timeline is [origin, origin + length).
    """
    cuts = [origin]
    for (_, b_prev), (a_next, _) in zip(events, events[1:]):
        # last point of the earlier event is b_prev - 1; ties stay with it
        cuts.append((a_next + b_prev - 1) // 2 + 1)
    cuts.append(origin + length)
    return list(zip(cuts[:-1], cuts[1:]))


def _precision_survival(dist: np.ndarray, a: int, b: int, lo: int, hi: int) -> np.ndarray:
    # fraction of zone points u with d(u, [a, b)) >= dist
    left, right = a - lo, hi - b
    count = np.maximum(left - dist + 1, 0) + np.maximum(right - dist + 1, 0)
    return np.where(dist == 0, hi - lo, count) / (hi - lo)


def _recall_survival(y: np.ndarray, dist: np.ndarray, lo: int, hi: int) -> np.ndarray:
    # fraction of zone points u with |u - y| >= dist
    count = np.maximum(y - dist - lo + 1, 0) + np.maximum(hi - y - dist, 0)
    return np.where(dist == 0, hi - lo, count) / (hi - lo)


def affiliation_batch(preds: np.ndarray, truth_events: list[Event], length: int,
                      origin: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Affiliation precision and recall for many prediction rows against one truth.

    ``preds`` is (B, length) binary, column i being timestep origin + i; truth
    events use the same absolute timesteps. Returns (precision, recall,
    zone_precision, zone_recall); precision entries are NaN where a row (or zone)
    has no predictions.
    """
    preds = np.asarray(preds, dtype=bool)
    if preds.ndim != 2 or preds.shape[1] != length:
        raise ValueError("preds must be (batch, length)")
    if not truth_events:
        raise ValueError("recall is undefined without ground-truth events")
    rows = preds.shape[0]
    zones = zone_bounds(truth_events, length, origin)
    zone_precision = np.full((rows, len(zones)), np.nan)
    zone_recall = np.zeros((rows, len(zones)))
    big = 1 << 62  # "no prediction on this side"; far beyond any timestep
    for j, ((a, b), (lo, hi)) in enumerate(zip(truth_events, zones)):
        block = preds[:, lo - origin:hi - origin]
        t = np.arange(lo, hi)
        n_pred = block.sum(axis=1)
        has = n_pred > 0

        dist = np.maximum(np.maximum(a - t, t - (b - 1)), 0)
        surv = _precision_survival(dist, a, b, lo, hi)
        zone_prec = (block * surv).sum(axis=1) / np.maximum(n_pred, 1)
        zone_precision[has, j] = zone_prec[has]

        # nearest predicted position on each side, by running max/min of indices
        idx = np.where(block, t, -big)
        last = np.maximum.accumulate(idx, axis=1)
        idx = np.where(block, t, big)
        nxt = np.minimum.accumulate(idx[:, ::-1], axis=1)[:, ::-1]
        y = np.arange(a, b)
        near = np.minimum(y - last[:, a - lo:b - lo], nxt[:, a - lo:b - lo] - y)
        rec = _recall_survival(y, near, lo, hi).mean(axis=1)
        zone_recall[:, j] = np.where(has, rec, 0.0)

    counted = (~np.isnan(zone_precision)).sum(axis=1)
    total = np.nansum(zone_precision, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(counted > 0, total / np.maximum(counted, 1), np.nan)
    return precision, zone_recall.mean(axis=1), zone_precision, zone_recall


def _f1(p: float, r: float) -> float:
    if math.isnan(p) or math.isnan(r) or p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def affiliation_metrics(pred: EventLabels, truth: EventLabels, length: int,
                        origin: int = 0) -> AffiliationReport:
    """Affiliation report on the timeline [origin, origin + length)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if not truth.events:
        return AffiliationReport(math.nan, math.nan, 0.0, bool(pred.events), False)
    labels = events_to_labels([(a - origin, b - origin) for a, b in pred.events], length)[None, :]
    precision, recall, zone_prec, zone_rec = affiliation_batch(labels, truth.events, length, origin)
    p, r = float(precision[0]), float(recall[0])
    return AffiliationReport(p, r, _f1(p, r), not math.isnan(p), True,
                             [float(v) for v in zone_prec[0]], [float(v) for v in zone_rec[0]])


def affiliation_from_labels(pred, truth) -> AffiliationReport:
    pred_ev, truth_ev = extract_events(pred), extract_events(truth)
    if len(pred_ev.labels) != len(truth_ev.labels):
        raise ValueError("prediction and truth lengths differ")
    return affiliation_metrics(pred_ev, truth_ev, len(truth_ev.labels))


def pointwise_metrics(pred, truth) -> tuple[float, float, float]:
    """Plain confusion-matrix precision, recall and F1; 0 where undefined."""
    pred, truth = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, _f1(precision, recall)


def metrics_report(pred, truth, threshold: float, r_pct: float) -> dict:
    """JSON-ready evaluation document."""
    aff = affiliation_from_labels(pred, truth)
    p, r, f1 = pointwise_metrics(pred, truth)
    doc = aff.to_dict()
    doc.update({
        "pointwise_p": p, "pointwise_r": r, "pointwise_f1": f1,
        "threshold": threshold, "r_pct": r_pct,
        "n_pred_events": len(extract_events(pred).events),
        "n_truth_events": len(extract_events(truth).events),
    })
    return doc

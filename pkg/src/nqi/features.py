"""Windowing of the hold-time series and the 7-element per-window feature vector."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .keystroke import TypingSession, hold_times

WINDOW_S = 90.0
MIN_KEYS = 30
HIST_EDGES = (0.0, 0.125, 0.25, 0.375, 0.5)
OUTLIER_IQR_FACTOR = 1.5

FEATURE_NAMES = ("v_out", "v_iqr", "v_de", "h0", "h1", "h2", "h3")
FEATURE_COLUMNS = ("subject_id", "session_id", "window_index") + FEATURE_NAMES


@dataclass(frozen=True)
class HoldTimeWindow:
    window_index: int
    start_time: float
    hold_times: tuple[float, ...]
    press_times: tuple[float, ...]
    overlap_pairs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.hold_times)


@dataclass(frozen=True)
class FeatureVector:
    v_out: float
    v_iqr: float
    v_de: float
    v_hst: tuple[float, float, float, float]

    def as_array(self) -> np.ndarray:
        return np.array([self.v_out, self.v_iqr, self.v_de, *self.v_hst], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> FeatureVector:
        if len(values) != 7:
            raise ValueError(f"feature vector needs 7 values, got {len(values)}")
        v = [float(x) for x in values]
        return cls(v[0], v[1], v[2], (v[3], v[4], v[5], v[6]))


def partition_windows(
    hold_series: Sequence[tuple[float, float]],
    window_s: float = WINDOW_S,
    min_keys: int = MIN_KEYS,
    origin: float | None = None,
) -> list[HoldTimeWindow]:
    """Split (press_time, hold_time) pairs into non-overlapping windows.

    Windows are anchored at ``origin`` (default: the first press). Windows
    holding fewer than ``min_keys`` hold times are discarded; survivors keep
    their original index.
    """
    if window_s <= 0:
        raise ValueError("window_s must be positive")
    if not hold_series:
        return []
    if origin is None:
        origin = hold_series[0][0]
    buckets: dict[int, list[tuple[float, float]]] = {}
    for press, hold in hold_series:
        idx = math.floor((press - origin) / window_s)
        buckets.setdefault(idx, []).append((press, hold))
    windows = []
    for idx in sorted(buckets):
        items = buckets[idx]
        if len(items) < min_keys:
            continue
        presses = tuple(p for p, _ in items)
        holds = tuple(h for _, h in items)
        # release of key k minus press of key k+1, both inside this window
        overlaps = tuple(
            (p1 + h1) - p2 for (p1, h1), (p2, _) in zip(items[:-1], items[1:])
        )
        windows.append(HoldTimeWindow(idx, origin + idx * window_s, holds, presses, overlaps))
    return windows


def quartiles(values: Sequence[float]) -> tuple[float, float, float]:
    """First, second and third quartile by linear interpolation of order statistics."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("quartiles of an empty sequence are undefined")
    q1, q2, q3 = np.quantile(arr, (0.25, 0.5, 0.75), method="linear")
    return float(q1), float(q2), float(q3)


def outlier_fraction(window: HoldTimeWindow) -> float:
    q1, _, q3 = quartiles(window.hold_times)
    iqr = q3 - q1
    low = q1 - OUTLIER_IQR_FACTOR * iqr
    high = q3 + OUTLIER_IQR_FACTOR * iqr
    ht = np.asarray(window.hold_times)
    return int(np.count_nonzero((ht < low) | (ht > high))) / ht.size


def iqr_skewness(window: HoldTimeWindow) -> float:
    q1, q2, q3 = quartiles(window.hold_times)
    if q3 == q1:
        return 0.5
    return (q2 - q1) / (q3 - q1)


def ht_histogram(window: HoldTimeWindow) -> tuple[float, float, float, float]:
    ht = np.asarray(window.hold_times)
    counts, _ = np.histogram(ht[ht < HIST_EDGES[-1]], bins=HIST_EDGES)
    n = ht.size
    return tuple(int(c) / n for c in counts)  # type: ignore[return-value]


def flight_overlap(window: HoldTimeWindow) -> float:
    if not window.overlap_pairs:
        return 0.0
    clamped = np.maximum(np.asarray(window.overlap_pairs), 0.0)
    return float(clamped.mean())


def feature_vector(window: HoldTimeWindow) -> FeatureVector:
    return FeatureVector(
        v_out=outlier_fraction(window),
        v_iqr=iqr_skewness(window),
        v_de=flight_overlap(window),
        v_hst=ht_histogram(window),
    )


@dataclass(frozen=True)
class FeatureRow:
    subject_id: str
    session_id: str
    window_index: int
    features: FeatureVector


def featurize_session(
    session: TypingSession, window_s: float = WINDOW_S, min_keys: int = MIN_KEYS
) -> list[FeatureRow]:
    windows = partition_windows(hold_times(session), window_s, min_keys)
    return [
        FeatureRow(session.subject_id, session.session_id, w.window_index, feature_vector(w))
        for w in windows
    ]


def write_features(rows: Iterable[FeatureRow], path: str | Path) -> int:
    rows = sorted(rows, key=lambda r: (r.subject_id, r.session_id, r.window_index))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FEATURE_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.subject_id, r.session_id, r.window_index]
                + [repr(float(v)) for v in r.features.as_array()]
            )
    return len(rows)


def read_features(path: str | Path) -> list[FeatureRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if tuple(reader.fieldnames) != FEATURE_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(FEATURE_COLUMNS)}")
        for row in reader:
            rows.append(
                FeatureRow(
                    row["subject_id"],
                    row["session_id"],
                    int(row["window_index"]),
                    FeatureVector.from_array([float(row[c]) for c in FEATURE_NAMES]),
                )
            )
    return rows

"""Report assembly: Table-1/2/4 style rows, ROC point files, box-plot quartiles."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .config import RunConfig, parse_cost_ratio
from .ensemble import CrossValResult, NqiScore, rollup
from .evalstats import (
    ComparisonReport,
    CutPoint,
    ScoredCohort,
    boxplot_stats,
    compare_metrics,
    youden_cutpoint,
)
from .keystroke import Sex, SubjectRecord

LOWER_IS_PD = {"tapping_single": False, "tapping_alternating": False, "typing_speed": False}
BASE_COVARIATES = ("sex", "age", "education_years")


@dataclass(frozen=True)
class Evaluation:
    table: pd.DataFrame
    comparison: ComparisonReport
    cutpoints: tuple[CutPoint, ...]
    per_window: bool


def evaluation_table(
    scores: Sequence[NqiScore],
    subjects: Mapping[str, SubjectRecord],
    typing_speed: Mapping[str, float] | None = None,
    per_window: bool = False,
) -> pd.DataFrame:
    """One row per subject (or per window) with label, covariates and metrics."""
    if per_window:
        if any(s.window_index is None for s in scores):
            raise ValueError("per-window evaluation needs a window-level score file")
        units = list(scores)
    elif any(s.window_index is not None for s in scores):
        _, units = rollup(scores)
    else:
        units = list(scores)
    unknown = {s.subject_id for s in units} - set(subjects)
    if unknown:
        raise ValueError(f"scores reference subjects missing from metadata: {sorted(unknown)[:5]}")
    records = []
    for s in units:
        rec = subjects[s.subject_id]
        row: dict[str, Any] = {
            "subject_id": s.subject_id,
            "label": rec.group.value,
            "sex": 1.0 if rec.sex is Sex.MALE else 0.0,
            "age": rec.age,
            "education_years": rec.education_years,
            "nqi": s.value,
            "tapping_single": np.nan if rec.tapping_single is None else rec.tapping_single,
            "tapping_alternating": np.nan if rec.tapping_alternating is None else rec.tapping_alternating,
        }
        if typing_speed is not None:
            row["typing_speed"] = typing_speed.get(s.subject_id, np.nan)
        records.append(row)
    return pd.DataFrame.from_records(records)


def evaluate(
    scores: Sequence[NqiScore],
    subjects: Mapping[str, SubjectRecord],
    config: RunConfig,
    typing_speed: Mapping[str, float] | None = None,
    per_window: bool = False,
) -> Evaluation:
    table = evaluation_table(scores, subjects, typing_speed, per_window)
    if per_window:
        metrics = ["nqi"]
    else:
        metrics = [m for m in ("nqi", "tapping_alternating", "tapping_single", "typing_speed")
                   if m in table.columns and table[m].notna().any()]
    extra = {"nqi": ("typing_speed",)} if "typing_speed" in table.columns else {}
    comparison = compare_metrics(
        table, metrics, covariates=BASE_COVARIATES, extra_covariates=extra,
        higher_is_pd=LOWER_IS_PD, n_boot=config.n_boot, seed=config.seed,
    )
    nqi = table[table["nqi"].notna()]
    cohort = ScoredCohort.from_arrays(nqi["nqi"].to_numpy(), nqi["label"].tolist(),
                                      nqi["subject_id"].astype(str).tolist())
    cuts = tuple(youden_cutpoint(cohort, *parse_cost_ratio(r)) for r in config.cost_ratios)
    return Evaluation(table, comparison, cuts, per_window)


def _fmt(x: float, digits: int = 3) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{x:.{digits}f}"


def _num(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else float(x)


def _threshold(x: float) -> float | str:
    # JSON has no infinities; the extreme cut-points mean "call everyone PD/control"
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def evaluation_to_dict(ev: Evaluation, config: RunConfig) -> dict[str, Any]:
    rows = []
    for r in ev.comparison.rows:
        rows.append({
            "metric": r.metric, "n_pd": r.n_pd, "n_control": r.n_control,
            "mean_pd": _num(r.mean_pd), "std_pd": _num(r.std_pd),
            "mean_control": _num(r.mean_control), "std_control": _num(r.std_control),
            "unadjusted_p": _num(r.unadjusted_p), "adjusted_p": _num(r.adjusted_p),
            "adjusted_separated": r.adjusted_separated, "covariates": list(r.covariates),
            "higher_is_pd": r.higher_is_pd, "auc": r.roc.auc,
            "auc_ci_low": _num(r.roc.ci_low), "auc_ci_high": _num(r.roc.ci_high),
        })
    cuts = [
        {"cost": _ratio_label(c), "threshold": _threshold(c.threshold), "sensitivity": c.sensitivity,
         "specificity": c.specificity, "accuracy": c.accuracy, "tp": c.tp, "fn": c.fn,
         "tn": c.tn, "fp": c.fp}
        for c in ev.cutpoints
    ]
    delong = [
        {"metric_a": a, "metric_b": b, "auc_a": d.auc_a, "auc_b": d.auc_b, "z": _num(d.z), "p": d.p}
        for (a, b), d in ev.comparison.delong.items()
    ]
    return {
        "config": config.to_dict(),
        "mode": "per_window" if ev.per_window else "per_subject",
        "group_comparison": rows,
        "cutpoints": cuts,
        "delong": delong,
        "delong_common_subjects": ev.comparison.common_subjects,
    }


def _ratio_label(c: CutPoint) -> str:
    def short(v: float) -> str:
        return str(int(v)) if float(v).is_integer() else repr(v)

    return f"{short(c.cost_fn)}/{short(c.cost_fp)}"


def _config_header(config: RunConfig) -> list[str]:
    return ["# " + ", ".join(f"{k}={v}" for k, v in config.to_dict().items())]


def render_evaluation(ev: Evaluation, config: RunConfig) -> str:
    lines = _config_header(config)
    lines.append(f"# mode: {'per-window' if ev.per_window else 'per-subject'}")
    lines.append("")
    lines.append("Group comparison (unadjusted: two-sided Mann-Whitney U; adjusted: logistic Wald)")
    header = f"{'metric':<22}{'PD mean (std)':>20}{'Control mean (std)':>22}{'unadj. p':>10}{'adj. p':>10}   AUC (95% CI)"
    lines.append(header)
    for r in ev.comparison.rows:
        pd_s = f"{_fmt(r.mean_pd)} ({_fmt(r.std_pd)})"
        ct_s = f"{_fmt(r.mean_control)} ({_fmt(r.std_control)})"
        auc = f"{_fmt(r.roc.auc, 2)} ({_fmt(r.roc.ci_low, 2)}-{_fmt(r.roc.ci_high, 2)})"
        lines.append(f"{r.metric:<22}{pd_s:>20}{ct_s:>22}{_fmt(r.unadjusted_p):>10}{_fmt(r.adjusted_p):>10}   {auc}")
    lines.append("")
    lines.append("nQi cut-off points (generalized Youden index)")
    lines.append(f"{'cost FN/FP':<12}{'cut-off':>10}{'Se':>7}{'Sp':>7}{'Acc':>7}{'TP':>5}{'FN':>5}{'TN':>5}{'FP':>5}")
    for c in ev.cutpoints:
        lines.append(
            f"{_ratio_label(c):<12}{_fmt(c.threshold):>10}{_fmt(c.sensitivity, 2):>7}"
            f"{_fmt(c.specificity, 2):>7}{_fmt(c.accuracy, 2):>7}{c.tp:>5}{c.fn:>5}{c.tn:>5}{c.fp:>5}"
        )
    if ev.comparison.delong:
        lines.append("")
        lines.append(f"DeLong tests ({ev.comparison.common_subjects} common subjects)")
        for (a, b), d in ev.comparison.delong.items():
            lines.append(f"{a} vs {b}: AUC {_fmt(d.auc_a)} vs {_fmt(d.auc_b)}, z = {_fmt(d.z)}, p = {_fmt(d.p, 4)}")
    return "\n".join(lines) + "\n"


def write_roc_points(ev: Evaluation, out_dir: Path) -> list[Path]:
    paths = []
    for r in ev.comparison.rows:
        path = out_dir / f"roc_{r.metric}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "sensitivity", "specificity"])
            for t, se, sp in r.roc.points:
                w.writerow([repr(float(t)), repr(float(se)), repr(float(sp))])
        paths.append(path)
    return paths


def write_boxplot(ev: Evaluation, out_dir: Path) -> Path:
    path = out_dir / "boxplot.csv"
    cols = ["metric", "group", "n", "q1", "median", "q3", "whisker_low", "whisker_high", "n_outliers"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in ev.comparison.rows:
            sub = ev.table[ev.table[r.metric].notna()]
            for group in ("pd", "control"):
                vals = sub.loc[sub["label"] == group, r.metric].to_numpy(dtype=float)
                if vals.size == 0:
                    continue
                st = boxplot_stats(vals)
                w.writerow([r.metric, group, vals.size] + [repr(st[c]) for c in cols[3:8]] + [st["n_outliers"]])
    return path


def write_cutpoints(ev: Evaluation, out_dir: Path) -> Path:
    path = out_dir / "cutpoints.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost_fn_fp", "threshold", "sensitivity", "specificity", "accuracy", "tp", "fn", "tn", "fp"])
        for c in ev.cutpoints:
            w.writerow([_ratio_label(c), repr(c.threshold), repr(c.sensitivity), repr(c.specificity),
                        repr(c.accuracy), c.tp, c.fn, c.tn, c.fp])
    return path


def crossval_to_dict(result: CrossValResult, config: RunConfig) -> dict[str, Any]:
    return {
        "config": config.to_dict(),
        "folds": [
            {k: (_num(v) if isinstance(v, float) else v) for k, v in row.items()}
            for row in result.table()
        ],
    }


def render_crossval(result: CrossValResult, config: RunConfig) -> str:
    lines = _config_header(config)
    lines.append("")
    lines.append(f"{'Test dataset':<14}{'Train dataset':<15}{'n PD/Ctrl':>10}{'AUC':>8}")
    for row in result.table():
        counts = f"{row['n_pd']}/{row['n_control']}"
        trained = "" if row["trained_on"] == "-" else row["trained_on"]
        lines.append(f"{row['dataset']:<14}{trained:<15}{counts:>10}{_fmt(row['auc'], 3):>8}")
    return "\n".join(lines) + "\n"


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=False, allow_nan=False) + "\n"


def read_typing_speed(path: str | Path) -> dict[str, float]:
    """Per-subject mean of per-session typing speeds."""
    per_subject: dict[str, list[float]] = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            per_subject[row["subject_id"]].append(float(row["typing_speed"]))
    return {k: float(np.mean(v)) for k, v in sorted(per_subject.items())}


def write_typing_speed(rows: Iterable[tuple[str, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "session_id", "typing_speed"])
        for sid, sess, v in rows:
            w.writerow([sid, sess, repr(v)])

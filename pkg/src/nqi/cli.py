"""Command-line entry point: simulate, featurize, train, score, crossval, evaluate."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import fields
from pathlib import Path
from typing import Iterator, Sequence

from . import report
from .config import RunConfig
from .ensemble import (
    FeatureCohort,
    build_corpus,
    cross_validate_features,
    dumps_model,
    load_model,
    rollup,
    score_windows,
    write_subject_scores,
    write_window_scores,
    read_scores,
)
from .features import featurize_session, read_features, write_features
from .keystroke import (
    TypingSpeedError,
    ValidationPolicy,
    ingest_log,
    read_metadata,
    typing_speed,
    write_log,
    write_metadata,
)
from .synth import ImpairmentParams, generate_cohort

log = logging.getLogger(__name__)

_DEFAULTS = RunConfig()


class CliError(Exception):
    pass


@contextlib.contextmanager
def staged_outputs(targets: Sequence[Path]) -> Iterator[list[Path]]:
    """Yield temp paths; move them onto ``targets`` only if the block succeeds."""
    targets = [Path(t) for t in targets]
    for t in targets:
        t.parent.mkdir(parents=True, exist_ok=True)
    tmpdir = Path(tempfile.mkdtemp(prefix=".nqi-", dir=targets[0].parent))
    try:
        staged = [tmpdir / f"{i}-{t.name}" for i, t in enumerate(targets)]
        yield staged
        for s, t in zip(staged, targets):
            os.replace(s, t)
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    if overrides.get("cost_ratios") is not None:
        overrides["cost_ratios"] = tuple(overrides["cost_ratios"].split(","))
    return cfg.override(**overrides)


def _add_config_flags(p: argparse.ArgumentParser, names: Sequence[str]) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    d = _DEFAULTS
    spec = {
        "window_s": (float, f"window length in seconds (default {d.window_s})"),
        "min_keys": (int, f"minimum hold times per window (default {d.min_keys})"),
        "C": (float, f"SVR penalty (default {d.C})"),
        "epsilon": (float, f"SVR tube half-width (default {d.epsilon})"),
        "n_models": (int, f"ensemble size (default {d.n_models})"),
        "normalization_constant": (float, f"UPDRS-III divisor (default {d.normalization_constant})"),
        "max_hold_s": (float, f"drop hold times above this (default {d.max_hold_s})"),
        "n_boot": (int, f"bootstrap replicates for AUC CIs (default {d.n_boot})"),
        "seed": (int, f"master seed (default {d.seed})"),
        "cost_ratios": (str, f"comma-separated FN/FP cost ratios (default {','.join(d.cost_ratios)})"),
        "bootstrap_unit": (str, f"bagging unit: window or subject (default {d.bootstrap_unit})"),
        "workers": (int, f"worker threads (default {d.workers}); never changes results"),
    }
    for name in names:
        if name == "standardize":
            continue
        typ, help_ = spec[name]
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None, help=help_)
    if "standardize" in names:
        p.add_argument("--standardize", dest="standardize", action="store_true", default=None,
                       help="standardize features before SVR training (default off)")


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    impairment = None if args.null_effect else ImpairmentParams(
        burst_enter_prob=args.burst_enter, burst_exit_prob=args.burst_exit,
        burst_sigma_multiplier=args.burst_sigma, burst_mean_shift=args.burst_shift,
    )
    cohort = generate_cohort(
        args.n_pd, args.n_control, impairment=impairment, seed=cfg.seed, dataset=args.dataset,
        sessions_per_subject=args.sessions, session_minutes=args.minutes,
    )
    out = Path(args.out_dir)
    with staged_outputs([out / "keystrokes.csv", out / "subjects.csv"]) as (log_tmp, meta_tmp):
        write_log((cohort.sessions[k] for k in sorted(cohort.sessions)), log_tmp)
        write_metadata((cohort.subjects[k] for k in sorted(cohort.subjects)), meta_tmp)
    log.info("wrote %d subjects, %d sessions to %s", len(cohort.subjects), len(cohort.sessions), out)


def cmd_featurize(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    sessions = ingest_log(args.log, ValidationPolicy(max_hold=cfg.max_hold_s))
    rows, speeds = [], []
    for session in sessions:
        for reason, count in sorted(session.warnings.items()):
            log.warning("%s/%s: dropped %d events (%s)", session.subject_id, session.session_id, count, reason)
        session_rows = featurize_session(session, cfg.window_s, cfg.min_keys)
        if not session_rows:
            log.warning("%s/%s: no window with >= %d hold times", session.subject_id,
                        session.session_id, cfg.min_keys)
        rows.extend(session_rows)
        try:
            speeds.append((session.subject_id, session.session_id, typing_speed(session)))
        except TypingSpeedError:
            pass
    targets = [Path(args.out)] + ([Path(args.speed_out)] if args.speed_out else [])
    with staged_outputs(targets) as staged:
        n = write_features(rows, staged[0])
        if args.speed_out:
            report.write_typing_speed(speeds, staged[1])
    if n == 0:
        log.warning("no feature rows written: every window had fewer than %d hold times", cfg.min_keys)


def cmd_train(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    subjects = {r.subject_id: r for r in read_metadata(args.metadata)}
    rows = read_features(args.features)
    corpus = build_corpus(rows, subjects, cfg.normalization_constant)
    model = cfg.ensemble_params().train(corpus, provenance=args.provenance or Path(args.features).stem)
    with staged_outputs([Path(args.out)]) as (tmp,):
        tmp.write_text(dumps_model(model))
    log.info("trained %d units on %d windows", model.n_models, len(corpus))


def cmd_score(args: argparse.Namespace) -> None:
    model = load_model(args.model)
    windows = score_windows(model, read_features(args.features))
    _, subjects = rollup(windows)
    targets = [Path(args.out)] + ([Path(args.subject_out)] if args.subject_out else [])
    with staged_outputs(targets) as staged:
        write_window_scores(windows, staged[0])
        if args.subject_out:
            write_subject_scores(subjects, staged[1])


def _feature_cohort(name: str, features: str, metadata: str) -> FeatureCohort:
    subjects = {r.subject_id: r for r in read_metadata(metadata)}
    return FeatureCohort(name, tuple(read_features(features)), subjects)


def cmd_crossval(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    fold_a = _feature_cohort(args.name_a, *args.fold_a)
    fold_b = _feature_cohort(args.name_b, *args.fold_b)
    result = cross_validate_features(fold_a, fold_b, cfg.ensemble_params())
    out = Path(args.out_dir)
    names = ["subject_scores.csv", "window_scores.csv", "crossval.json", "crossval.txt"]
    with staged_outputs([out / n for n in names]) as staged:
        write_subject_scores(result.subject_scores, staged[0])
        write_window_scores(result.window_scores, staged[1])
        staged[2].write_text(report.dump_json(report.crossval_to_dict(result, cfg)))
        staged[3].write_text(report.render_crossval(result, cfg))
    sys.stdout.write(report.render_crossval(result, cfg))


def cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = _config_from_args(args)
    subjects = {r.subject_id: r for r in read_metadata(args.metadata)}
    scores = read_scores(args.scores)
    speeds = report.read_typing_speed(args.typing_speed) if args.typing_speed else None
    ev = report.evaluate(scores, subjects, cfg, speeds, per_window=args.per_window)
    out = Path(args.out_dir)
    metrics = [r.metric for r in ev.comparison.rows]
    names = ["report.json", "report.txt", "boxplot.csv", "cutpoints.csv"] + [f"roc_{m}.csv" for m in metrics]
    with staged_outputs([out / n for n in names]) as staged:
        staged[0].write_text(report.dump_json(report.evaluation_to_dict(ev, cfg)))
        staged[1].write_text(report.render_evaluation(ev, cfg))
        tmp_dir = staged[0].parent
        box = report.write_boxplot(ev, tmp_dir)
        os.replace(box, staged[2])
        cuts = report.write_cutpoints(ev, tmp_dir)
        os.replace(cuts, staged[3])
        for path, target in zip(report.write_roc_points(ev, tmp_dir), staged[4:]):
            os.replace(path, target)
    sys.stdout.write(report.render_evaluation(ev, cfg))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nqi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic keystroke log and subject metadata")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-pd", type=int, default=42, help="PD subjects (default 42)")
    p.add_argument("--n-control", type=int, default=43, help="control subjects (default 43)")
    p.add_argument("--dataset", default="denovo", choices=["denovo", "earlypd", "paramest"],
                   help="dataset tag written to metadata (default denovo)")
    p.add_argument("--sessions", type=int, default=1, help="sessions per subject (default 1)")
    p.add_argument("--minutes", type=float, default=15.0, help="minutes per session (default 15)")
    imp = ImpairmentParams()
    p.add_argument("--burst-enter", type=float, default=imp.burst_enter_prob,
                   help=f"per-key probability of entering a burst (default {imp.burst_enter_prob})")
    p.add_argument("--burst-exit", type=float, default=imp.burst_exit_prob,
                   help=f"per-key probability of leaving a burst (default {imp.burst_exit_prob})")
    p.add_argument("--burst-sigma", type=float, default=imp.burst_sigma_multiplier,
                   help=f"log-spread multiplier inside bursts (default {imp.burst_sigma_multiplier})")
    p.add_argument("--burst-shift", type=float, default=imp.burst_mean_shift,
                   help=f"seconds added to the typical hold time inside bursts (default {imp.burst_mean_shift})")
    p.add_argument("--null", "--null-effect", dest="null_effect", action="store_true", help="PD subjects type like controls")
    _add_config_flags(p, ["seed"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", help="keystroke log -> per-window feature CSV")
    p.add_argument("log")
    p.add_argument("--out", required=True)
    p.add_argument("--speed-out", help="also write per-session typing speed (keys/min)")
    _add_config_flags(p, ["window_s", "min_keys", "max_hold_s"])
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the bagged SVR ensemble")
    p.add_argument("features")
    p.add_argument("metadata")
    p.add_argument("--out", required=True)
    p.add_argument("--provenance", help="training dataset tag stored in the model")
    _add_config_flags(p, ["C", "epsilon", "n_models", "normalization_constant", "seed",
                          "bootstrap_unit", "workers", "standardize"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score feature windows with a trained model")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--out", required=True, help="window-level score CSV")
    p.add_argument("--subject-out", help="subject-level rollup CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("crossval", help="two-fold cross-dataset validation")
    p.add_argument("--fold-a", nargs=2, metavar=("FEATURES", "METADATA"), required=True)
    p.add_argument("--fold-b", nargs=2, metavar=("FEATURES", "METADATA"), required=True)
    p.add_argument("--name-a", default="denovo")
    p.add_argument("--name-b", default="earlypd")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p, ["C", "epsilon", "n_models", "normalization_constant", "seed",
                          "bootstrap_unit", "workers", "standardize"])
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("evaluate", help="group comparison, ROC, cut-points and DeLong tests")
    p.add_argument("scores", help="subject- or window-level score CSV")
    p.add_argument("metadata")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--typing-speed", help="typing speed CSV from `featurize --speed-out`")
    p.add_argument("--per-window", action="store_true", help="one ROC entry per window")
    _add_config_flags(p, ["n_boot", "seed", "cost_ratios"])
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # diagnostics for the whole package go to the current stderr
    pkg_log = logging.getLogger(__name__)
    for h in list(pkg_log.handlers):
        pkg_log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    pkg_log.propagate = False
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

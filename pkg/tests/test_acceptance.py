"""End-to-end acceptance gate: one test per criterion, each reporting PASS/FAIL.

Run alone with ``pytest tests/test_acceptance.py -v``; the per-criterion
lines are printed in the "acceptance criteria" summary section.
"""

import time
from fractions import Fraction
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from nqi.cli import main as cli_main
from nqi.ensemble import (
    FeatureCohort,
    TrainingCorpus,
    build_corpus,
    dumps_model,
    load_model,
    train_ensemble,
    window_nqi,
    window_nqi_batch,
)
from nqi.evalstats import (
    ScoredCohort,
    delong_test,
    irls,
    logistic_fit,
    mann_whitney_u,
    roc_curve,
    youden_cutpoint,
)
from nqi.features import HoldTimeWindow, feature_vector, featurize_session
from nqi.keystroke import KeyClass, KeyEvent, TypingSession
from nqi.svr import SvrProblem, predict, train_svr
from nqi.synth import ImpairmentParams, generate_cohort

from .conftest import record_criterion
from .oracles import (
    enumerate_mwu_p,
    grid_loglik_max,
    naive_features,
    pairwise_auc,
    reference_svr,
    youden_scan,
)

pytestmark = pytest.mark.slow

STRONG = ImpairmentParams(burst_enter_prob=0.05, burst_exit_prob=0.2, burst_sigma_multiplier=2.0)


def run_cli(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, f"nqi {' '.join(map(str, argv))} exited {code}"


def run_pipeline(root: Path, seed: int, workers: int, n_per_group: int = 20, minutes: float = 15.0,
                 null: bool = False, n_models: int = 200, evaluate: bool = True) -> dict[str, bytes]:
    """simulate -> featurize -> crossval -> evaluate through the CLI; returns every output file."""
    folds = []
    for k, name in enumerate(("denovo", "earlypd")):
        d = root / name
        extra = ["--null"] if null else ["--burst-enter", 0.05, "--burst-exit", 0.2, "--burst-sigma", 2.0]
        run_cli("simulate", "--n-pd", n_per_group, "--n-control", n_per_group, "--dataset", name,
                "--seed", seed * 2 + k, "--minutes", minutes, "--out-dir", d, *extra)
        run_cli("featurize", d / "keystrokes.csv", "--out", d / "features.csv", "--speed-out", d / "speed.csv")
        folds.append(d)
    a, b = folds
    run_cli("crossval", "--fold-a", a / "features.csv", a / "subjects.csv",
            "--fold-b", b / "features.csv", b / "subjects.csv", "--out-dir", root / "cv",
            "--n-models", n_models, "--seed", seed, "--workers", workers)
    if evaluate:
        meta = root / "subjects.csv"
        meta.write_text((a / "subjects.csv").read_text()
                        + "".join((b / "subjects.csv").read_text().splitlines(keepends=True)[1:]))
        speed = root / "speed.csv"
        speed.write_text((a / "speed.csv").read_text()
                         + "".join((b / "speed.csv").read_text().splitlines(keepends=True)[1:]))
        run_cli("evaluate", root / "cv" / "subject_scores.csv", meta, "--out-dir", root / "ev",
                "--typing-speed", speed, "--seed", seed)
        # train on one fold and score the other as a stand-alone step too
        run_cli("train", a / "features.csv", a / "subjects.csv", "--out", root / "model.json",
                "--n-models", n_models, "--seed", seed, "--workers", workers)
        run_cli("score", root / "model.json", b / "features.csv", "--out", root / "scores.csv")
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    runs = {}
    for workers in (1, 4):
        root = tmp_path_factory.mktemp(f"pipeline-w{workers}")
        t0 = time.perf_counter()
        files = run_pipeline(root, seed=7, workers=workers)
        runs[workers] = (root, files, time.perf_counter() - t0)
    return runs


# ---------------------------------------------------------------------------


def test_01_svr_optimality():
    rng = np.random.default_rng(2024)
    worst_rel, worst_kkt, solve_time = 0.0, 0.0, 0.0
    for _ in range(200):
        l = int(rng.integers(1, 21))
        X = rng.uniform(0, 1, (l, 7))
        z = rng.uniform(0, 0.6, l)
        p = SvrProblem(X, z, float(rng.uniform(0.01, 10)), float(rng.uniform(0.01, 0.2)))
        t0 = time.perf_counter()
        m = train_svr(p)
        solve_time += time.perf_counter() - t0
        ref, _, _ = reference_svr(X, z, p.C, p.epsilon)
        rel = (m.objective - ref) / max(abs(ref), 1e-12)
        worst_rel = max(worst_rel, rel)
        worst_kkt = max(worst_kkt, m.kkt_residual)
    ok = worst_rel <= 1e-6 and worst_kkt <= 1e-8 and solve_time < 30
    record_criterion(1, ok, f"SVR vs reference: worst rel. excess {worst_rel:.2e}, "
                            f"worst KKT {worst_kkt:.2e}, solver time {solve_time:.2f}s")
    assert ok


def test_02_analytic_svr():
    m = train_svr(SvrProblem(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]), 1e3, 0.1))
    err = max(abs(m.w[0] - 0.8), abs(m.b - 0.1), abs(m.objective - 0.32))
    ok = err <= 1e-9
    record_criterion(2, ok, f"two-point SVR: w={float(m.w[0])!r}, b={m.b!r}, objective={m.objective!r}")
    assert ok


def test_03_target_translation():
    rng = np.random.default_rng(3)
    worst_w = worst_pred = 0.0
    for _ in range(50):
        l = int(rng.integers(2, 41))
        X = rng.uniform(0, 1, (l, 7))
        z = rng.uniform(0, 0.6, l)
        C, eps = float(rng.uniform(0.01, 10)), float(rng.uniform(0.01, 0.2))
        m = train_svr(SvrProblem(X, z, C, eps))
        n = train_svr(SvrProblem(X, z + 0.37, C, eps))
        worst_w = max(worst_w, float(np.max(np.abs(m.w - n.w))))
        Xt = rng.uniform(0, 1, (20, 7))
        worst_pred = max(worst_pred, float(np.max(np.abs(predict(n, Xt) - predict(m, Xt) - 0.37))))
    ok = worst_w <= 1e-10 and worst_pred <= 1e-9
    record_criterion(3, ok, f"translation c=0.37: max |dw| {worst_w:.1e}, max prediction error {worst_pred:.1e}")
    assert ok


def test_04_featurizer_oracle():
    rng = np.random.default_rng(4)
    hist_mismatch = 0
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(30, 250))
        holds = np.exp(rng.normal(np.log(0.1), rng.uniform(0.1, 1.0), n))
        if rng.random() < 0.1:
            holds = np.round(holds, 2) + 0.001  # heavy ties
        presses = np.cumsum(rng.exponential(0.35, n))
        overlaps = tuple((presses[:-1] + holds[:-1] - presses[1:]).tolist())
        w = HoldTimeWindow(0, float(presses[0]), tuple(holds.tolist()), tuple(presses.tolist()), overlaps)
        got = feature_vector(w)
        expected, counts = naive_features(presses.tolist(), holds.tolist())
        if got.v_hst != tuple(c / n for c in counts):
            hist_mismatch += 1
        worst = max(worst, float(np.max(np.abs(got.as_array()[:3] - np.array(expected[:3])))))
    ok = hist_mismatch == 0 and worst <= 1e-12
    record_criterion(4, ok, f"featurizer vs naive oracle on 1000 windows: histogram mismatches "
                            f"{hist_mismatch}, worst ratio-feature error {worst:.1e}")
    assert ok


def test_05_window_filter():
    events = []
    for idx, count in enumerate((29, 30, 31)):
        start = 90.0 * idx
        for k in range(count):
            t = start + 1.0 + 85.0 * k / count
            events.append(KeyEvent(t, t + 0.1, KeyClass.ALNUM))
    rows = featurize_session(TypingSession("s", "1", tuple(events)))
    got = [r.window_index for r in rows]
    ok = got == [1, 2]
    record_criterion(5, ok, f"29/30/31-key windows -> surviving indices {got}")
    assert ok


def test_06_auc_equivalence():
    rng = np.random.default_rng(6)
    worst = 0.0
    for k in range(500):
        n_pd, n_c = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        if k % 2:
            s = rng.integers(0, 8, n_pd + n_c) / 7.0
        else:
            s = rng.normal(size=n_pd + n_c) + np.r_[np.full(n_pd, 0.5), np.zeros(n_c)]
        labels = ["pd"] * n_pd + ["control"] * n_c
        ids = [f"s{i}" for i in range(n_pd + n_c)]
        c = ScoredCohort.from_arrays(s, labels, ids)
        other = ScoredCohort.from_arrays(rng.normal(size=n_pd + n_c), labels, ids)
        ref = pairwise_auc(s[:n_pd], s[n_pd:])
        d = delong_test(c, other)
        worst = max(worst, abs(roc_curve(c).auc - ref), abs(d.auc_a - ref))
    ok = worst <= 1e-12
    record_criterion(6, ok, f"AUC vs pairwise count on 500 cohorts (ROC and DeLong): worst error {worst:.1e}")
    assert ok


def test_07_youden_oracle():
    rng = np.random.default_rng(7)
    mismatches = order_violations = 0
    for k in range(500):
        n_pd, n_c = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        if k % 3 == 0:
            pos, neg = rng.integers(0, 6, n_pd) / 5.0, rng.integers(0, 5, n_c) / 5.0
        else:
            pos, neg = rng.normal(0.8, 1, n_pd), rng.normal(0, 1, n_c)
        c = ScoredCohort.from_arrays(np.r_[pos, neg], ["pd"] * n_pd + ["control"] * n_c)
        t = {}
        for fn, fp in ((1, 1), (2, 1), (1, 2)):
            t[(fn, fp)] = youden_cutpoint(c, fn, fp).threshold
            if t[(fn, fp)] != youden_scan(pos, neg, fn, fp):
                mismatches += 1
        if not t[(2, 1)] <= t[(1, 1)] <= t[(1, 2)]:
            order_violations += 1
    ok = mismatches == 0 and order_violations == 0
    record_criterion(7, ok, f"Youden vs exhaustive scan, 500 cohorts x 3 costs: {mismatches} mismatches, "
                            f"{order_violations} ordering violations")
    assert ok


def test_08_mann_whitney_exact():
    # every split of n distinct values into two non-empty groups, n <= 10
    mismatches = checked = 0
    for n in range(2, 11):
        vals = np.arange(n) * 1.5 + 0.25
        for n1 in range(1, n):
            for pick in combinations(range(n), n1):
                mask = np.zeros(n, bool)
                mask[list(pick)] = True
                a, b = vals[mask], vals[~mask]
                _, p = mann_whitney_u(a, b)
                checked += 1
                if Fraction(p).limit_denominator(10**6) != enumerate_mwu_p(a.tolist(), b.tolist()):
                    mismatches += 1
    u, p = mann_whitney_u([1, 2], [3, 4])
    ok = mismatches == 0 and u == 0 and p == 1 / 3
    record_criterion(8, ok, f"Mann-Whitney exact: {mismatches}/{checked} enumeration mismatches; "
                            f"[1,2] vs [3,4] -> U={u}, p={p!r}")
    assert ok


def test_09_logistic():
    rng = np.random.default_rng(9)
    grid = np.linspace(-5, 5, 101)
    worst_gap, sym_worst, n_checked = 0.0, 0.0, 0
    while n_checked < 100:
        n = int(rng.integers(8, 16))
        x = rng.normal(size=n)
        y = (rng.random(n) < 1 / (1 + np.exp(-(0.3 + x)))).astype(float)
        X = np.column_stack([np.ones(n), x])
        fit = irls(X, y, ["intercept", "x"])
        if fit.separated or y.min() == y.max():
            continue
        n_checked += 1
        worst_gap = max(worst_gap, grid_loglik_max(X, y, [grid, grid]) - fit.loglik)
    for _ in range(20):
        x = rng.normal(size=6)
        c = rng.normal(size=6)
        labels = ["pd", "control"] * 3
        coh = ScoredCohort.from_arrays(np.r_[x, x], labels + labels, covariates={"c": np.r_[c, -c]})
        f = logistic_fit(coh, "x", ["c"])
        if not f.separated:
            sym_worst = max(sym_worst, abs(f["c"].coef))
    ok = worst_gap <= 1e-6 and sym_worst <= 1e-5
    record_criterion(9, ok, f"logistic: grid beats fit by at most {worst_gap:.1e} on 100 datasets; "
                            f"symmetric null |coef| <= {sym_worst:.1e}")
    assert ok


def test_10_determinism(pipeline_runs):
    (_, files1, t1), (_, files4, t4) = pipeline_runs[1], pipeline_runs[4]
    differing = sorted(k for k in files1 if files1[k] != files4.get(k))
    same_set = set(files1) == set(files4)
    ok = same_set and not differing and max(t1, t4) < 300
    record_criterion(10, ok, f"pipeline 40+40 x 15 min, 200 units: {len(files1)} files byte-identical at 1 vs 4 "
                             f"workers (differing: {differing or 'none'}); wall {t1:.0f}s / {t4:.0f}s")
    assert ok


def test_11_signal_detection(pipeline_runs, tmp_path_factory):
    import json

    root, _, _ = pipeline_runs[1]
    report = json.loads((root / "cv" / "crossval.json").read_text())
    strong_auc = report["folds"][2]["auc"]
    null_aucs = []
    for seed in range(20):
        d = tmp_path_factory.mktemp(f"null{seed}")
        run_pipeline(d, seed=100 + seed, workers=4, null=True, evaluate=False)
        null_aucs.append(json.loads((d / "cv" / "crossval.json").read_text())["folds"][2]["auc"])
    mean_null = float(np.mean(null_aucs))
    ok = strong_auc >= 0.75 and 0.35 <= mean_null <= 0.65
    record_criterion(11, ok, f"cross-validated AUC strong impairment {strong_auc:.3f} (>= 0.75); "
                             f"null mean over 20 seeds {mean_null:.3f} (range {min(null_aucs):.2f}-{max(null_aucs):.2f})")
    assert ok


def test_12_bagging_variance():
    # fixed synthetic population of windows; each replicate resamples subjects
    pop = generate_cohort(30, 30, impairment=STRONG, seed=12, dataset="paramest", session_minutes=6)
    fc = FeatureCohort.from_dataset("paramest", pop)
    corpus = build_corpus(fc.rows, fc.subjects)
    x0 = np.median(corpus.features, axis=0)
    subjects = sorted(set(corpus.subject_ids))
    by_subject = {s: [i for i, t in enumerate(corpus.subject_ids) if t == s] for s in subjects}
    single, bagged = [], []
    for k in range(50):
        pick = np.random.default_rng(5000 + k).choice(len(subjects), 16, replace=False)
        idx = np.array([i for p in pick for i in by_subject[subjects[p]]])
        sample = TrainingCorpus(corpus.features[idx], corpus.targets[idx],
                                tuple(corpus.subject_ids[i] for i in idx))
        model = train_ensemble(sample, n_models=51, master_seed=k, n_jobs=4)
        single.append(float(predict(model.units[0], x0)))
        bagged.append(window_nqi(model, x0))
    v_single, v_bag = float(np.var(single)), float(np.var(bagged))
    ok = v_bag <= v_single
    record_criterion(12, ok, f"variance over 50 populations at fixed x: bagged median {v_bag:.3e} "
                             f"<= single unit {v_single:.3e}")
    assert ok


def test_13_model_round_trip(pipeline_runs, tmp_path):
    root, _, _ = pipeline_runs[1]
    model = load_model(root / "model.json")
    path = tmp_path / "again.json"
    path.write_text(dumps_model(model))
    back = load_model(path)
    X = np.random.default_rng(13).uniform(0, 1, (1000, 7))
    a, b = window_nqi_batch(model, X), window_nqi_batch(back, X)
    units_equal = all(u.w.tobytes() == v.w.tobytes() and u.b == v.b for u, v in zip(model.units, back.units))
    ok = a.tobytes() == b.tobytes() and units_equal and (root / "model.json").read_text() == path.read_text()
    record_criterion(13, ok, f"model round-trip: {model.n_models} units, 1000 predictions bit-identical: "
                             f"{a.tobytes() == b.tobytes()}")
    assert ok

import math
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nqi.evalstats import (
    OneClassError,
    RankDeficientError,
    ScoredCohort,
    auc_score,
    bootstrap_auc_ci,
    boxplot_stats,
    compare_metrics,
    delong_test,
    irls,
    log_likelihood,
    logistic_fit,
    mann_whitney_u,
    roc_curve,
    youden_cutpoint,
)

from .oracles import enumerate_mwu_p, grid_loglik_max, pairwise_auc, youden_scan


def cohort(pos, neg, ids=None):
    scores = list(pos) + list(neg)
    labels = ["pd"] * len(pos) + ["control"] * len(neg)
    return ScoredCohort.from_arrays(scores, labels, ids)


def random_cohort(rng, ties=False):
    n_pd = int(rng.integers(1, 30))
    n_c = int(rng.integers(1, 30))
    if ties:
        pos = rng.integers(0, 6, n_pd) / 5.0
        neg = rng.integers(0, 5, n_c) / 5.0
    else:
        pos = rng.normal(0.5, 1.0, n_pd)
        neg = rng.normal(0.0, 1.0, n_c)
    return cohort(pos, neg)


class TestRoc:
    def test_separable(self):
        assert roc_curve(cohort([0.8, 0.9], [0.1, 0.2])).auc == 1.0

    def test_all_tied(self):
        assert roc_curve(cohort([0.3] * 4, [0.3] * 5)).auc == 0.5

    def test_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for k in range(100):
            c = random_cohort(rng, ties=k % 2 == 0)
            pos, neg = c.split()
            ref = pairwise_auc(pos, neg)
            assert abs(roc_curve(c).auc - ref) <= 1e-12
            assert abs(auc_score(c.scores, c.is_pd) - ref) <= 1e-12

    def test_matches_mann_whitney(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            c = random_cohort(rng, ties=True)
            pos, neg = c.split()
            u, _ = mann_whitney_u(pos, neg)
            assert abs(roc_curve(c).auc - u / (pos.size * neg.size)) <= 1e-12

    def test_one_class(self):
        with pytest.raises(OneClassError):
            roc_curve(cohort([0.1, 0.2], []))

    def test_endpoints(self):
        r = roc_curve(cohort([0.8, 0.9, 0.3], [0.1, 0.2, 0.5]))
        assert (r.sensitivity[0], r.specificity[0]) == (1.0, 0.0)
        assert (r.sensitivity[-1], r.specificity[-1]) == (0.0, 1.0)
        assert np.all(np.diff(r.sensitivity) <= 0) and np.all(np.diff(r.specificity) >= 0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-20, 20), min_size=1, max_size=15),
           st.lists(st.integers(-20, 20), min_size=1, max_size=15))
    def test_monotone_transform(self, pos, neg):
        a = cohort(pos, neg)
        b = cohort(np.exp(np.array(pos) / 10.0), np.exp(np.array(neg) / 10.0))
        ra, rb = roc_curve(a), roc_curve(b)
        assert ra.auc == pytest.approx(rb.auc, abs=1e-12)
        assert ra.sensitivity.tolist() == rb.sensitivity.tolist()
        assert ra.specificity.tolist() == rb.specificity.tolist()
        ca, cb = youden_cutpoint(a), youden_cutpoint(b)
        assert (ca.sensitivity, ca.specificity) == (cb.sensitivity, cb.specificity)


class TestBootstrap:
    def test_separated_large(self):
        c = cohort(np.linspace(1, 2, 50), np.linspace(-1, 0, 50))
        lo, hi = bootstrap_auc_ci(c, 2000, seed=3)
        assert lo >= 0.9 and hi == 1.0

    def test_degenerate_pair(self):
        c = cohort([0.7], [0.2])
        lo, hi = bootstrap_auc_ci(c, 200, seed=0)
        auc = roc_curve(c).auc
        assert lo <= auc <= hi

    def test_seeded(self):
        c = random_cohort(np.random.default_rng(4))
        assert bootstrap_auc_ci(c, 500, seed=9) == bootstrap_auc_ci(c, 500, seed=9)


class TestDeLong:
    def test_self_comparison(self):
        c = random_cohort(np.random.default_rng(5))
        d = delong_test(c, c)
        assert d.z == 0.0 and d.p == 1.0

    def test_auc_matches_roc(self):
        rng = np.random.default_rng(6)
        for k in range(100):
            n_pd, n_c = int(rng.integers(1, 25)), int(rng.integers(1, 25))
            ids = [f"s{i}" for i in range(n_pd + n_c)]
            tie = k % 3 == 0
            sa = rng.integers(0, 5, n_pd + n_c) if tie else rng.normal(size=n_pd + n_c)
            sb = rng.normal(size=n_pd + n_c)
            labels = ["pd"] * n_pd + ["control"] * n_c
            a = ScoredCohort.from_arrays(sa, labels, ids)
            b = ScoredCohort.from_arrays(sb, labels, ids)
            d = delong_test(a, b)
            assert abs(d.auc_a - roc_curve(a).auc) <= 1e-12
            assert abs(d.auc_b - roc_curve(b).auc) <= 1e-12

    def test_label_swap(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            n = int(rng.integers(8, 30))
            ids = [f"s{i}" for i in range(n)]
            labels = ["pd" if i % 2 else "control" for i in range(n)]
            a = ScoredCohort.from_arrays(rng.normal(size=n), labels, ids)
            b = ScoredCohort.from_arrays(rng.normal(size=n), labels, ids)
            d = delong_test(a, b)
            s = delong_test(a.relabeled(), b.relabeled())
            assert s.auc_a == pytest.approx(1 - d.auc_a, abs=1e-12)
            assert abs(s.z) == pytest.approx(abs(d.z), rel=1e-9, abs=1e-12)

    def test_subject_order_irrelevant(self):
        rng = np.random.default_rng(8)
        ids = [f"s{i}" for i in range(20)]
        labels = ["pd"] * 10 + ["control"] * 10
        sa, sb = rng.normal(size=20), rng.normal(size=20)
        a = ScoredCohort.from_arrays(sa, labels, ids)
        perm = rng.permutation(20)
        b = ScoredCohort.from_arrays(sb[perm], [labels[i] for i in perm], [ids[i] for i in perm])
        b_sorted = ScoredCohort.from_arrays(sb, labels, ids)
        assert delong_test(a, b) == delong_test(a, b_sorted)

    def test_mismatched_subjects(self):
        a = cohort([1, 2], [0, 0.5], ["a", "b", "c", "d"])
        b = cohort([1, 2], [0, 0.5], ["a", "b", "c", "e"])
        with pytest.raises(ValueError):
            delong_test(a, b)


class TestYouden:
    def test_separable(self):
        cp = youden_cutpoint(cohort([0.8, 0.9], [0.1, 0.2]))
        assert cp.threshold == 0.5
        assert cp.sensitivity == cp.specificity == cp.accuracy == 1.0

    def test_exhaustive_scan(self):
        rng = np.random.default_rng(9)
        for k in range(150):
            c = random_cohort(rng, ties=k % 2 == 0)
            pos, neg = c.split()
            for fn, fp in ((1, 1), (2, 1), (1, 2)):
                assert youden_cutpoint(c, fn, fp).threshold == youden_scan(pos, neg, fn, fp)

    def test_cost_ordering(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            c = random_cohort(rng)
            t21 = youden_cutpoint(c, 2, 1).threshold
            t11 = youden_cutpoint(c, 1, 1).threshold
            t12 = youden_cutpoint(c, 1, 2).threshold
            assert t21 <= t11 <= t12

    def test_counts_match_roc(self):
        c = random_cohort(np.random.default_rng(11))
        cp = youden_cutpoint(c, 2, 1)
        r = roc_curve(c)
        i = int(np.flatnonzero(r.thresholds == cp.threshold)[0])
        assert r.sensitivity[i] == cp.sensitivity and r.specificity[i] == cp.specificity
        pos, neg = c.split()
        assert cp.tp + cp.fn == pos.size and cp.tn + cp.fp == neg.size

    def test_prevalence_override(self):
        c = cohort([0.8, 0.9, 0.4], [0.1, 0.2, 0.5, 0.3])
        default = youden_cutpoint(c)
        explicit = youden_cutpoint(c, prevalence=3 / 7)
        assert default.threshold == explicit.threshold
        with pytest.raises(ValueError):
            youden_cutpoint(c, prevalence=1.0)


class TestMannWhitney:
    def test_two_by_two(self):
        u, p = mann_whitney_u([1, 2], [3, 4])
        assert u == 0.0
        assert p == pytest.approx(1 / 3, abs=1e-15)

    def test_identical_groups(self):
        _, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
        assert p == 1.0

    def test_enumeration_small(self):
        rng = np.random.default_rng(12)
        for _ in range(150):
            n = int(rng.integers(2, 11))
            n1 = int(rng.integers(1, n))
            vals = rng.permutation(n).astype(float)
            a, b = vals[:n1], vals[n1:]
            _, p = mann_whitney_u(a, b)
            assert Fraction(p).limit_denominator(10**7) == enumerate_mwu_p(a.tolist(), b.tolist())

    def test_calibration(self):
        rng = np.random.default_rng(13)
        hits = 0
        for _ in range(2000):
            _, p = mann_whitney_u(rng.normal(size=30), rng.normal(size=30))
            hits += p < 0.05
        assert 0.03 <= hits / 2000 <= 0.07

    def test_symmetry(self):
        rng = np.random.default_rng(14)
        a, b = rng.normal(size=20), rng.normal(size=25)
        ua, pa = mann_whitney_u(a, b)
        ub, pb = mann_whitney_u(b, a)
        assert ua + ub == 20 * 25 and pa == pytest.approx(pb, abs=1e-15)


class TestLogistic:
    def test_grid_oracle(self):
        rng = np.random.default_rng(15)
        grid = np.linspace(-4, 4, 81)
        for _ in range(20):
            n = 8
            x = rng.normal(size=n)
            y = np.array([0, 1] * 4, dtype=float)
            rng.shuffle(y)
            X = np.column_stack([np.ones(n), x])
            fit = irls(X, y, ["intercept", "x"])
            if fit.separated:
                continue
            assert fit.loglik >= grid_loglik_max(X, y, [grid, grid]) - 1e-6

    def test_symmetric_null_covariate(self):
        # every row has a twin with the covariate negated: the likelihood is
        # even in that coefficient and strictly concave, so the optimum is 0
        rng = np.random.default_rng(23)
        for _ in range(20):
            x = rng.normal(size=6)
            c = rng.normal(size=6)
            y = ["pd", "control"] * 3
            coh = ScoredCohort.from_arrays(np.r_[x, x], y + y, covariates={"c": np.r_[c, -c]})
            fit = logistic_fit(coh, "x", ["c"])
            if not fit.separated:
                assert abs(fit["c"].coef) <= 1e-6

    def test_affine_invariance(self):
        rng = np.random.default_rng(16)
        n = 40
        x = rng.normal(size=n)
        age = rng.normal(60, 8, n)
        labels = ["pd" if v > 0 else "control" for v in x + rng.normal(size=n) * 2]
        a = logistic_fit(ScoredCohort.from_arrays(x, labels, covariates={"age": age}), "x", ["age"])
        b = logistic_fit(ScoredCohort.from_arrays(x, labels, covariates={"age": age + 100}), "x", ["age"])
        assert a["x"].coef == pytest.approx(b["x"].coef, rel=1e-6)
        assert a["x"].p == pytest.approx(b["x"].p, rel=1e-6)
        assert a["age"].coef == pytest.approx(b["age"].coef, rel=1e-6)
        assert a["intercept"].coef != pytest.approx(b["intercept"].coef)

    def test_separation_flagged(self):
        x = np.array([0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0])
        labels = ["control"] * 4 + ["pd"] * 4
        fit = logistic_fit(ScoredCohort.from_arrays(x, labels), "x")
        assert fit.separated

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(6), np.arange(6.0), 2 * np.arange(6.0)])
        with pytest.raises(RankDeficientError):
            irls(X, np.array([0, 1, 0, 1, 0, 1.0]), ["a", "b", "c"])

    def test_gradient_zero_at_fit(self):
        rng = np.random.default_rng(17)
        X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
        y = (rng.random(50) < 0.5).astype(float)
        fit = irls(X, y, ["a", "b", "c"])
        p = 1 / (1 + np.exp(-X @ fit.coef))
        assert np.linalg.norm(X.T @ (y - p)) <= 1e-8
        assert fit.loglik == pytest.approx(log_likelihood(fit.coef, X, y))


class TestCompare:
    def _table(self, rng, n=50, gap=2.0):
        label = ["pd"] * n + ["control"] * n
        strong = np.concatenate([rng.normal(gap, 1, n), rng.normal(0, 1, n)])
        noise = rng.normal(size=2 * n)
        return pd.DataFrame({
            "subject_id": [f"s{i}" for i in range(2 * n)], "label": label,
            "sex": rng.integers(0, 2, 2 * n).astype(float), "age": rng.normal(60, 8, 2 * n),
            "education_years": rng.normal(15, 3, 2 * n), "strong": strong, "noise": noise,
            "copy": strong,
        })

    def test_power(self):
        rng = np.random.default_rng(18)
        rep = compare_metrics(self._table(rng), ["strong", "noise"], n_boot=200)
        assert rep.rows[0].roc.auc - rep.rows[1].roc.auc >= 0.25
        assert rep.delong[("strong", "noise")].p < 0.05

    def test_duplicate_metric(self):
        rep = compare_metrics(self._table(np.random.default_rng(19)), ["strong", "copy"], n_boot=0)
        assert rep.delong[("strong", "copy")].p == 1.0

    def test_single_separable_metric(self):
        t = self._table(np.random.default_rng(20), gap=50.0)
        rep = compare_metrics(t, ["strong"], n_boot=0)
        assert len(rep.rows) == 1 and rep.rows[0].roc.auc == 1.0
        assert rep.rows[0].adjusted_separated and math.isnan(rep.rows[0].adjusted_p)

    def test_orientation(self):
        t = self._table(np.random.default_rng(21))
        t["neg"] = -t["strong"]
        rep = compare_metrics(t, ["strong", "neg"], higher_is_pd={"neg": False}, n_boot=0)
        assert rep.rows[0].roc.auc == rep.rows[1].roc.auc

    def test_missing_values_shrink_common_set(self):
        t = self._table(np.random.default_rng(22))
        t.loc[:4, "noise"] = np.nan
        rep = compare_metrics(t, ["strong", "noise"], n_boot=0)
        assert rep.common_subjects == 95
        assert rep.rows[1].n_pd == 45


def test_boxplot_stats():
    st_ = boxplot_stats([1, 2, 3, 4, 100])
    assert (st_["q1"], st_["median"], st_["q3"]) == (2.0, 3.0, 4.0)
    assert st_["whisker_high"] == 4.0 and st_["n_outliers"] == 1

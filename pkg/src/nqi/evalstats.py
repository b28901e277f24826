"""Discrimination statistics for PD-vs-control scores.

Orientation convention everywhere: a *higher* score points to PD. Metrics
where the opposite holds (tapping counts, typing speed) are negated before
they reach these functions.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special, stats

PD_LABELS = frozenset({"pd", 1, True})


class OneClassError(ValueError):
    """ROC quantities need at least one PD and one control entry."""


@dataclass(frozen=True)
class CohortEntry:
    subject_id: str
    score: float
    label: str
    covariates: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class ScoredCohort:
    entries: tuple[CohortEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        for e in self.entries:
            if e.label not in ("pd", "control"):
                raise ValueError(f"label must be 'pd' or 'control', got {e.label!r}")

    @classmethod
    def from_arrays(
        cls,
        scores: Sequence[float],
        labels: Sequence,
        subject_ids: Sequence[str] | None = None,
        covariates: Mapping[str, Sequence[float]] | None = None,
    ) -> ScoredCohort:
        scores = list(scores)
        labels = ["pd" if lab in PD_LABELS else "control" for lab in labels]
        if len(scores) != len(labels):
            raise ValueError("scores and labels differ in length")
        ids = list(subject_ids) if subject_ids is not None else [str(i) for i in range(len(scores))]
        cov = covariates or {}
        entries = [
            CohortEntry(ids[i], float(scores[i]), labels[i], {k: float(v[i]) for k, v in cov.items()})
            for i in range(len(scores))
        ]
        return cls(tuple(entries))

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries], dtype=float)

    @property
    def is_pd(self) -> np.ndarray:
        return np.array([e.label == "pd" for e in self.entries], dtype=bool)

    @property
    def subject_ids(self) -> list[str]:
        return [e.subject_id for e in self.entries]

    def covariate(self, name: str) -> np.ndarray:
        return np.array([e.covariates[name] for e in self.entries], dtype=float)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        s, pd_mask = self.scores, self.is_pd
        pos, neg = s[pd_mask], s[~pd_mask]
        if pos.size == 0 or neg.size == 0:
            raise OneClassError("cohort needs both PD and control entries")
        return pos, neg

    def relabeled(self) -> ScoredCohort:
        """Same scores with PD and control labels swapped."""
        flip = {"pd": "control", "control": "pd"}
        return ScoredCohort(tuple(
            CohortEntry(e.subject_id, e.score, flip[e.label], e.covariates) for e in self.entries
        ))


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    sensitivity: np.ndarray
    specificity: np.ndarray
    auc: float
    ci_low: float = math.nan
    ci_high: float = math.nan

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.sensitivity.tolist(), self.specificity.tolist()))


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """-inf, midpoints between adjacent distinct scores, +inf (ascending)."""
    u = np.unique(scores)
    mids = 0.5 * (u[:-1] + u[1:])
    return np.concatenate([[-np.inf], mids, [np.inf]])


def _rates(pos: np.ndarray, neg: np.ndarray, thresholds: np.ndarray):
    # PD call: score > threshold
    tp = (pos[None, :] > thresholds[:, None]).sum(axis=1)
    tn = (neg[None, :] <= thresholds[:, None]).sum(axis=1)
    return tp, tn


def auc_score(scores, is_pd) -> float:
    """Rank-sum AUC: P(PD > control) + 1/2 P(tie)."""
    scores = np.asarray(scores, dtype=float)
    is_pd = np.asarray(is_pd, dtype=bool)
    n_pos = int(is_pd.sum())
    n_neg = is_pd.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassError("cohort needs both PD and control entries")
    ranks = stats.rankdata(scores)
    u = ranks[is_pd].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(cohort: ScoredCohort, n_boot: int = 0, seed: int | None = None) -> RocCurve:
    """Empirical ROC over midpoint thresholds; AUC by the trapezoid rule.

    With ``n_boot > 0`` a stratified percentile bootstrap CI is attached.
    """
    pos, neg = cohort.split()
    thr = candidate_thresholds(cohort.scores)
    tp, tn = _rates(pos, neg, thr)
    se = tp / pos.size
    sp = tn / neg.size
    fpr = 1.0 - sp
    # thresholds ascend, so walk the curve from (1, 1) down to (0, 0)
    auc = float(np.sum((fpr[:-1] - fpr[1:]) * (se[:-1] + se[1:]) / 2.0))
    lo = hi = math.nan
    if n_boot > 0:
        lo, hi = bootstrap_auc_ci(cohort, n_boot=n_boot, seed=seed)
    return RocCurve(thr, se, sp, auc, lo, hi)


def bootstrap_auc_ci(
    cohort: ScoredCohort, n_boot: int = 2000, seed: int | None = 0, level: float = 0.95
) -> tuple[float, float]:
    """Percentile CI from resampling PD and control entries separately."""
    pos, neg = cohort.split()
    rng = np.random.default_rng(seed)
    ip = rng.integers(0, pos.size, size=(n_boot, pos.size))
    ineg = rng.integers(0, neg.size, size=(n_boot, neg.size))
    ranks = stats.rankdata(np.hstack([pos[ip], neg[ineg]]), axis=1)
    u = ranks[:, : pos.size].sum(axis=1) - pos.size * (pos.size + 1) / 2.0
    aucs = u / (pos.size * neg.size)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(aucs, (alpha, 1.0 - alpha))
    return float(lo), float(hi)


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float


def _structural_components(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m, n = pos.size, neg.size
    tz = stats.rankdata(np.concatenate([pos, neg]))
    tx = stats.rankdata(pos)
    ty = stats.rankdata(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return v10, v01


def delong_test(cohort_a: ScoredCohort, cohort_b: ScoredCohort) -> DeLongResult:
    """Two-sided test that two paired ROC curves share the same AUC."""
    ids_a, ids_b = cohort_a.subject_ids, cohort_b.subject_ids
    if sorted(ids_a) != sorted(ids_b) or len(set(ids_a)) != len(ids_a):
        raise ValueError("DeLong's test needs the same subjects in both cohorts")
    lab_a = dict(zip(ids_a, cohort_a.is_pd))
    order_b = {sid: i for i, sid in enumerate(ids_b)}
    if any(lab_a[sid] != cohort_b.is_pd[order_b[sid]] for sid in ids_a):
        raise ValueError("labels differ between the paired cohorts")
    sb = cohort_b.scores[[order_b[sid] for sid in ids_a]]
    is_pd = cohort_a.is_pd
    pos = np.vstack([cohort_a.scores[is_pd], sb[is_pd]])
    neg = np.vstack([cohort_a.scores[~is_pd], sb[~is_pd]])
    if pos.shape[1] == 0 or neg.shape[1] == 0:
        raise OneClassError("cohort needs both PD and control entries")
    comps = [_structural_components(pos[k], neg[k]) for k in range(2)]
    v10 = np.vstack([c[0] for c in comps])
    v01 = np.vstack([c[1] for c in comps])
    aucs = v10.mean(axis=1)
    m, n = pos.shape[1], neg.shape[1]
    s10 = np.cov(v10) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(v01) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    diff = aucs[0] - aucs[1]
    if var <= 1e-300 or not np.isfinite(var):
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        z = float(diff / math.sqrt(var))
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DeLongResult(float(aucs[0]), float(aucs[1]), z, min(p, 1.0))


# ---------------------------------------------------------------------------
# Cut-points


@dataclass(frozen=True)
class CutPoint:
    cost_fn: float
    cost_fp: float
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    tp: int
    fn: int
    tn: int
    fp: int


def youden_cutpoint(
    cohort: ScoredCohort, cost_fn: float = 1.0, cost_fp: float = 1.0,
    prevalence: float | None = None,
) -> CutPoint:
    """Threshold maximizing Se + r*Sp, r = cost_fp*(1-prev) / (cost_fn*prev).

    Prevalence defaults to the cohort's PD fraction. Ties go to the larger
    threshold (higher specificity).
    """
    if not (cost_fn > 0 and cost_fp > 0):
        raise ValueError("misclassification costs must be positive")
    pos, neg = cohort.split()
    thr = candidate_thresholds(cohort.scores)
    tp, tn = _rates(pos, neg, thr)
    if prevalence is None:
        # Se + r*Sp scaled by n_pd*cost_fn: exact for integer-valued costs
        objective = cost_fn * tp + cost_fp * tn
    else:
        if not 0 < prevalence < 1:
            raise ValueError("prevalence must lie in (0, 1)")
        r = cost_fp * (1.0 - prevalence) / (cost_fn * prevalence)
        objective = tp / pos.size + r * tn / neg.size
    best = np.flatnonzero(objective == objective.max())[-1]
    tp_b, tn_b = int(tp[best]), int(tn[best])
    fn_b, fp_b = pos.size - tp_b, neg.size - tn_b
    return CutPoint(
        cost_fn=float(cost_fn), cost_fp=float(cost_fp), threshold=float(thr[best]),
        sensitivity=tp_b / pos.size, specificity=tn_b / neg.size,
        accuracy=(tp_b + tn_b) / (pos.size + neg.size),
        tp=tp_b, fn=fn_b, tn=tn_b, fp=fp_b,
    )


# ---------------------------------------------------------------------------
# Mann-Whitney U

EXACT_MAX_N = 12


def _u_distribution(n1: int, n2: int) -> np.ndarray:
    """Counts of arrangements giving U = 0..n1*n2 (number of a-over-b pairs)."""
    # f[i][j] = polynomial for i items of a and j of b
    table: dict[tuple[int, int], np.ndarray] = {}

    def f(i: int, j: int) -> np.ndarray:
        if (i, j) in table:
            return table[(i, j)]
        if i == 0 or j == 0:
            out = np.zeros(1, dtype=object)
            out[0] = 1
        else:
            # largest element belongs to a (adds j to U) or to b
            with_a = f(i - 1, j)
            with_b = f(i, j - 1)
            out = np.zeros(i * j + 1, dtype=object)
            out[j:j + with_a.size] += with_a
            out[:with_b.size] += with_b
        table[(i, j)] = out
        return out

    return f(n1, n2)


def mann_whitney_u(group_a: Sequence[float], group_b: Sequence[float]) -> tuple[float, float]:
    """U statistic of ``group_a`` (pairs a > b, ties 1/2) and two-sided p.

    Exact enumeration when there are no ties and the combined size is at most
    12; otherwise the normal approximation with tie and continuity correction.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both groups must be non-empty")
    combined = np.concatenate([a, b])
    ranks = stats.rankdata(combined)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    has_ties = np.unique(combined).size < combined.size
    if not has_ties and n1 + n2 <= EXACT_MAX_N:
        counts = _u_distribution(n1, n2)
        total = sum(counts)
        k = int(round(u))
        lower = sum(counts[: k + 1])
        upper = sum(counts[k:])
        p = 2 * min(lower, upper) / total
        return u, float(min(1.0, p))
    n = n1 + n2
    _, tie_counts = np.unique(combined, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum()) / (n * (n - 1))) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    mean = n1 * n2 / 2.0
    if var <= 0:
        return u, 1.0
    dev = max(abs(u - mean) - 0.5, 0.0)
    p = 2.0 * stats.norm.sf(dev / math.sqrt(var))
    return u, float(min(1.0, p))


# ---------------------------------------------------------------------------
# Logistic regression


class RankDeficientError(ValueError):
    """The logistic design matrix does not have full column rank."""


@dataclass(frozen=True)
class LogisticTerm:
    name: str
    coef: float
    se: float
    z: float
    p: float


@dataclass(frozen=True)
class LogisticFit:
    terms: tuple[LogisticTerm, ...]
    loglik: float
    n_iter: int
    converged: bool
    separated: bool

    def __getitem__(self, name: str) -> LogisticTerm:
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def coef(self) -> np.ndarray:
        return np.array([t.coef for t in self.terms])


def log_likelihood(beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def irls(
    X: np.ndarray, y: np.ndarray, names: Sequence[str], grad_tol: float = 1e-8,
    max_iter: int = 100, eta_limit: float = 30.0,
) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton/IRLS with step halving."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError("design matrix is rank deficient")
    beta = np.zeros(X.shape[1])
    ll = log_likelihood(beta, X, y)
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        p = special.expit(X @ beta)
        grad = X.T @ (y - p)
        if np.linalg.norm(grad) <= grad_tol:
            converged = True
            it -= 1
            break
        W = p * (1.0 - p)
        H = X.T @ (X * W[:, None])
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            separated = True
            break
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, y)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(X @ beta)) > eta_limit:
            # fitted probabilities pinned at 0/1: coefficients diverge
            separated = True
            break
    else:
        p = special.expit(X @ beta)
        converged = np.linalg.norm(X.T @ (y - p)) <= grad_tol
    p = special.expit(X @ beta)
    H = X.T @ (X * (p * (1.0 - p))[:, None])
    try:
        cov = np.linalg.inv(H)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(beta.size, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    pvals = 2.0 * stats.norm.sf(np.abs(z))
    terms = tuple(
        LogisticTerm(n, float(c), float(s), float(zz), float(pp))
        for n, c, s, zz, pp in zip(names, beta, se, z, pvals)
    )
    return LogisticFit(terms, log_likelihood(beta, X, y), it, bool(converged), bool(separated))


def logistic_fit(cohort: ScoredCohort, metric: str = "score", covariates: Sequence[str] = ()) -> LogisticFit:
    """Regress the PD label on the cohort score plus covariates.

    The Wald p of ``metric`` is the covariate-adjusted significance.
    Perfect separation is reported through ``LogisticFit.separated``.
    """
    cols = [np.ones(len(cohort.entries)), cohort.scores]
    cols += [cohort.covariate(c) for c in covariates]
    X = np.column_stack(cols)
    y = cohort.is_pd.astype(float)
    return irls(X, y, ["intercept", metric, *covariates])


# ---------------------------------------------------------------------------
# Multi-metric comparison


@dataclass(frozen=True)
class GroupComparison:
    metric: str
    n_pd: int
    n_control: int
    mean_pd: float
    std_pd: float
    mean_control: float
    std_control: float
    unadjusted_p: float
    adjusted_p: float
    covariates: tuple[str, ...]
    higher_is_pd: bool
    roc: RocCurve
    adjusted_separated: bool = False


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[GroupComparison, ...]
    delong: Mapping[tuple[str, str], DeLongResult]
    common_subjects: int


def boxplot_stats(values: Iterable[float]) -> dict[str, float]:
    """Quartiles and 1.5-IQR whiskers (most extreme data inside the fences)."""
    v = np.sort(np.asarray(list(values), dtype=float))
    if v.size == 0:
        raise ValueError("no values")
    q1, med, q3 = np.quantile(v, (0.25, 0.5, 0.75))
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    return {
        "q1": float(q1), "median": float(med), "q3": float(q3),
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "n_outliers": int(v.size - inside.size),
    }


def compare_metrics(
    table,
    metrics: Sequence[str],
    covariates: Sequence[str] = ("sex", "age", "education_years"),
    extra_covariates: Mapping[str, Sequence[str]] | None = None,
    higher_is_pd: Mapping[str, bool] | None = None,
    n_boot: int = 2000,
    seed: int = 0,
) -> ComparisonReport:
    """Table-1 style rows plus pairwise DeLong tests for several metrics.

    ``table`` is a DataFrame with ``subject_id``, ``label`` ('pd'/'control'),
    covariate columns and one column per metric; missing metric values are
    allowed and shrink that metric's subject set.
    """
    extra_covariates = dict(extra_covariates or {})
    higher_is_pd = dict(higher_is_pd or {})
    rows = []
    cohorts: dict[str, ScoredCohort] = {}
    for metric in metrics:
        sign = 1.0 if higher_is_pd.get(metric, True) else -1.0
        sub = table[table[metric].notna()]
        if sub.empty:
            raise ValueError(f"metric {metric!r} has no values")
        raw = sub[metric].to_numpy(dtype=float)
        labels = sub["label"].tolist()
        is_pd = np.array([lab == "pd" for lab in labels])
        cohort = ScoredCohort.from_arrays(sign * raw, labels, sub["subject_id"].astype(str).tolist())
        cohorts[metric] = cohort
        _, p_unadj = mann_whitney_u(raw[is_pd], raw[~is_pd])
        covs = tuple(c for c in (*covariates, *extra_covariates.get(metric, ())) if c in sub.columns)
        adj = sub.dropna(subset=list(covs))
        adj_cohort = ScoredCohort.from_arrays(
            adj[metric].to_numpy(dtype=float), adj["label"].tolist(),
            adj["subject_id"].astype(str).tolist(),
            {c: adj[c].to_numpy(dtype=float) for c in covs},
        )
        try:
            fit = logistic_fit(adj_cohort, metric, covs)
            p_adj, sep = fit[metric].p, fit.separated
        except RankDeficientError:
            p_adj, sep = math.nan, False
        if sep:
            p_adj = math.nan
        rows.append(
            GroupComparison(
                metric=metric, n_pd=int(is_pd.sum()), n_control=int((~is_pd).sum()),
                mean_pd=float(raw[is_pd].mean()), std_pd=float(raw[is_pd].std(ddof=1)) if is_pd.sum() > 1 else math.nan,
                mean_control=float(raw[~is_pd].mean()),
                std_control=float(raw[~is_pd].std(ddof=1)) if (~is_pd).sum() > 1 else math.nan,
                unadjusted_p=p_unadj, adjusted_p=p_adj, covariates=covs,
                higher_is_pd=sign > 0, roc=roc_curve(cohort, n_boot=n_boot, seed=seed),
                adjusted_separated=sep,
            )
        )
    common = set.intersection(*(set(c.subject_ids) for c in cohorts.values()))
    if not common:
        raise ValueError("metrics share no subjects")
    delong = {}
    for ma, mb in itertools.combinations(metrics, 2):
        ca = _restrict(cohorts[ma], common)
        cb = _restrict(cohorts[mb], common)
        delong[(ma, mb)] = delong_test(ca, cb)
    return ComparisonReport(tuple(rows), delong, len(common))


def _restrict(cohort: ScoredCohort, keep: set[str]) -> ScoredCohort:
    return ScoredCohort(tuple(e for e in cohort.entries if e.subject_id in keep))

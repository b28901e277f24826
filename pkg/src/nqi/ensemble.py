"""Bagged linear SVR ensemble producing the nQi motor score."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evalstats import auc_score
from .features import MIN_KEYS, WINDOW_S, FeatureRow, FeatureVector, featurize_session
from .keystroke import UPDRS3_MAX, CohortDataset, Dataset, SubjectRecord
from .svr import SvrConvergenceError, SvrModel, SvrProblem, train_svr

DEFAULT_C = 0.094
DEFAULT_EPSILON = 0.052
DEFAULT_N_MODELS = 200
MODEL_FORMAT = "nqi-ensemble/1"


class InsufficientDataError(ValueError):
    """No window survived featurization for the requested subject."""


class FoldLeakError(ValueError):
    """A subject appears in more than one cross-validation fold."""


class EnsembleTrainingError(RuntimeError):
    def __init__(self, unit: int, cause: SvrConvergenceError):
        super().__init__(f"ensemble unit {unit} failed to converge: {cause}")
        self.unit = unit
        self.cause = cause


@dataclass(frozen=True)
class TrainingCorpus:
    features: np.ndarray
    targets: np.ndarray
    subject_ids: tuple[str, ...]
    normalization_constant: float = UPDRS3_MAX

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.features, dtype=float))
        z = np.asarray(self.targets, dtype=float).ravel()
        if X.shape[0] != z.size or z.size != len(self.subject_ids):
            raise ValueError("features, targets and subject_ids differ in length")
        if np.any((z < 0) | (z > 1)):
            raise ValueError("normalized targets must lie in [0, 1]")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", z)
        object.__setattr__(self, "subject_ids", tuple(self.subject_ids))

    def __len__(self) -> int:
        return self.targets.size

    def take(self, idx: np.ndarray) -> TrainingCorpus:
        return TrainingCorpus(
            self.features[idx], self.targets[idx],
            tuple(self.subject_ids[i] for i in idx), self.normalization_constant,
        )


def build_corpus(
    rows: Iterable[FeatureRow],
    subjects: Mapping[str, SubjectRecord],
    normalization_constant: float = UPDRS3_MAX,
) -> TrainingCorpus:
    """One row per window; target = subject UPDRS-III / normalization constant."""
    rows = sorted(rows, key=lambda r: (r.subject_id, r.session_id, r.window_index))
    missing = {r.subject_id for r in rows} - set(subjects)
    if missing:
        raise ValueError(f"feature rows reference unknown subjects: {sorted(missing)}")
    X = np.array([r.features.as_array() for r in rows]).reshape(len(rows), 7)
    z = np.array([subjects[r.subject_id].updrs3 / normalization_constant for r in rows])
    return TrainingCorpus(X, z, tuple(r.subject_id for r in rows), normalization_constant)


def unit_seed(master_seed: int, unit: int) -> int:
    """Stable per-unit seed; independent of scheduling order."""
    return int(np.random.SeedSequence([master_seed, unit]).generate_state(1, np.uint64)[0])


def bootstrap_indices(corpus: TrainingCorpus, seed: int, unit: str = "window") -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(corpus)
    if n == 0:
        raise ValueError("cannot bootstrap an empty corpus")
    if unit == "window":
        return rng.integers(0, n, size=n)
    if unit == "subject":
        subjects = sorted(set(corpus.subject_ids))
        picks = rng.integers(0, len(subjects), size=len(subjects))
        by_subject: dict[str, list[int]] = defaultdict(list)
        for i, sid in enumerate(corpus.subject_ids):
            by_subject[sid].append(i)
        return np.array([i for p in picks for i in by_subject[subjects[p]]], dtype=np.int64)
    raise ValueError(f"unknown bootstrap unit {unit!r}")


def bootstrap_sample(corpus: TrainingCorpus, seed: int, unit: str = "window") -> TrainingCorpus:
    """Rows drawn uniformly with replacement, same size as ``corpus``."""
    return corpus.take(bootstrap_indices(corpus, seed, unit))


@dataclass(frozen=True)
class EnsembleModel:
    units: tuple[SvrModel, ...]
    C: float
    epsilon: float
    n_models: int
    master_seed: int
    normalization_constant: float = UPDRS3_MAX
    provenance: str = ""
    bootstrap_unit: str = "window"
    training_subjects: tuple[str, ...] = ()
    feature_center: np.ndarray | None = None
    feature_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.units) != self.n_models:
            raise ValueError(f"{len(self.units)} units but n_models={self.n_models}")

    @property
    def weights(self) -> np.ndarray:
        return np.vstack([u.w for u in self.units])

    @property
    def biases(self) -> np.ndarray:
        return np.array([u.b for u in self.units])

    def _prepare(self, X: np.ndarray) -> np.ndarray:
        if self.feature_center is not None:
            X = (X - self.feature_center) / self.feature_scale
        return X

    def unit_predictions(self, x) -> np.ndarray:
        """Unit outputs, shape (n_models,) for one vector or (n_models, n) for a batch."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 7:
            raise ValueError(f"expected 7 features, got {x.shape[-1]}")
        X = self._prepare(np.atleast_2d(x))
        W = self.weights
        # fixed summation order (no BLAS) so a window's score never depends
        # on how many windows are scored alongside it
        out = np.repeat(self.biases[:, None], X.shape[0], axis=1)
        for k in range(W.shape[1]):
            out += W[:, k, None] * X[None, :, k]
        return out[:, 0] if x.ndim == 1 else out


def median_of(values: np.ndarray) -> float:
    """Median; mean of the two central order statistics for even counts."""
    v = np.sort(np.asarray(values, dtype=float))
    n = v.size
    mid = n // 2
    return float(v[mid]) if n % 2 else float(0.5 * (v[mid - 1] + v[mid]))


def window_nqi(model: EnsembleModel, x: FeatureVector | Sequence[float]) -> float:
    vec = x.as_array() if isinstance(x, FeatureVector) else np.asarray(x, dtype=float)
    return median_of(model.unit_predictions(vec))


def window_nqi_batch(model: EnsembleModel, X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.empty(0)
    preds = np.sort(model.unit_predictions(np.asarray(X, dtype=float)), axis=0)
    n = preds.shape[0]
    mid = n // 2
    return preds[mid] if n % 2 else 0.5 * (preds[mid - 1] + preds[mid])


def _fit_unit(corpus: TrainingCorpus, C: float, epsilon: float, seed: int, unit: str,
              center: np.ndarray | None, scale: np.ndarray | None) -> SvrModel:
    sample = bootstrap_sample(corpus, seed, unit)
    X = sample.features
    if center is not None:
        X = (X - center) / scale
    return train_svr(SvrProblem(X, sample.targets, C, epsilon))


def train_ensemble(
    corpus: TrainingCorpus,
    C: float = DEFAULT_C,
    epsilon: float = DEFAULT_EPSILON,
    n_models: int = DEFAULT_N_MODELS,
    master_seed: int = 0,
    *,
    n_jobs: int = 1,
    bootstrap_unit: str = "window",
    standardize: bool = False,
    provenance: str = "",
) -> EnsembleModel:
    """Train ``n_models`` SVR units, each on its own bootstrap sample.

    Unit ``m`` always sees the sample drawn with ``unit_seed(master_seed, m)``,
    so the result does not depend on ``n_jobs``.
    """
    if len(corpus) < 2:
        raise ValueError("corpus needs at least two rows")
    if n_models < 1:
        raise ValueError("n_models must be at least 1")
    center = scale = None
    if standardize:
        center = corpus.features.mean(axis=0)
        scale = corpus.features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    seeds = [unit_seed(master_seed, m) for m in range(n_models)]

    def fit(m: int) -> SvrModel:
        try:
            return _fit_unit(corpus, C, epsilon, seeds[m], bootstrap_unit, center, scale)
        except SvrConvergenceError as exc:
            raise EnsembleTrainingError(m, exc) from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            units = list(pool.map(fit, range(n_models)))
    else:
        units = [fit(m) for m in range(n_models)]
    return EnsembleModel(
        units=tuple(units), C=C, epsilon=epsilon, n_models=n_models, master_seed=master_seed,
        normalization_constant=corpus.normalization_constant, provenance=provenance,
        bootstrap_unit=bootstrap_unit, training_subjects=tuple(sorted(set(corpus.subject_ids))),
        feature_center=center, feature_scale=scale,
    )


# ---------------------------------------------------------------------------
# Model file


def model_to_dict(model: EnsembleModel) -> dict:
    def arr(a):
        return None if a is None else [float(v) for v in a]

    return {
        "format": MODEL_FORMAT,
        "C": model.C,
        "epsilon": model.epsilon,
        "n_models": model.n_models,
        "master_seed": model.master_seed,
        "normalization_constant": model.normalization_constant,
        "provenance": model.provenance,
        "bootstrap_unit": model.bootstrap_unit,
        "training_subjects": list(model.training_subjects),
        "feature_center": arr(model.feature_center),
        "feature_scale": arr(model.feature_scale),
        "units": [{"w": arr(u.w), "b": u.b} for u in model.units],
    }


def model_from_dict(data: Mapping) -> EnsembleModel:
    if data.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {data.get('format')!r}")

    def arr(a):
        return None if a is None else np.array(a, dtype=float)

    return EnsembleModel(
        units=tuple(SvrModel(np.array(u["w"], dtype=float), u["b"]) for u in data["units"]),
        C=data["C"], epsilon=data["epsilon"], n_models=data["n_models"],
        master_seed=data["master_seed"], normalization_constant=data["normalization_constant"],
        provenance=data["provenance"], bootstrap_unit=data["bootstrap_unit"],
        training_subjects=tuple(data["training_subjects"]),
        feature_center=arr(data["feature_center"]), feature_scale=arr(data["feature_scale"]),
    )


def dumps_model(model: EnsembleModel) -> str:
    # json writes floats with repr(), which round-trips exactly
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def save_model(model: EnsembleModel, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: str | Path) -> EnsembleModel:
    return model_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class NqiScore:
    subject_id: str
    value: float
    session_id: str | None = None
    window_index: int | None = None


def score_windows(model: EnsembleModel, rows: Sequence[FeatureRow]) -> list[NqiScore]:
    rows = sorted(rows, key=lambda r: (r.subject_id, r.session_id, r.window_index))
    if not rows:
        return []
    X = np.array([r.features.as_array() for r in rows])
    values = window_nqi_batch(model, X)
    return [
        NqiScore(r.subject_id, float(v), r.session_id, r.window_index)
        for r, v in zip(rows, values)
    ]


def rollup(window_scores: Iterable[NqiScore]) -> tuple[list[NqiScore], list[NqiScore]]:
    """Session score = mean of its windows; subject score = mean of its sessions."""
    by_session: dict[tuple[str, str], list[float]] = defaultdict(list)
    for s in window_scores:
        by_session[(s.subject_id, s.session_id or "")].append(s.value)
    sessions = [
        NqiScore(sid, float(np.mean(v)), sess) for (sid, sess), v in sorted(by_session.items())
    ]
    by_subject: dict[str, list[float]] = defaultdict(list)
    for s in sessions:
        by_subject[s.subject_id].append(s.value)
    subjects = [NqiScore(sid, float(np.mean(v))) for sid, v in sorted(by_subject.items())]
    return sessions, subjects


def featurize_dataset(
    dataset: CohortDataset, window_s: float = WINDOW_S, min_keys: int = MIN_KEYS
) -> list[FeatureRow]:
    rows: list[FeatureRow] = []
    for key in sorted(dataset.sessions):
        rows.extend(featurize_session(dataset.sessions[key], window_s, min_keys))
    return rows


def subject_nqi(
    model: EnsembleModel, dataset: CohortDataset, subject_id: str,
    window_s: float = WINDOW_S, min_keys: int = MIN_KEYS,
) -> NqiScore:
    rows: list[FeatureRow] = []
    for session in dataset.sessions_of(subject_id):
        rows.extend(featurize_session(session, window_s, min_keys))
    if not rows:
        raise InsufficientDataError(f"subject {subject_id!r} has no window with >= {min_keys} keys")
    _, subjects = rollup(score_windows(model, rows))
    return subjects[0]


# ---------------------------------------------------------------------------
# Cross-dataset validation and parameter search


@dataclass(frozen=True)
class EnsembleParams:
    C: float = DEFAULT_C
    epsilon: float = DEFAULT_EPSILON
    n_models: int = DEFAULT_N_MODELS
    master_seed: int = 0
    normalization_constant: float = UPDRS3_MAX
    bootstrap_unit: str = "window"
    standardize: bool = False
    n_jobs: int = 1

    def train(self, corpus: TrainingCorpus, provenance: str = "") -> EnsembleModel:
        return train_ensemble(
            corpus, self.C, self.epsilon, self.n_models, self.master_seed,
            n_jobs=self.n_jobs, bootstrap_unit=self.bootstrap_unit,
            standardize=self.standardize, provenance=provenance,
        )


@dataclass(frozen=True)
class FeatureCohort:
    """Per-window features plus subject metadata for one dataset."""

    name: str
    rows: tuple[FeatureRow, ...]
    subjects: Mapping[str, SubjectRecord]

    @classmethod
    def from_dataset(cls, name: str, dataset: CohortDataset,
                     window_s: float = WINDOW_S, min_keys: int = MIN_KEYS) -> FeatureCohort:
        return cls(name, tuple(featurize_dataset(dataset, window_s, min_keys)), dict(dataset.subjects))


@dataclass(frozen=True)
class FoldResult:
    train: str
    test: str
    window_scores: tuple[NqiScore, ...]
    subject_scores: tuple[NqiScore, ...]
    auc: float
    n_pd: int
    n_control: int
    model: EnsembleModel = field(repr=False, compare=False)


@dataclass(frozen=True)
class CrossValResult:
    folds: tuple[FoldResult, FoldResult]
    subject_scores: tuple[NqiScore, ...]
    window_scores: tuple[NqiScore, ...]
    combined_auc: float
    n_pd: int
    n_control: int

    def table(self) -> list[dict]:
        """Rows laid out as fold A, fold B, combined."""
        out = [
            {"dataset": f.test, "trained_on": f.train, "n_pd": f.n_pd,
             "n_control": f.n_control, "auc": f.auc}
            for f in self.folds
        ]
        out.append({"dataset": "combined", "trained_on": "-", "n_pd": self.n_pd,
                    "n_control": self.n_control, "auc": self.combined_auc})
        return out


def _subject_auc(scores: Sequence[NqiScore], subjects: Mapping[str, SubjectRecord]) -> tuple[float, int, int]:
    labels = np.array([subjects[s.subject_id].is_pd for s in scores], dtype=bool)
    n_pd = int(labels.sum())
    n_c = labels.size - n_pd
    if n_pd == 0 or n_c == 0:
        return math.nan, n_pd, n_c
    return auc_score([s.value for s in scores], labels), n_pd, n_c


def _train_and_score(train: FeatureCohort, test: FeatureCohort, params: EnsembleParams) -> FoldResult:
    corpus = build_corpus(train.rows, train.subjects, params.normalization_constant)
    model = params.train(corpus, provenance=train.name)
    windows = score_windows(model, test.rows)
    _, subjects = rollup(windows)
    auc, n_pd, n_c = _subject_auc(subjects, test.subjects)
    return FoldResult(train.name, test.name, tuple(windows), tuple(subjects), auc, n_pd, n_c, model)


def cross_validate_features(
    fold_a: FeatureCohort, fold_b: FeatureCohort, params: EnsembleParams = EnsembleParams()
) -> CrossValResult:
    """Train on each fold and score the other; combined = concatenation of held-out scores."""
    if not fold_a.rows or not fold_b.rows:
        raise ValueError("both folds need at least one surviving window")
    overlap = set(fold_a.subjects) & set(fold_b.subjects)
    if overlap:
        raise FoldLeakError(f"subjects present in both folds: {sorted(overlap)[:5]}")
    res_a = _train_and_score(fold_a, fold_b, params)
    res_b = _train_and_score(fold_b, fold_a, params)
    subject_scores = sorted(res_a.subject_scores + res_b.subject_scores, key=lambda s: s.subject_id)
    window_scores = sorted(
        res_a.window_scores + res_b.window_scores,
        key=lambda s: (s.subject_id, s.session_id or "", s.window_index or 0),
    )
    all_subjects = {**fold_a.subjects, **fold_b.subjects}
    auc, n_pd, n_c = _subject_auc(subject_scores, all_subjects)
    return CrossValResult((res_a, res_b), tuple(subject_scores), tuple(window_scores), auc, n_pd, n_c)


def cross_validate(
    datasets: Mapping[str, CohortDataset],
    params: EnsembleParams = EnsembleParams(),
    window_s: float = WINDOW_S,
    min_keys: int = MIN_KEYS,
) -> CrossValResult:
    """Two-fold cross-dataset validation over ``{"denovo": ..., "earlypd": ...}``."""
    names = [Dataset.DENOVO.value, Dataset.EARLYPD.value]
    if set(datasets) != set(names):
        raise ValueError(f"expected datasets {names}, got {sorted(datasets)}")
    cohorts = [FeatureCohort.from_dataset(n, datasets[n], window_s, min_keys) for n in names]
    return cross_validate_features(cohorts[0], cohorts[1], params)


@dataclass(frozen=True)
class GridSearchResult:
    C: float
    epsilon: float
    auc: float
    table: tuple[tuple[float, float, float], ...]


def loo_auc(cohort: FeatureCohort, params: EnsembleParams) -> float:
    """AUC over subject scores, each from a model trained without that subject."""
    by_subject: dict[str, list[FeatureRow]] = defaultdict(list)
    for r in cohort.rows:
        by_subject[r.subject_id].append(r)
    scores = []
    for sid in sorted(by_subject):
        train_rows = [r for r in cohort.rows if r.subject_id != sid]
        corpus = build_corpus(train_rows, cohort.subjects, params.normalization_constant)
        model = params.train(corpus, provenance=f"{cohort.name}-loo")
        _, subj = rollup(score_windows(model, by_subject[sid]))
        scores.append(subj[0])
    auc, _, _ = _subject_auc(scores, cohort.subjects)
    return auc


def grid_search_params(
    paramest: FeatureCohort | CohortDataset,
    C_grid: Sequence[float],
    eps_grid: Sequence[float],
    params: EnsembleParams = EnsembleParams(),
) -> GridSearchResult:
    """Pick (C, epsilon) maximizing leave-one-subject-out AUC.

    Ties go to the smaller C, then the smaller epsilon.
    """
    if not C_grid or not eps_grid:
        raise ValueError("parameter grid is empty")
    if any(c <= 0 for c in C_grid) or any(e <= 0 for e in eps_grid):
        raise ValueError("grid values must be positive")
    if isinstance(paramest, CohortDataset):
        paramest = FeatureCohort.from_dataset("paramest", paramest)
    with_windows = {r.subject_id for r in paramest.rows}
    groups = [paramest.subjects[s].is_pd for s in with_windows]
    if sum(groups) < 2 or len(groups) - sum(groups) < 2:
        raise ValueError("grid search needs at least two subjects per group")
    table = []
    best: tuple[float, float, float] | None = None
    for C in sorted(set(C_grid)):
        for eps in sorted(set(eps_grid)):
            auc = loo_auc(paramest, replace(params, C=C, epsilon=eps))
            table.append((C, eps, auc))
            if best is None or auc > best[2]:
                best = (C, eps, auc)
    assert best is not None
    return GridSearchResult(best[0], best[1], best[2], tuple(table))


# ---------------------------------------------------------------------------
# Score files

WINDOW_SCORE_COLUMNS = ("subject_id", "session_id", "window_index", "nqi")
SUBJECT_SCORE_COLUMNS = ("subject_id", "nqi")


def write_window_scores(scores: Iterable[NqiScore], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WINDOW_SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.subject_id, s.session_id, s.window_index, repr(s.value)])


def write_subject_scores(scores: Iterable[NqiScore], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUBJECT_SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.subject_id, repr(s.value)])


def read_scores(path: str | Path) -> list[NqiScore]:
    """Read either a window-level or a subject-level score file."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            win = row.get("window_index")
            out.append(
                NqiScore(row["subject_id"], float(row["nqi"]), row.get("session_id"),
                         int(win) if win not in (None, "") else None)
            )
    return out

"""Keystroke hold-time motor index: featurization, bagged linear SVR and evaluation statistics."""

from .config import RunConfig
from .ensemble import (
    EnsembleModel,
    EnsembleParams,
    FeatureCohort,
    NqiScore,
    build_corpus,
    cross_validate,
    cross_validate_features,
    grid_search_params,
    load_model,
    rollup,
    save_model,
    score_windows,
    subject_nqi,
    train_ensemble,
    window_nqi,
)
from .evalstats import (
    ScoredCohort,
    auc_score,
    compare_metrics,
    delong_test,
    logistic_fit,
    mann_whitney_u,
    roc_curve,
    youden_cutpoint,
)
from .features import FeatureVector, feature_vector, featurize_session, partition_windows
from .keystroke import CohortDataset, KeyEvent, SubjectRecord, TypingSession, ingest_log, typing_speed
from .svr import SvrModel, SvrProblem, kkt_check, train_svr
from .synth import ImpairmentParams, TypistProfile, generate_cohort, generate_session

__version__ = "0.1.0"

"""Synthetic typists and cohorts with a controllable motor-impairment effect.

Impairment is modeled as a two-state Markov chain over keystrokes: in the
"burst" state hold times get a wider log-scale spread and an optional mean
shift, producing the within-window heteroscedasticity the features target.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .keystroke import (
    UPDRS3_MAX,
    CohortDataset,
    Dataset,
    Group,
    KeyClass,
    KeyEvent,
    Sex,
    SubjectRecord,
    TypingSession,
)

# hold times are clipped below the default stuck-key limit so output passes ingestion
MAX_SYNTH_HOLD = 1.9
MIN_SYNTH_HOLD = 0.005
KEY_CLASS_P = ((KeyClass.ALNUM, 0.80), (KeyClass.SPACE, 0.17), (KeyClass.SYMBOL, 0.03))

PD_UPDRS_MEAN = 20.6
PD_UPDRS_SD = 7.7
CONTROL_UPDRS_MAX = 5


@dataclass(frozen=True)
class TypistProfile:
    mean_ht: float = 0.1
    ht_sigma: float = 0.25
    keys_per_min: float = 100.0
    rollover_prob: float = 0.1
    session_minutes: float = 15.0

    def __post_init__(self) -> None:
        if min(self.mean_ht, self.keys_per_min, self.session_minutes) <= 0 or self.ht_sigma < 0:
            raise ValueError("profile rates and durations must be positive")
        if not 0 <= self.rollover_prob <= 1:
            raise ValueError("rollover_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ImpairmentParams:
    burst_enter_prob: float = 0.05
    burst_exit_prob: float = 0.2
    burst_sigma_multiplier: float = 2.0
    # slower key release during bursts; zero leaves a variance-only effect
    burst_mean_shift: float = 0.05
    target_updrs3: int = 20

    def __post_init__(self) -> None:
        if not (0 < self.burst_enter_prob < 1 and 0 < self.burst_exit_prob < 1):
            raise ValueError("transition probabilities must lie in (0, 1)")
        if self.burst_sigma_multiplier < 1:
            raise ValueError("burst_sigma_multiplier must be >= 1")


NULL_IMPAIRMENT = ImpairmentParams(burst_sigma_multiplier=1.0, burst_mean_shift=0.0)


def _burst_states(n: int, impairment: ImpairmentParams | None, rng: np.random.Generator) -> np.ndarray:
    states = np.zeros(n, dtype=bool)
    if impairment is None:
        return states
    u = rng.random(n)
    # stationary start
    p_burst = impairment.burst_enter_prob / (impairment.burst_enter_prob + impairment.burst_exit_prob)
    s = u[0] < p_burst
    states[0] = s
    enter, leave = impairment.burst_enter_prob, impairment.burst_exit_prob
    for k in range(1, n):
        s = (u[k] >= leave) if s else (u[k] < enter)
        states[k] = s
    return states


def generate_session(
    profile: TypistProfile,
    impairment: ImpairmentParams | None = None,
    seed: int | np.random.SeedSequence = 0,
    subject_id: str = "S000",
    session_id: str = "1",
) -> TypingSession:
    rng = np.random.default_rng(seed)
    duration = profile.session_minutes * 60.0
    interval = 60.0 / profile.keys_per_min
    n = int(duration / interval * 1.5) + 64
    burst = _burst_states(n, impairment, rng)
    mu = np.full(n, np.log(profile.mean_ht))
    sigma = np.full(n, profile.ht_sigma)
    if impairment is not None:
        mu[burst] = np.log(profile.mean_ht + impairment.burst_mean_shift)
        sigma[burst] = profile.ht_sigma * impairment.burst_sigma_multiplier
    holds = np.clip(np.exp(mu + sigma * rng.standard_normal(n)), MIN_SYNTH_HOLD, MAX_SYNTH_HOLD)
    rollover = rng.random(n) < profile.rollover_prob
    flight_mean = max(interval - profile.mean_ht, 0.02)
    flights = rng.exponential(flight_mean, n)
    overlap_frac = rng.uniform(0.3, 0.95, n)
    gaps = np.where(rollover, holds * overlap_frac, holds + flights)
    presses = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
    keep = presses < duration
    cls_draw = rng.random(n)
    cuts = np.cumsum([p for _, p in KEY_CLASS_P])
    classes = [KEY_CLASS_P[int(np.searchsorted(cuts, c, side="right"))][0] for c in cls_draw]
    events = tuple(
        KeyEvent(float(p), float(p + h), c)
        for p, h, c, k in zip(presses, holds, classes, keep)
        if k
    )
    return TypingSession(subject_id, session_id, events)


def random_profile(rng: np.random.Generator, session_minutes: float = 15.0) -> TypistProfile:
    """Between-subject variation in typing style (independent of diagnosis)."""
    return TypistProfile(
        mean_ht=float(rng.uniform(0.08, 0.15)),
        ht_sigma=float(rng.uniform(0.2, 0.35)),
        keys_per_min=float(rng.uniform(70.0, 150.0)),
        rollover_prob=float(rng.uniform(0.0, 0.2)),
        session_minutes=session_minutes,
    )


def generate_cohort(
    n_pd: int,
    n_control: int,
    profiles: TypistProfile | Sequence[TypistProfile] | None = None,
    impairment: ImpairmentParams | None = ImpairmentParams(),
    seed: int = 0,
    *,
    dataset: Dataset | str = Dataset.DENOVO,
    sessions_per_subject: int = 1,
    session_minutes: float = 15.0,
) -> CohortDataset:
    """PD subjects type with ``impairment``; controls never do.

    ``profiles`` may be one profile for everyone, one per subject (PD first),
    or None for randomly drawn per-subject profiles.
    """
    if n_pd < 1 or n_control < 1:
        raise ValueError("cohorts need at least one PD subject and one control")
    dataset = Dataset(dataset)
    total = n_pd + n_control
    if isinstance(profiles, TypistProfile):
        profiles = [profiles] * total
    elif profiles is not None and len(profiles) != total:
        raise ValueError(f"expected {total} profiles, got {len(profiles)}")
    children = np.random.SeedSequence([seed, list(Dataset).index(dataset)]).spawn(total)
    subjects, sessions = [], []
    for k, child in enumerate(children):
        is_pd = k < n_pd
        sub_seed, *sess_seeds = child.spawn(1 + sessions_per_subject)
        rng = np.random.default_rng(sub_seed)
        profile = profiles[k] if profiles is not None else random_profile(rng, session_minutes)
        if is_pd:
            updrs = int(np.clip(round(rng.normal(PD_UPDRS_MEAN, PD_UPDRS_SD)), 0, UPDRS3_MAX))
            tap_alt = rng.normal(160.0, 25.0)
            tap_single = rng.normal(165.0, 25.0)
        else:
            updrs = int(rng.integers(0, CONTROL_UPDRS_MAX + 1))
            tap_alt = rng.normal(180.0, 25.0)
            tap_single = rng.normal(170.0, 25.0)
        sid = f"{dataset.value}-{'pd' if is_pd else 'ct'}{k if is_pd else k - n_pd:03d}"
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                group=Group.PD if is_pd else Group.CONTROL,
                dataset=dataset,
                updrs3=updrs,
                sex=Sex.FEMALE if rng.random() < 0.5 else Sex.MALE,
                age=round(float(rng.normal(60.0, 9.0)), 1),
                education_years=float(np.clip(round(rng.normal(15.0, 4.5)), 6, 25)),
                tapping_single=round(float(max(tap_single, 1.0)), 1),
                tapping_alternating=round(float(max(tap_alt, 1.0)), 1),
            )
        )
        imp = replace(impairment, target_updrs3=updrs) if (is_pd and impairment is not None) else None
        for j, ss in enumerate(sess_seeds):
            sessions.append(generate_session(profile, imp, ss, sid, str(j + 1)))
    return CohortDataset.build(subjects, sessions)

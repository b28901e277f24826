"""Keystroke log ingestion, subject metadata and session-level metrics."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)

LOG_COLUMNS = ("subject_id", "session_id", "key_class", "press_s", "release_s")
METADATA_COLUMNS = (
    "subject_id",
    "group",
    "dataset",
    "updrs3",
    "sex",
    "age",
    "education_years",
    "tapping_single",
    "tapping_alternating",
)

UPDRS3_MAX = 108


class KeyClass(str, enum.Enum):
    ALNUM = "alnum"
    SYMBOL = "symbol"
    SPACE = "space"
    OTHER = "other"


# Only keys expected to have a short hold time enter the hold-time series.
ELIGIBLE_CLASSES = frozenset({KeyClass.ALNUM, KeyClass.SYMBOL, KeyClass.SPACE})


class Group(str, enum.Enum):
    PD = "pd"
    CONTROL = "control"


class Dataset(str, enum.Enum):
    DENOVO = "denovo"
    EARLYPD = "earlypd"
    PARAMEST = "paramest"


class Sex(str, enum.Enum):
    FEMALE = "female"
    MALE = "male"


class LogFormatError(ValueError):
    """A keystroke log or metadata file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class TypingSpeedError(ValueError):
    """Typing speed is undefined for sessions with fewer than two presses."""


@dataclass(frozen=True, order=True)
class KeyEvent:
    press_time: float
    release_time: float
    key_class: KeyClass = KeyClass.ALNUM

    def __post_init__(self) -> None:
        if not isinstance(self.key_class, KeyClass):
            object.__setattr__(self, "key_class", KeyClass(self.key_class))
        hold = self.release_time - self.press_time
        if not (math.isfinite(hold) and hold > 0):
            raise ValueError(
                f"release_time must exceed press_time (got {self.press_time}, {self.release_time})"
            )

    @property
    def hold_time(self) -> float:
        return self.release_time - self.press_time

    @property
    def eligible(self) -> bool:
        return self.key_class in ELIGIBLE_CLASSES


@dataclass(frozen=True)
class TypingSession:
    subject_id: str
    session_id: str
    events: tuple[KeyEvent, ...] = ()
    warnings: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        events = tuple(sorted(self.events, key=lambda e: (e.press_time, e.release_time)))
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "warnings", dict(self.warnings))

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject_id, self.session_id)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class ValidationPolicy:
    """Filtering rules applied while reading a log.

    ``max_hold`` drops stuck-key artifacts; ``drop_other`` removes keys that
    never enter the hold-time series (backspace, modifiers, ...).
    """

    max_hold: float = 2.0
    drop_other: bool = True


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    group: Group
    dataset: Dataset
    updrs3: int
    sex: Sex
    age: float
    education_years: float
    tapping_single: float | None = None
    tapping_alternating: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "group", Group(self.group))
        object.__setattr__(self, "dataset", Dataset(self.dataset))
        object.__setattr__(self, "sex", Sex(self.sex))
        if not 0 <= self.updrs3 <= UPDRS3_MAX:
            raise ValueError(f"updrs3 must lie in [0, {UPDRS3_MAX}], got {self.updrs3}")

    @property
    def is_pd(self) -> bool:
        return self.group is Group.PD


@dataclass(frozen=True)
class CohortDataset:
    subjects: Mapping[str, SubjectRecord]
    sessions: Mapping[tuple[str, str], TypingSession]

    def __post_init__(self) -> None:
        for (subject_id, session_id), session in self.sessions.items():
            if subject_id not in self.subjects:
                raise ValueError(f"session {session_id!r} references unknown subject {subject_id!r}")
            if session.key != (subject_id, session_id):
                raise ValueError(f"session keyed as {(subject_id, session_id)} but carries {session.key}")

    @classmethod
    def build(
        cls, subjects: Iterable[SubjectRecord], sessions: Iterable[TypingSession]
    ) -> CohortDataset:
        subj: dict[str, SubjectRecord] = {}
        for record in subjects:
            if record.subject_id in subj:
                raise ValueError(f"duplicate subject {record.subject_id!r}")
            subj[record.subject_id] = record
        sess: dict[tuple[str, str], TypingSession] = {}
        for session in sessions:
            if session.key in sess:
                raise ValueError(f"duplicate session {session.key}")
            sess[session.key] = session
        return cls(subj, sess)

    def sessions_of(self, subject_id: str) -> list[TypingSession]:
        return [s for k, s in sorted(self.sessions.items()) if k[0] == subject_id]

    def subset(self, subject_ids: Iterable[str]) -> CohortDataset:
        keep = set(subject_ids)
        return CohortDataset(
            {k: v for k, v in self.subjects.items() if k in keep},
            {k: v for k, v in self.sessions.items() if k[0] in keep},
        )


# ---------------------------------------------------------------------------
# Log ingestion


def _iter_log_rows(path: Path) -> Iterator[tuple[int, dict[str, str]]]:
    text = path.read_text()
    stripped = text.lstrip()
    if not stripped:
        return
    if stripped.startswith("{"):
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"invalid record: {exc.msg}", lineno, str(path)) from None
            if not isinstance(record, dict):
                raise LogFormatError("record is not an object", lineno, str(path))
            yield lineno, {k: str(v) for k, v in record.items()}
        return
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if tuple(h.strip() for h in header) != LOG_COLUMNS:
        raise LogFormatError(f"expected header {','.join(LOG_COLUMNS)}", 1, str(path))
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(LOG_COLUMNS):
            raise LogFormatError(f"expected {len(LOG_COLUMNS)} fields, got {len(row)}", lineno, str(path))
        yield lineno, dict(zip(LOG_COLUMNS, (c.strip() for c in row)))


def ingest_log(path: str | Path, policy: ValidationPolicy | None = None) -> list[TypingSession]:
    """Read a keystroke log into sessions ordered by (subject_id, session_id).

    Rows with release <= press or with a hold time above ``policy.max_hold``
    are dropped and tallied in ``TypingSession.warnings``. Sessions left with
    no events are omitted (with a logged warning), which keeps
    ``ingest(write(ingest(f)))`` equal to ``ingest(f)``. Malformed rows raise
    :class:`LogFormatError` carrying the line number.
    """
    policy = policy or ValidationPolicy()
    path = Path(path)
    events: dict[tuple[str, str], list[KeyEvent]] = {}
    warnings: dict[tuple[str, str], Counter] = {}
    for lineno, row in _iter_log_rows(path):
        missing = [c for c in LOG_COLUMNS if c not in row]
        if missing:
            raise LogFormatError(f"missing fields {missing}", lineno, str(path))
        try:
            key_class = KeyClass(row["key_class"])
        except ValueError:
            raise LogFormatError(f"unknown key_class {row['key_class']!r}", lineno, str(path)) from None
        try:
            press = float(row["press_s"])
            release = float(row["release_s"])
        except ValueError:
            raise LogFormatError("press_s/release_s must be decimal seconds", lineno, str(path)) from None
        if not (math.isfinite(press) and math.isfinite(release)) or press < 0:
            raise LogFormatError("timestamps must be finite and non-negative", lineno, str(path))
        key = (row["subject_id"], row["session_id"])
        bucket = events.setdefault(key, [])
        tally = warnings.setdefault(key, Counter())
        if policy.drop_other and key_class is KeyClass.OTHER:
            tally["other_key"] += 1
            continue
        if release <= press:
            tally["nonpositive_hold"] += 1
            continue
        if release - press > policy.max_hold:
            tally["hold_above_max"] += 1
            continue
        bucket.append(KeyEvent(press, release, key_class))
    sessions = []
    for k in sorted(events):
        if not events[k]:
            log.warning("%s/%s: every row was dropped (%s)", k[0], k[1],
                        ", ".join(f"{r}={c}" for r, c in sorted(warnings[k].items())))
            continue
        sessions.append(TypingSession(k[0], k[1], tuple(events[k]), dict(warnings[k])))
    return sessions


def write_log(sessions: Iterable[TypingSession], path: str | Path) -> None:
    """Write sessions in the CSV log format (floats written with ``repr``)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for session in sessions:
            for ev in session.events:
                writer.writerow(
                    [session.subject_id, session.session_id, ev.key_class.value,
                     repr(ev.press_time), repr(ev.release_time)]
                )


def _optional_float(value: str) -> float | None:
    value = value.strip()
    return float(value) if value else None


def read_metadata(path: str | Path) -> list[SubjectRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        absent = [c for c in METADATA_COLUMNS[:7] if c not in reader.fieldnames]
        if absent:
            raise LogFormatError(f"metadata missing columns {absent}", 1, str(path))
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    SubjectRecord(
                        subject_id=row["subject_id"],
                        group=Group(row["group"]),
                        dataset=Dataset(row["dataset"]),
                        updrs3=int(row["updrs3"]),
                        sex=Sex(row["sex"]),
                        age=float(row["age"]),
                        education_years=float(row["education_years"]),
                        tapping_single=_optional_float(row.get("tapping_single") or ""),
                        tapping_alternating=_optional_float(row.get("tapping_alternating") or ""),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise LogFormatError(str(exc), lineno, str(path)) from None
    return records


def write_metadata(records: Iterable[SubjectRecord], path: str | Path) -> None:
    def fmt(v: float | None) -> str:
        return "" if v is None else repr(v)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_COLUMNS)
        for r in records:
            writer.writerow(
                [r.subject_id, r.group.value, r.dataset.value, r.updrs3, r.sex.value,
                 repr(r.age), repr(r.education_years), fmt(r.tapping_single),
                 fmt(r.tapping_alternating)]
            )


def load_cohort(log_path: str | Path, metadata_path: str | Path,
                policy: ValidationPolicy | None = None) -> CohortDataset:
    return CohortDataset.build(read_metadata(metadata_path), ingest_log(log_path, policy))


# ---------------------------------------------------------------------------
# Session metrics


def hold_times(session: TypingSession) -> list[tuple[float, float]]:
    """(press_time, hold_time) for every eligible key, in press order."""
    return [(e.press_time, e.release_time - e.press_time) for e in session.events if e.eligible]


def typing_speed(session: TypingSession | Sequence[KeyEvent]) -> float:
    """Eligible key presses per minute over the span of press times."""
    events = session.events if isinstance(session, TypingSession) else session
    presses = [e.press_time for e in events if e.eligible]
    if len(presses) < 2:
        raise TypingSpeedError("typing speed needs at least two eligible key presses")
    span = max(presses) - min(presses)
    if span <= 0:
        raise TypingSpeedError("all key presses share one timestamp")
    return len(presses) / (span / 60.0)

import numpy as np
import pytest

from nqi.ensemble import FeatureCohort, TrainingCorpus, build_corpus
from nqi.synth import generate_cohort


@pytest.fixture(scope="session")
def small_folds():
    """Two disjoint 8+8 synthetic datasets, 10 minutes per subject."""
    a = generate_cohort(8, 8, seed=101, dataset="denovo", session_minutes=10)
    b = generate_cohort(8, 8, seed=102, dataset="earlypd", session_minutes=10)
    return FeatureCohort.from_dataset("denovo", a), FeatureCohort.from_dataset("earlypd", b)


@pytest.fixture(scope="session")
def small_corpus(small_folds) -> TrainingCorpus:
    fold = small_folds[0]
    return build_corpus(fold.rows, fold.subjects)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)

import pytest

from hosputil.glm import ModelFormula, Term, fit_formula
from hosputil.serve.artifact import artifact_from_model, write_artifact_atomic
from hosputil.table import CATEGORICAL

from helpers import two_by_two

TOKEN = "s3cret"


def exposure_artifact(events_exposed=30, stamp="2026-01-01T00:00:00Z"):
    """Saturated 2x2 model: P(y | EXP=1) = events_exposed/100, P(y | EXP=0) = 0.10."""
    m = fit_formula(two_by_two(events_exposed, 100, 10, 100),
                    ModelFormula("HIGH_UTIL", (Term("EXP", CATEGORICAL, "0"),)))
    return artifact_from_model(m, {"test": {"auc": 0.6, "n": 100}}, "", stamp)


@pytest.fixture
def artifact_file(tmp_path):
    p = tmp_path / "model.json"
    write_artifact_atomic(p, exposure_artifact())
    return p


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

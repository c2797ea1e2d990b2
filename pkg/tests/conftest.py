import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vesseltrack import desk, phantom  # noqa: E402

MODEL_CACHE = os.path.join(os.path.dirname(__file__), ".model_cache")

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, ok: bool, title: str, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def desk_specs():
    return phantom.desk_split()


@pytest.fixture(scope="session")
def train_data(desk_specs):
    return desk.load_dataset(desk_specs[0])


@pytest.fixture(scope="session")
def heldout(desk_specs):
    return desk.load_dataset(desk_specs[1])


def _model(kind, request):
    rec = desk.recipe(kind)
    path = os.path.join(MODEL_CACHE, f"{kind}-{rec.key()}.vtw")
    data = None if os.path.exists(path) else request.getfixturevalue("train_data")
    return desk.cached_model(rec, MODEL_CACHE, data)


@pytest.fixture(scope="session")
def tracker_model(request):
    return _model("tracker", request)


@pytest.fixture(scope="session")
def notrans_model(request):
    return _model("tracker-notrans", request)


@pytest.fixture(scope="session")
def seed_model(request):
    return _model("proximity-seeds", request)


@pytest.fixture(scope="session")
def ostia_model(request):
    return _model("proximity-ostia", request)

import re

import pytest

from adamkml import pipeline as P

# short runs used by most pipeline and CLI tests
TINY = P.TrainConfig(iter_pretrain=300, iter_probe=20, iter_adapt=60, seed=1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def ring_source():
    return P.pretrain("ring8_src", "mlp2d", TINY)


@pytest.fixture(scope="session")
def default_source():
    """mlp2d ring source at the default configuration (3000 steps, seed 1)."""
    return P.pretrain("ring8_src", "mlp2d", P.TrainConfig())


_criteria: dict[int, bool] = {}
_notes: list[str] = []


@pytest.fixture
def note(request):
    """Record a measured value for the end-of-run acceptance summary."""
    def add(text):
        _notes.append(f"{request.node.name}: {text}")
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)_", item.name)
    if m and item.module.__name__.endswith("test_acceptance") and rep.when in ("setup", "call"):
        n = int(m.group(1))
        ok = rep.passed if rep.when == "call" else not rep.failed
        _criteria[n] = _criteria.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _criteria[n] else 'FAIL'}")
    for line in _notes:
        terminalreporter.write_line(f"  {line}")

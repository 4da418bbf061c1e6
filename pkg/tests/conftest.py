import numpy as np
import pytest

from _oracles import make_graph


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_graph():
    return make_graph(0)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, from the ``criterion`` user properties."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and rep.when == "call":
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], f"criterion {props['criterion']} "
                              f"[{verdict}] {props['title']}: {props.get('detail', 'no measurement')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from fusionlm.alignment import Segment


def make_segments(n, V=12, D=4, lo=3, hi=9, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = int(rng.integers(lo, hi))
        toks = np.concatenate([[1], rng.integers(4, V, size=m - 2), [2]])
        visual = bool(rng.random() < 0.75)
        feats = rng.normal(size=(m, D)) if visual else np.zeros((m, D))
        out.append(Segment(f"s{i}", toks, feats, visual))
    return out


@pytest.fixture
def segments():
    return make_segments(24)


ACCEPTANCE_LINES = []


def report_criterion(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)

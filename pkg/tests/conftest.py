import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_knn(q, Y, k, exclude=None):
    """Double-loop reference: (squared distance, index) sorted with index tie-break."""
    pairs = []
    for j, y in enumerate(Y):
        if exclude is not None and j == exclude:
            continue
        d2 = 0.0
        for a, b in zip(q, y):
            d2 += (a - b) * (a - b)
        pairs.append((d2, j))
    pairs.sort()
    return pairs[:k]


# acceptance results: criterion -> list of (clause, ok, detail)
ACCEPTANCE: dict = {}


def record(criterion: str, clause: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((clause, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        clauses = ACCEPTANCE[key]
        status = "PASS" if all(ok for _, ok, _ in clauses) else "FAIL"
        parts = "; ".join(f"{c}={'ok' if ok else 'FAIL'} ({d})" if d else f"{c}={'ok' if ok else 'FAIL'}"
                          for c, ok, d in clauses)
        terminalreporter.write_line(f"{key} {status}: {parts}")

import numpy as np
import pytest

from scanet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(out: T.Tensor, seed: int = 99) -> T.Tensor:
    """Scalarize with fixed random weights (a plain sum is degenerate after batch norm)."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum_all(T.mul(out, T.Tensor(w)))


def away_from_kinks(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values off the relu/relu6 kinks so central differences stay one-sided-free."""
    a = a.copy()
    for k in (0.0, 6.0):
        near = np.abs(a - k) < margin
        a[near] = k + np.where(a[near] >= k, margin, -margin)
    return a


# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

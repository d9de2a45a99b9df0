"""Shared oracles. Nothing here imports the package's own gradient checker."""

from __future__ import annotations

import numpy as np
import pytest


def fd_grad(scalar_fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``scalar_fn()`` with respect to ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = scalar_fn()
        arr[i] = orig - h
        fm = scalar_fn()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -----------------------------------------------------
CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records one summary line, then asserts ``ok``."""

    def record(n, title, ok, detail=""):
        CRITERIA.append(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {title}  [{detail}]")
        assert ok, f"criterion {n} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hetid.datamodel import StackedProblem  # noqa: E402


def random_problem(rng, N, C, M, n_active=None, noise=0.1, signs=()):
    """Random stacked problem with a sparse ground truth; returns ``(problem, W_true)``."""
    A = rng.standard_normal((C, M, N))
    W = np.zeros((N, C))
    n_active = max(1, N // 3) if n_active is None else n_active
    active = rng.choice(N, size=n_active, replace=False)
    W[active] = rng.standard_normal((n_active, C)) * 2.0
    y = np.einsum("cmn,nc->cm", A, W) + noise * rng.standard_normal((C, M))
    return StackedProblem(y, A, tuple(signs)), W


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    ev = np.exp(rng.uniform(0, np.log(cond), n))
    return (Q * ev) @ Q.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> one-line verdict, printed after the run
ACCEPTANCE = {}


def record_acceptance(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])

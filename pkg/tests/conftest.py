import numpy as np
import pytest

import deepwiener  # noqa: F401  (enables float64)
from deepwiener.core import Activation, ActivationKind, DiscreteLti, SsLayer, Structure


def random_diag_lti(rng, n_lambda, n_u=1, n_y=1, rho=(0.3, 0.95), d_scale=0.5):
    lam = rng.uniform(*rho, n_lambda) * np.exp(1j * rng.uniform(0, np.pi, n_lambda))
    b = (rng.normal(size=(n_lambda, n_u)) + 1j * rng.normal(size=(n_lambda, n_u))) / np.sqrt(2 * n_u)
    c = (rng.normal(size=(n_y, n_lambda)) + 1j * rng.normal(size=(n_y, n_lambda))) / np.sqrt(2 * n_lambda)
    d = d_scale * rng.normal(size=(n_y, n_u))
    f = np.eye(n_y, n_u) if n_u == n_y else rng.normal(size=(n_y, n_u))
    return DiscreteLti(lam, b, c, d, f, Structure.DIAGONAL)


def random_layer(rng, n_lambda, n_u=1, n_y=1, kind=ActivationKind.TANH, **kw):
    lti = random_diag_lti(rng, n_lambda, n_u, n_y, **kw)
    return SsLayer(lti, Activation(kind), n_u == n_y)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, echoed in the terminal summary."""

    def record(number, ok, detail):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

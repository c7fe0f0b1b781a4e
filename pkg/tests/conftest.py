import numpy as np
import pytest

from clap.model import ModelConfig

FD_STEP = 1e-5
# exact-zero gradients (bias ahead of train-mode BN) leave ~eps*|f|/step of FD
# round-off; below this scale the check is effectively absolute (1e-9)
REL_FLOOR = 1e-5

_acceptance_lines = []


def record_criterion(number, passed, detail):
    _acceptance_lines.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


def numerical_gradient(f, x, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        plus = f()
        x[idx] = old - step
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """8x8 input, two encoder stages, three classes, float64 and no dropout."""
    return ModelConfig(input_size=(8, 8, 3), encoder_widths=(4, 8), num_classes=3,
                       dtype="f64", dropout_rate=0.0)


@pytest.fixture
def desk_config():
    return ModelConfig(input_size=(64, 64, 3), encoder_widths=(4, 8, 16, 32), num_classes=4)

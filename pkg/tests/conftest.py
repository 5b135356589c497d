import numpy as np
import pytest

from crgat.model import CrgatConfig, calibrate_batch_norm, init_params


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def small_model(n_t=4, k=3, seed=0, residual=True, heads=2, calibrate=True):
    """Two graph layers and one hidden dense layer, with batch-norm stats set."""
    cfg = CrgatConfig.build(n_t, head_dims=(4, 4), heads=(heads, heads), dense_dims=(8,), residual=residual)
    params = init_params(cfg, seed)
    if calibrate:
        calibrate_batch_norm(params, crandn(np.random.default_rng(seed + 100), 32, k, n_t))
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(name: str, ok: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

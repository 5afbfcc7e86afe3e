import numpy as np
import pytest

from neuralfit.datagen import DataConfig, synth_dataset
from neuralfit.model import body_config, chain_config, face_config, synth_model
from neuralfit.residuals import make_task


@pytest.fixture(scope="session")
def body():
    return synth_model(body_config(), 0)


@pytest.fixture(scope="session")
def face():
    return synth_model(face_config(), 0)


@pytest.fixture(scope="session")
def chain():
    return synth_model(chain_config(4, 40, 3), 0)


@pytest.fixture(scope="session")
def hmd_data(body):
    return synth_dataset(body, DataConfig(task="hmd", counts=(64, 16, 16), seed=5))


@pytest.fixture(scope="session")
def body2d_data(body):
    return synth_dataset(body, DataConfig(task="body2d", counts=(32, 0, 16), seed=6, noise_px=0.0))


@pytest.fixture(scope="session")
def face_data(face):
    return synth_dataset(face, DataConfig(task="face", counts=(32, 0, 16), seed=7, noise_px=0.0))


@pytest.fixture(scope="session")
def tasks(body, face):
    return {"hmd": make_task("hmd", body), "body2d": make_task("body2d", body), "face": make_task("face", face)}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        a = f(x)
        x[i] = old - h
        b = f(x)
        x[i] = old
        out[i] = (a - b) / (2 * h)
    return out


# --------------------------------------------------------------------------
# Acceptance report: one line per criterion, printed after the test summary.

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(n, ok, detail)`` records criterion n and echoes the line."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])

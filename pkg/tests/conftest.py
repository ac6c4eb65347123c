import numpy as np
import pytest

from splitstream.nn import build_model, conv3x3, dense, flatten, maxpool2x2, relu

_ACCEPTANCE = []


class _Recorder:
    def check(self, number, title, ok, detail=""):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def acceptance():
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def tiny_conv_spec():
    # 2x4x4 input -> conv -> relu -> pool -> conv -> relu -> flatten -> dense
    return [conv3x3(2, 3), relu(), maxpool2x2(), conv3x3(3, 4), relu(), flatten(), dense(16, 3)]


@pytest.fixture
def tiny_conv_model(tiny_conv_spec):
    return build_model(tiny_conv_spec, 3, seed=5, input_shape=(2, 4, 4), dtype=np.float64)


@pytest.fixture
def mlp_model():
    return build_model([dense(6, 8), relu(), dense(8, 4)], 2, seed=3, dtype=np.float64)

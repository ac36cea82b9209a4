import numpy as np
import pytest

from srpvqa import data
from srpvqa.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_cfg():
    """Small enough for finite differences over the whole model."""
    return RunConfig(d_v=4, d_q=8, d=8, heads=2, d_h=4, layers=1, d_f=8, mlp_hidden=8,
                     vocab_size=64, relation_source="oracle", train_encoder=False,
                     epochs=2, batch=16, detector_epochs=3)


@pytest.fixture(scope="session")
def small_dataset():
    examples = data.generate_dataset(40, seed=3)
    return examples, data.build_answer_vocab(examples)


_CRITERIA = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    """Record one acceptance criterion outcome for the terminal summary."""
    def record(number, title, passed, detail=""):
        _CRITERIA[number] = (title, bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {title} {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _CRITERIA:
            title, ok, detail = _CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {title}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  not run or errored")

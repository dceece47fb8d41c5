import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for num in sorted(test_acceptance.RESULTS, key=int):
            terminalreporter.write_line(test_acceptance.RESULTS[num][1])

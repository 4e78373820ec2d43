import numpy as np
import pytest

from sagegrpo.flownet import save_checkpoint
from sagegrpo.harness.config import RunConfig
from sagegrpo.harness.runners import pretrain_net


@pytest.fixture(scope="session")
def default_config():
    return RunConfig().validate()


@pytest.fixture(scope="session")
def pretrained(default_config):
    """Default 5,000-step pretrained net, built once per session."""
    net, losses = pretrain_net(default_config)
    return net, losses


@pytest.fixture(scope="session")
def pretrained_ckpt(pretrained, tmp_path_factory):
    return save_checkpoint(pretrained[0], tmp_path_factory.mktemp("ckpt") / "pretrained.ckpt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0][1:])):
            terminalreporter.write_line(line)

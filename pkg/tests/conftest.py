import numpy as np
import pytest

from randprune.graph import mini_resnet, mini_vgg
from randprune.nn import Network, recalibrate_bn


@pytest.fixture(scope="session")
def resnet_graph():
    return mini_resnet(depth=8, base_width=16)


@pytest.fixture(scope="session")
def vgg_graph():
    return mini_vgg()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def calibrated(graph, seed=0, dtype=np.float32, n=64):
    """Freshly initialized network whose batchnorm stats match random inputs."""
    net = Network.initialize(graph, seed=seed, dtype=dtype)
    x = np.random.default_rng(seed + 1).normal(size=(n, *graph.input_shape)).astype(dtype)
    recalibrate_bn(net, x)
    return net, x


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

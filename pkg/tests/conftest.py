import time

import numpy as np
import pytest

from comix.bcos import BcosNetwork, InputEncodingSpec, TrainConfig, train
from comix.cdf import build_feature_bank, select_cdfs
from comix.data import SyntheticConfig, generate_synthetic


def random_net(spec=InputEncodingSpec(3, 3, 1), classes=3, hidden=(7, 5), B=1.5, seed=0):
    return BcosNetwork.random(spec, classes, hidden, B, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synthetic():
    """Tiny dataset for fast end-to-end checks."""
    return generate_synthetic(SyntheticConfig(train_per_class=20, test_per_class=5, seed=3))


@pytest.fixture(scope="session")
def small_model(small_synthetic):
    tr, _ = small_synthetic
    net = BcosNetwork.random(tr.input_spec, 3, (32, 16), seed=0)
    net, _ = train(net, tr, TrainConfig(max_epochs=40, seed=0))
    bank = build_feature_bank(net, tr)
    return net, bank, select_cdfs(bank, 4)


@pytest.fixture(scope="session")
def desk_data():
    """The desk experiment: 3 classes, 600 train / 300 test, 16 x 16."""
    return generate_synthetic(SyntheticConfig())


@pytest.fixture(scope="session")
def desk_model(desk_data):
    """Default architecture and TrainConfig, trained once per session.

    Returns ``(net, bank, cdfs, history, seconds)``; ``seconds`` covers
    training, bank construction and CDF selection.
    """
    tr, _ = desk_data
    start = time.perf_counter()
    net = BcosNetwork.random(tr.input_spec, tr.class_count, seed=0)
    net, history = train(net, tr, TrainConfig())
    bank = build_feature_bank(net, tr)
    cdfs = select_cdfs(bank, 8)
    return net, bank, cdfs, history, time.perf_counter() - start


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)

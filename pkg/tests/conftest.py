import numpy as np
import pytest

from ctf_retrieval.model import CrossModalRetriever, ModelConfig

# d=8 configuration used wherever gradients are checked against finite differences;
# a wider init keeps gradients well above finite-difference noise.
MICRO = ModelConfig(
    model_dim=8,
    num_heads=2,
    trm1_layers=1,
    trm2_layers=1,
    img_trm_layers=1,
    xtrm_blocks=1,
    conv1_layers=((4, 2), (4, 2)),
    conv2_layers=((2, 2),),
    roi_feature_dim=4,
    mlp_hidden=(16, 8, 1),
    init_std=0.2,
    seed=3,
)

# small but structurally complete configuration for fast behavioural tests
SMALL = ModelConfig(
    model_dim=16,
    num_heads=2,
    trm1_layers=1,
    trm2_layers=1,
    img_trm_layers=1,
    xtrm_blocks=2,
    roi_feature_dim=6,
    mlp_hidden=(32, 16, 1),
    init_std=0.1,
    seed=5,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_model():
    return CrossModalRetriever(MICRO)


@pytest.fixture
def small_model():
    return CrossModalRetriever(SMALL)


def random_boxes(rng, shape):
    lo = rng.uniform(0.0, 0.45, size=(*shape, 2))
    hi = lo + rng.uniform(0.1, 0.5, size=(*shape, 2))
    return np.concatenate([lo, hi], axis=-1)


# acceptance criteria append (number, title, passed, detail) here; printed after the run
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")

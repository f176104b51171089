import numpy as np
import pytest

from rankplat.diagnostics import tiny_corpus
from rankplat.encoder import EncoderConfig, Vocab


@pytest.fixture(scope="session")
def tiny():
    return tiny_corpus(0)


@pytest.fixture(scope="session")
def tiny_vocab(tiny):
    cfg = tiny.cfg
    return Vocab.from_catalog(tiny.catalog, cfg.num_countries + 1, cfg.num_devices + 1, len(tiny.query_category) + 1)


@pytest.fixture
def small_encoder_cfg(tiny):
    return EncoderConfig(num_layers=1, num_heads=2, d_model=8, max_seq_len=12, activation="gelu",
                         train_origin=tiny.cfg.start_time, id_dim=4, meta_dim=2, visual_dim=4, action_dim=2,
                         time_dim=2, context_dim=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_corpus():
    from rankplat.synthetic import generate
    return generate()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])

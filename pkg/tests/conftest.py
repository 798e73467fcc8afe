import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from finin.data import generate_synthetic_corpus  # noqa: E402
from finin.embedding import HashingProvider  # noqa: E402
from finin.features import FeatureStore  # noqa: E402
from finin.model import FininNetwork, ModelConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(40, 4, 0.9, 3)


@pytest.fixture
def small_store(small_corpus):
    return FeatureStore(small_corpus, HashingProvider(16, 0))


def toy_network(store, **overrides):
    """A small network with bar statistics fitted on the whole store."""
    cfg = ModelConfig(**{"text_dim": store.text_dim, "fused_dim": 16, **overrides})
    net = FininNetwork(cfg)
    net.fit_bar_stats(store.bars(range(len(store))))
    return net


def jitter_biases(net, seed=1, scale=0.2):
    """Random biases so no gradient path is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        if p.value.ndim == 1:
            p.value += rng.uniform(-scale, scale, p.shape)


def ragged_corpus(counts, seed=3):
    """Synthetic corpus whose day ``d`` keeps only ``counts[d % len(counts)]`` items."""
    from dataclasses import replace

    from finin.data import DailyNewsBundle

    base = generate_synthetic_corpus(40, max(counts), 0.9, seed)
    news = tuple(DailyNewsBundle(b.day, b.items[:counts[i % len(counts)]]) for i, b in enumerate(base.news))
    return replace(base, news=news)


ACCEPTANCE_LINES: list[str] = []


def record_verdict(number, ok, detail):
    """Log one acceptance line and fail the calling test if ``ok`` is false."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

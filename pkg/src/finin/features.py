"""Per-day model inputs, ragged news batching and data-access auditing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import AlignedDataset
from .embedding import EmbeddingCache, EmbeddingProvider
from .exceptions import EmptySplit, InsufficientHistory, MissingNextClose

N_BAR_FEATURES = 6
N_SENTIMENT = 3


class AccessAudit:
    """Records which trading days a computation read, tagged by phase."""

    def __init__(self):
        self.phase = "idle"
        self.touches: list[tuple[str, str, int]] = []

    def record(self, kind: str, day: int):
        self.touches.append((self.phase, kind, int(day)))

    def days(self, phase: str | None = None) -> set[int]:
        return {d for p, _, d in self.touches if phase is None or p == phase}

    def max_day(self, phase: str) -> int:
        days = self.days(phase)
        return max(days) if days else -1


class FeatureStore:
    """Lazily materialised arrays for each trading day of a dataset.

    Bar features are raw (the network standardises them). Volume is moved
    to log scale here. News embeddings are memoised through an
    :class:`EmbeddingCache` shared across training runs.
    """

    def __init__(self, dataset: AlignedDataset, provider: EmbeddingProvider,
                 cache: EmbeddingCache | None = None, audit: AccessAudit | None = None):
        self.dataset = dataset
        self.provider = provider
        self.cache = cache if cache is not None else EmbeddingCache()
        self.audit = audit
        self._closes = np.array([b.close for b in dataset.bars])
        self._bars: dict[int, np.ndarray] = {}
        self._news: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._market = None

    def __len__(self):
        return len(self.dataset)

    def _touch(self, kind, day):
        if self.audit is not None:
            self.audit.record(kind, day)

    @property
    def text_dim(self) -> int:
        return self.provider.dim

    def market_embedding(self) -> np.ndarray:
        if self._market is None:
            self._market = self.cache.market(self.provider, self.dataset.market_text)
        return self._market

    def bar(self, day: int) -> np.ndarray:
        self._touch("bar", day)
        if day not in self._bars:
            f = self.dataset.bars[day].features()
            f[5] = np.log1p(f[5])
            self._bars[day] = f
        return self._bars[day]

    def bars(self, days: Sequence[int]) -> np.ndarray:
        if len(days) == 0:
            return np.zeros((0, N_BAR_FEATURES))
        return np.stack([self.bar(d) for d in days])

    def news(self, day: int) -> tuple[np.ndarray, np.ndarray]:
        """(embeddings [N_d, E], sentiments [N_d, 3]) for one day."""
        self._touch("news", day)
        if day not in self._news:
            items = self.dataset.news[day].items
            if items:
                emb = np.stack([self.cache.news(self.provider, it) for it in items])
                sent = np.array([it.sentiment for it in items])
            else:
                emb = np.zeros((0, self.text_dim))
                sent = np.zeros((0, N_SENTIMENT))
            self._news[day] = (emb, sent)
        return self._news[day]

    def n_news(self, day: int) -> int:
        self._touch("news", day)
        return len(self.dataset.news[day].items)

    def label(self, day: int) -> int:
        if day + 1 >= len(self._closes):
            raise MissingNextClose(f"day {day} has no next-day close")
        self._touch("label", day)
        self._touch("close", day + 1)
        return int(self._closes[day + 1] > self._closes[day])

    def next_return(self, day: int) -> float:
        if day + 1 >= len(self._closes):
            raise MissingNextClose(f"day {day} has no next-day close")
        self._touch("close", day)
        self._touch("close", day + 1)
        return float((self._closes[day + 1] - self._closes[day]) / self._closes[day])


@dataclass
class DayBatch:
    """Padded inputs for a set of target days.

    ``days`` lists every distinct trading day needed by the targets' history
    windows; ``index[b]`` gives, oldest first, the rows of ``days`` forming
    target ``b``'s window. ``mask[u, i]`` is False on padding. Days without
    news have a single valid slot flagged in ``placeholder``.
    """

    targets: np.ndarray
    days: np.ndarray
    index: np.ndarray
    market_emb: np.ndarray
    bars: np.ndarray
    news_emb: np.ndarray | None
    sentiment: np.ndarray | None
    mask: np.ndarray | None
    placeholder: np.ndarray | None
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.targets)

    @property
    def n_news(self) -> np.ndarray:
        return self.mask.sum(axis=1) if self.mask is not None else None


def batch_days(targets: Sequence[int], store: FeatureStore, t: int, *, with_news: bool = True,
               with_labels: bool = True, min_day: int = 0, pad_to: int | None = None) -> DayBatch:
    """Assemble a padded batch for ``targets`` with ``t``-day history windows.

    News lists are padded to the largest count in the batch (or ``pad_to``
    when larger). Raises InsufficientHistory if a window would start before
    ``min_day``.
    """
    targets = np.asarray(targets, dtype=int)
    if targets.size == 0:
        raise EmptySplit("no target days to batch")
    if (targets - t + 1 < min_day).any():
        bad = int(targets[targets - t + 1 < min_day][0])
        raise InsufficientHistory(f"day {bad} lacks {t - 1} prior days at or after day {min_day}")
    if (targets >= len(store)).any():
        raise InsufficientHistory("target day beyond the end of the dataset")
    windows = targets[:, None] + np.arange(-t + 1, 1)[None, :]
    days = np.unique(windows)
    index = np.searchsorted(days, windows)

    bars = store.bars(days)
    news_emb = sentiment = mask = placeholder = None
    if with_news:
        per_day = [store.news(int(d)) for d in days]
        n_max = max(max(len(e) for e, _ in per_day), 1)
        if pad_to is not None:
            n_max = max(n_max, pad_to)
        u = len(days)
        news_emb = np.zeros((u, n_max, store.text_dim))
        sentiment = np.zeros((u, n_max, N_SENTIMENT))
        mask = np.zeros((u, n_max), dtype=bool)
        placeholder = np.zeros(u, dtype=bool)
        for row, (emb, sent) in enumerate(per_day):
            n = len(emb)
            if n == 0:
                placeholder[row] = True
                mask[row, 0] = True
            else:
                news_emb[row, :n] = emb
                sentiment[row, :n] = sent
                mask[row, :n] = True
    labels = None
    if with_labels:
        labels = np.array([store.label(int(d)) for d in targets], dtype=float)
    return DayBatch(targets, days, index, store.market_embedding(), bars, news_emb, sentiment,
                    mask, placeholder, labels)

"""Market bars, news items, calendar alignment and synthetic corpora."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import (
    ConstraintViolation,
    EmptyCalendar,
    InvalidParameter,
    NotATradingDay,
    IoFailure,
    MalformedRecord,
    MalformedRow,
    NonMonotonicDates,
    SentimentOutOfRange,
)

logger = logging.getLogger(__name__)

PRICE_COLUMNS = ("date", "open", "high", "low", "close", "adj_close", "volume")
BAR_FEATURES = ("open", "high", "low", "close", "adj_close", "volume")
SENTIMENT_TOL = 1e-3
SIGNAL_MARKER = "zqsignal"
NOISE_CONCENTRATION = 20.0


@dataclass(frozen=True)
class TradingDay:
    index: int
    date: dt.date


@dataclass(frozen=True)
class MarketBar:
    day: TradingDay
    open: float
    close: float
    adjusted_close: float
    high: float
    low: float
    volume: float

    def __post_init__(self):
        prices = (self.open, self.close, self.adjusted_close, self.high, self.low)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            raise ConstraintViolation(f"{self.day.date}: prices must be finite and positive")
        if not (math.isfinite(self.volume) and self.volume >= 0):
            raise ConstraintViolation(f"{self.day.date}: volume must be non-negative")
        if self.high < self.low:
            raise ConstraintViolation(f"{self.day.date}: high {self.high} < low {self.low}")
        if self.low > min(self.open, self.close) or max(self.open, self.close) > self.high:
            raise ConstraintViolation(f"{self.day.date}: open/close outside [low, high]")

    def features(self) -> np.ndarray:
        return np.array([self.open, self.high, self.low, self.close, self.adjusted_close, self.volume])


@dataclass(frozen=True)
class MarketText:
    description: str
    constituents: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.description.strip():
            raise MalformedRecord("market description must be non-empty")
        object.__setattr__(self, "constituents", tuple(self.constituents))

    @property
    def text(self) -> str:
        """Single text fed to the embedding provider."""
        if not self.constituents:
            return self.description
        return self.description + " " + " ".join(self.constituents)


def check_sentiment(sentiment, where: str = "") -> tuple[float, float, float]:
    try:
        s = tuple(float(v) for v in sentiment)
    except (TypeError, ValueError) as exc:
        raise MalformedRecord(f"{where}non-numeric sentiment {sentiment!r}") from exc
    if len(s) != 3:
        raise MalformedRecord(f"{where}sentiment must have 3 components")
    if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in s):
        raise SentimentOutOfRange(f"{where}sentiment component outside [0, 1]: {s}")
    if abs(sum(s) - 1.0) > SENTIMENT_TOL:
        raise SentimentOutOfRange(f"{where}sentiment sums to {sum(s):.6f}, not 1")
    return s


@dataclass(frozen=True)
class NewsItem:
    id: str
    timestamp: dt.datetime
    headline: str
    sentiment: tuple[float, float, float]

    def __post_init__(self):
        if not self.headline or not self.headline.strip():
            raise MalformedRecord(f"news {self.id}: empty headline")
        object.__setattr__(self, "sentiment", check_sentiment(self.sentiment, f"news {self.id}: "))

    @property
    def date(self) -> dt.date:
        return self.timestamp.date()


@dataclass(frozen=True)
class DailyNewsBundle:
    day: TradingDay
    items: tuple[NewsItem, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class AlignedDataset:
    """Bars and news on one trading calendar, with next-day direction labels.

    ``labels[d]`` is 1 when ``close[d+1] > close[d]`` and 0 otherwise (ties
    count as 0). There is no label for the final day.
    """

    bars: tuple[MarketBar, ...]
    market_text: MarketText
    news: tuple[DailyNewsBundle, ...]
    labels: tuple[int, ...] = field(init=False)
    dropped_news: int = 0
    signal_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(self.bars))
        object.__setattr__(self, "news", tuple(self.news))
        object.__setattr__(self, "signal_ids", tuple(self.signal_ids))
        if len(self.bars) != len(self.news):
            raise ConstraintViolation("bars and news bundles must align one per day")
        for i, (bar, bundle) in enumerate(zip(self.bars, self.news)):
            if bar.day.index != i or bundle.day != bar.day:
                raise ConstraintViolation(f"day {i}: misaligned bar/news")
            if any(item.date > bar.day.date for item in bundle.items):
                raise ConstraintViolation(f"day {i}: news item dated after its trading day")
        closes = [b.close for b in self.bars]
        object.__setattr__(
            self, "labels", tuple(int(b > a) for a, b in zip(closes, closes[1:]))
        )

    def __len__(self):
        return len(self.bars)

    @property
    def dates(self) -> list[dt.date]:
        return [b.day.date for b in self.bars]

    @property
    def closes(self) -> np.ndarray:
        return np.array([b.close for b in self.bars])

    def day_of(self, date: dt.date) -> int:
        """Trading-day index for ``date``; otherwise NotATradingDay naming the neighbours."""
        dates = self.dates
        i = bisect_left(dates, date)
        if i < len(dates) and dates[i] == date:
            return i
        before = dates[i - 1].isoformat() if i > 0 else None
        after = dates[i].isoformat() if i < len(dates) else None
        raise NotATradingDay(f"{date.isoformat()} is not a trading day (previous: {before}, next: {after})")


# ---------------------------------------------------------------------------
# loaders
# ---------------------------------------------------------------------------

def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except (AttributeError, ValueError) as exc:
        raise MalformedRow(f"{where}: bad date {text!r}") from exc


def load_prices(path) -> list[MarketBar]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoFailure(f"cannot open price file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = set(PRICE_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise MalformedRow(f"{path}: missing columns {sorted(missing)}")
        bars = []
        prev = None
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            date = _parse_date(row["date"], where)
            if prev is not None and date <= prev:
                raise NonMonotonicDates(f"{where}: {date} does not follow {prev}")
            prev = date
            try:
                vals = {k: float(row[k]) for k in PRICE_COLUMNS[1:]}
            except (TypeError, ValueError) as exc:
                raise MalformedRow(f"{where}: non-numeric field") from exc
            bars.append(MarketBar(
                day=TradingDay(len(bars), date),
                open=vals["open"], close=vals["close"], adjusted_close=vals["adj_close"],
                high=vals["high"], low=vals["low"], volume=vals["volume"],
            ))
    return bars


def _parse_timestamp(text, where):
    if not isinstance(text, str):
        raise MalformedRecord(f"{where}: timestamp must be a string")
    try:
        ts = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise MalformedRecord(f"{where}: bad timestamp {text!r}") from exc
    if ts.tzinfo is not None:
        ts = ts.astimezone(dt.timezone.utc).replace(tzinfo=None)
    return ts


def load_news(path) -> dict[dt.date, list[NewsItem]]:
    """Group news records by the calendar date of their UTC timestamp."""
    out: dict[dt.date, list[NewsItem]] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise IoFailure(f"cannot open news file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                item_id = rec["id"]
                headline = rec["headline"]
                sentiment = (rec["sent_pos"], rec["sent_neu"], rec["sent_neg"])
                ts = rec["timestamp"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MalformedRecord(f"{where}: {exc}") from exc
            if not isinstance(headline, str) or not isinstance(item_id, str):
                raise MalformedRecord(f"{where}: id and headline must be strings")
            item = NewsItem(str(item_id), _parse_timestamp(ts, where), headline, sentiment)
            out.setdefault(item.date, []).append(item)
    return out


def load_market_text(path) -> MarketText:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoFailure(f"cannot open market text {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"{path}: {exc}") from exc
    if not isinstance(obj.get("description"), str) or not isinstance(obj.get("constituents", []), list):
        raise MalformedRecord(f"{path}: needs a description string and a constituents list")
    return MarketText(obj["description"], tuple(str(c) for c in obj.get("constituents", [])))


def align(bars: Sequence[MarketBar], raw_news: Mapping[dt.date, Sequence[NewsItem]],
          market_text: MarketText, signal_ids: Sequence[str] = ()) -> AlignedDataset:
    """Put news onto the trading calendar.

    Each item goes to the first trading day on or after its calendar date, so
    weekend and holiday news rolls forward. News after the final trading day
    is dropped and counted in ``dropped_news``.
    """
    if not bars:
        raise EmptyCalendar("no trading days to align onto")
    dates = [b.day.date for b in bars]
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            raise NonMonotonicDates(f"{b} does not follow {a}")
    days = [TradingDay(i, d) for i, d in enumerate(dates)]
    bars = [b if b.day == days[i] else MarketBar(days[i], b.open, b.close, b.adjusted_close,
                                                  b.high, b.low, b.volume)
            for i, b in enumerate(bars)]
    buckets: list[list[NewsItem]] = [[] for _ in bars]
    dropped = 0
    for date in sorted(raw_news):
        i = bisect_left(dates, date)
        if i == len(dates):
            dropped += len(raw_news[date])
            continue
        buckets[i].extend(raw_news[date])
    if dropped:
        logger.warning("dropped %d news items dated after the last trading day", dropped)
    news = [DailyNewsBundle(days[i], tuple(items)) for i, items in enumerate(buckets)]
    return AlignedDataset(tuple(bars), market_text, tuple(news), dropped_news=dropped,
                          signal_ids=tuple(signal_ids))


def load_dataset(prices, news, market_text, signals=None) -> AlignedDataset:
    signal_ids = ()
    if signals is not None and Path(signals).exists():
        signal_ids = tuple(Path(signals).read_text().split())
    return align(load_prices(prices), load_news(news), load_market_text(market_text), signal_ids)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_prices(path, bars: Sequence[MarketBar]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_COLUMNS)
        for b in bars:
            w.writerow([b.day.date.isoformat(), repr(b.open), repr(b.high), repr(b.low),
                        repr(b.close), repr(b.adjusted_close), repr(b.volume)])


def write_news(path, bundles: Sequence[DailyNewsBundle]):
    with open(path, "w") as fh:
        for bundle in bundles:
            for item in bundle.items:
                rec = {
                    "id": item.id,
                    "timestamp": item.timestamp.isoformat() + "Z",
                    "headline": item.headline,
                    "sent_pos": item.sentiment[0],
                    "sent_neu": item.sentiment[1],
                    "sent_neg": item.sentiment[2],
                }
                fh.write(json.dumps(rec) + "\n")


def write_market_text(path, market_text: MarketText):
    with open(path, "w") as fh:
        json.dump({"description": market_text.description,
                   "constituents": list(market_text.constituents)}, fh, indent=2)
        fh.write("\n")


DATASET_FILES = {
    "prices": "prices.csv",
    "news": "news.jsonl",
    "market_text": "market.json",
    "signals": "signals.txt",
}


def save_dataset(dataset: AlignedDataset, directory) -> dict[str, Path]:
    """Write the four dataset files into ``directory``; returns their paths."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = {k: directory / v for k, v in DATASET_FILES.items()}
        write_prices(paths["prices"], dataset.bars)
        write_news(paths["news"], dataset.news)
        write_market_text(paths["market_text"], dataset.market_text)
        paths["signals"].write_text("".join(s + "\n" for s in dataset.signal_ids))
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {directory}: {exc}") from exc
    return paths


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_SYLLABLES = ("ka", "lo", "mi", "ta", "re", "vo", "shi", "nu", "pe", "dra", "gor", "fen",
              "bal", "cor", "tin", "ux", "wel", "yor", "zan", "qui")


def _vocabulary(rng: np.random.Generator, size: int) -> list[str]:
    words = set()
    while len(words) < size:
        n = rng.integers(2, 4)
        words.add("".join(_SYLLABLES[j] for j in rng.integers(0, len(_SYLLABLES), size=n)))
    return sorted(words)


def _business_days(start: dt.date, n: int) -> list[dt.date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def generate_synthetic_corpus(n_days: int, news_per_day: int, signal_fidelity: float,
                              seed: int) -> AlignedDataset:
    """Planted-signal corpus.

    Every day carries one signal headline containing :data:`SIGNAL_MARKER`
    whose sentiment leans towards the next-day direction with probability
    ``signal_fidelity`` (and the opposite way otherwise). The other items
    are noise: random headlines with near-uniform Dirichlet(20, 20, 20)
    sentiment. Closes follow a multiplicative walk whose step sign is the
    day's direction.
    Ids of the signal items are stored in ``signal_ids``.
    """
    if n_days < 3:
        raise InvalidParameter(f"n_days must be >= 3, got {n_days}")
    if news_per_day < 1:
        raise InvalidParameter(f"news_per_day must be >= 1, got {news_per_day}")
    if not 0.5 <= signal_fidelity <= 1.0:
        raise InvalidParameter(f"signal_fidelity must lie in [0.5, 1], got {signal_fidelity}")

    rng = np.random.default_rng(seed)
    vocab = _vocabulary(rng, 400)
    dates = _business_days(dt.date(2000, 1, 3), n_days)
    direction = rng.integers(0, 2, size=n_days) * 2 - 1
    honest = rng.random(n_days) < signal_fidelity

    close = np.empty(n_days)
    close[0] = 100.0
    for d in range(n_days - 1):
        step = max(abs(rng.normal(0.0, 0.01)), 1e-4)
        close[d + 1] = close[d] * (1.0 + direction[d] * step)

    bars, bundles, signal_ids = [], [], []
    for d in range(n_days):
        day = TradingDay(d, dates[d])
        prev_close = close[d - 1] if d else close[0] * (1.0 - direction[0] * 0.001)
        op = prev_close * (1.0 + rng.normal(0.0, 0.002))
        hi = max(op, close[d]) * (1.0 + abs(rng.normal(0.0, 0.003)))
        lo = min(op, close[d]) * (1.0 - abs(rng.normal(0.0, 0.003)))
        vol = float(np.round(rng.lognormal(14.0, 0.3)))
        bars.append(MarketBar(day, float(op), float(close[d]), float(close[d]), float(hi),
                              float(lo), vol))

        slot = int(rng.integers(0, news_per_day))
        items = []
        for j in range(news_per_day):
            minute = int(rng.integers(0, 24 * 60))
            ts = dt.datetime.combine(dates[d], dt.time(minute // 60, minute % 60))
            words = [vocab[k] for k in rng.integers(0, len(vocab), size=int(rng.integers(4, 9)))]
            item_id = f"n{d:05d}-{j:03d}"
            if j == slot:
                s = float(rng.uniform(0.6, 0.9))
                eps = float(rng.uniform(0.01, 0.05))
                up = (direction[d] > 0) == bool(honest[d])
                sentiment = (s, 1.0 - s - eps, eps) if up else (eps, 1.0 - s - eps, s)
                words.insert(int(rng.integers(0, len(words) + 1)), SIGNAL_MARKER)
                signal_ids.append(item_id)
            else:
                sentiment = tuple(float(v) for v in rng.dirichlet((NOISE_CONCENTRATION,) * 3))
            items.append(NewsItem(item_id, ts, " ".join(words), sentiment))
        bundles.append(DailyNewsBundle(day, tuple(items)))

    market_text = MarketText(
        "synthetic broad market index of large capitalisation companies",
        tuple(f"{vocab[k]} corp" for k in range(5)),
    )
    return AlignedDataset(tuple(bars), market_text, tuple(bundles), signal_ids=tuple(signal_ids))


def signal_positions(dataset: AlignedDataset) -> list[int | None]:
    """Within-bundle position of each day's signal item (None if absent)."""
    ids = set(dataset.signal_ids)
    out = []
    for bundle in dataset.news:
        pos = [i for i, item in enumerate(bundle.items) if item.id in ids]
        out.append(pos[0] if pos else None)
    return out


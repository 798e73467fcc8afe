"""Accuracy, cumulative PnL and Sharpe ratio over per-day prediction records."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import DegenerateVariance, EmptyInput, MalformedRow, MissingNextClose, TooFewDays

RISK_FREE = 0.02
RECORD_COLUMNS = ("day", "date", "decision", "label", "flag", "return")


@dataclass(frozen=True)
class DayRecord:
    day: int
    decision: int
    label: int
    ret: float
    date: dt.date | None = None

    @property
    def flag(self) -> int:
        return 1 if self.decision == self.label else -1

    @property
    def strategy_return(self) -> float:
        # a correct call earns the move's size, a wrong one loses it; for a
        # long/short position this equals position * ret
        return self.flag * abs(self.ret)


def make_records(days: Sequence[int], decisions: Sequence[int], closes, dates=None) -> list[DayRecord]:
    """Build records from decisions and the close series (needs close[d+1])."""
    closes = np.asarray(closes, dtype=float)
    out = []
    for d, dec in zip(days, decisions):
        d = int(d)
        if d + 1 >= len(closes):
            raise MissingNextClose(f"day {d} needs the close of day {d + 1}")
        ret = (closes[d + 1] - closes[d]) / closes[d]
        label = int(closes[d + 1] > closes[d])
        out.append(DayRecord(d, int(dec), label, float(ret), dates[d] if dates is not None else None))
    return out


def _strategy_returns(records) -> np.ndarray:
    return np.array([r.strategy_return for r in records], dtype=float)


def accuracy(records: Sequence[DayRecord]) -> float:
    if len(records) == 0:
        raise EmptyInput("accuracy of an empty record set")
    return sum(r.decision == r.label for r in records) / len(records)


def pnl(records: Sequence[DayRecord]) -> float:
    """Sum over days of flag * |simple next-day return|."""
    return float(_strategy_returns(records).sum())


def sharpe(records: Sequence[DayRecord], risk_free: float = RISK_FREE) -> float:
    """(mean strategy return - risk_free) / sample std of strategy returns.

    ``risk_free`` is subtracted from the mean daily return as is, without
    any annualisation.
    """
    r = _strategy_returns(records)
    if len(r) < 2:
        raise TooFewDays(f"Sharpe ratio needs at least 2 days, got {len(r)}")
    if np.all(r == r[0]):
        raise DegenerateVariance("strategy returns have zero variance")
    return float((r.mean() - risk_free) / r.std(ddof=1))


@dataclass
class MetricsReport:
    n_days: int
    accuracy: float
    pnl: float
    sharpe: float
    records: list[DayRecord] = field(default_factory=list, repr=False)

    @classmethod
    def from_records(cls, records: Sequence[DayRecord], risk_free: float = RISK_FREE) -> "MetricsReport":
        try:
            sr = sharpe(records, risk_free)
        except (DegenerateVariance, TooFewDays):
            sr = float("nan")
        return cls(len(records), accuracy(records), pnl(records), sr, list(records))

    def as_row(self) -> dict:
        return {"n_days": self.n_days, "accuracy": self.accuracy, "pnl": self.pnl, "sharpe": self.sharpe}


def selection_key(report: MetricsReport) -> tuple[float, float]:
    """Sort key for model selection: Sharpe first, accuracy second; NaN ranks last."""
    sr = report.sharpe if np.isfinite(report.sharpe) else -np.inf
    return (sr, report.accuracy)


def epoch_key(report: MetricsReport) -> tuple[float, float]:
    """Sort key for picking a training epoch: accuracy first, Sharpe second.

    With the risk-free rate subtracted from daily returns, Sharpe is not
    monotone in accuracy (a perfect predictor can score below a mediocre
    one), so it only breaks ties here.
    """
    sr = report.sharpe if np.isfinite(report.sharpe) else -np.inf
    return (report.accuracy, sr)


def write_records(path, records: Sequence[DayRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.day, r.date.isoformat() if r.date else "", r.decision, r.label, r.flag, repr(r.ret)])


def read_records(path) -> list[DayRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(RECORD_COLUMNS) - set(reader.fieldnames):
            raise MalformedRow(f"{path}: expected columns {','.join(RECORD_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                date = dt.date.fromisoformat(row["date"]) if row["date"] else None
                rec = DayRecord(int(row["day"]), int(row["decision"]), int(row["label"]),
                                float(row["return"]), date)
            except ValueError as exc:
                raise MalformedRow(f"{path}:{lineno}: {exc}") from exc
            if rec.flag != int(row["flag"]):
                raise MalformedRow(f"{path}:{lineno}: flag inconsistent with decision/label")
            out.append(rec)
    return out

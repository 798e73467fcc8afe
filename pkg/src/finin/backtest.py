"""Sliding-window evaluation protocol, baselines and experiment runs."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AlignedDataset, signal_positions
from .embedding import EmbeddingCache, EmbeddingProvider
from .estimator import (
    AlwaysBuyClassifier,
    MLPPredictor,
    NewsFrequencyFeatures,
    SentimentIndicatorFeatures,
    checkpoint_config,
)
from .exceptions import ConfigError, InsufficientData
from .features import FeatureStore
from .metrics import DayRecord, MetricsReport, accuracy, pnl, sharpe, write_records
from .model import ABLATION_LABELS, FininNetwork, ModelConfig, normalized_weights
from .numerics import save_checkpoint
from .training import GridSpec, TrainConfig, evaluate, grid_search, train, train_targets

logger = logging.getLogger(__name__)

WINDOW_SPAN = 500
WINDOW_STRIDE = 391
N_WINDOWS = 10
SPLIT = (400, 50, 50)
BASELINES = ("always_buy", "naf", "sentiment_indicator")
BASELINE_LABELS = {"always_buy": "Always-Buy", "naf": "NAF", "sentiment_indicator": "Sentiments"}
REPORT_COLUMNS = ("model", "window", "n_days", "accuracy", "pnl", "sharpe")

__all__ = ["accuracy", "pnl", "sharpe", "make_windows", "run_baseline", "run_experiment", "WindowSplit"]


@dataclass(frozen=True)
class WindowSplit:
    window_id: int
    start_day: int
    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]


def make_windows(total_days: int, n_windows: int = N_WINDOWS, span: int = WINDOW_SPAN,
                 stride: int = WINDOW_STRIDE, split: Sequence[int] = SPLIT) -> list[WindowSplit]:
    """Chronological windows of ``span`` days every ``stride`` days.

    A window is kept only if the day after it exists, since the last test
    day's label needs the next close. Fewer than ``n_windows`` windows are
    returned, with a warning, when the data runs out.
    """
    if sum(split) != span:
        raise ConfigError(f"split {split} does not add up to span {span}")
    if total_days < span + 1:
        raise InsufficientData(f"{total_days} days cannot hold one {span}-day window plus a label day")
    out = []
    for k in range(n_windows):
        start = k * stride
        if start + span + 1 > total_days:
            break
        a = start + split[0]
        b = a + split[1]
        out.append(WindowSplit(k, start, (start, a), (a, b), (b, start + span)))
    if len(out) < n_windows:
        logger.warning("only %d of %d windows fit in %d days", len(out), n_windows, total_days)
    return out


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def run_baseline(kind: str, window: WindowSplit, store: FeatureStore, t: int,
                 train_config: TrainConfig | None = None, mlp_layers: int = 2,
                 mlp_hidden: int = 32, risk_free: float = 0.02) -> MetricsReport:
    """Metrics of a baseline strategy on the window's test range."""
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    test_days = np.arange(*window.test_range)
    dates = store.dataset.dates
    if kind == "always_buy":
        decisions = AlwaysBuyClassifier().fit(test_days).predict(test_days)
    else:
        tc = train_config or TrainConfig()
        feats_cls = NewsFrequencyFeatures if kind == "naf" else SentimentIndicatorFeatures
        train_days = train_targets(window.train_range, t)
        val_days = np.arange(*window.val_range)
        feats = feats_cls(store, t).fit(np.arange(*window.train_range)[t - 1:])
        y = np.array([store.label(int(d)) for d in train_days])
        model = MLPPredictor(mlp_layers, mlp_hidden, tc.epochs, tc.batch_size, tc.lr,
                             tc.early_stop_patience, tc.seed)
        val_returns = [store.next_return(int(d)) for d in val_days]
        model.fit(feats.transform(train_days), y, eval_set=(feats.transform(val_days), val_returns))
        decisions = model.predict(feats.transform(test_days))
    records = [DayRecord(int(d), int(dec), store.label(int(d)), store.next_return(int(d)), dates[int(d)])
               for d, dec in zip(test_days, decisions)]
    return MetricsReport.from_records(records, risk_free)


def planted_signal_hit_rate(net: FininNetwork, store: FeatureStore, days: Sequence[int]) -> float:
    """Share of ``days`` on which the planted signal item has the top normalised weight."""
    positions = signal_positions(store.dataset)
    hits = total = 0
    for d in days:
        pos = positions[int(d)]
        if pos is None:
            continue
        emb, sent = store.news(int(d))
        enc = net.encode_day(store.market_embedding(), store.bar(int(d)), emb, sent)
        w = normalized_weights(enc.raw_weights)
        hits += int(np.argmax(w) == pos)
        total += 1
    return hits / total if total else float("nan")


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    rows: list[dict] = field(default_factory=list)
    windows: list[WindowSplit] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    run_dir: Path | None = None
    extras: dict = field(default_factory=dict)

    def mean(self, model: str) -> dict:
        return next(r for r in self.rows if r["model"] == model and r["window"] == "mean")

    def per_window(self, model: str) -> list[dict]:
        return [r for r in self.rows if r["model"] == model and r["window"] != "mean"]

    def format_table(self) -> str:
        lines = [f"{'model':<16}{'Acc':>8}{'PnL':>10}{'SR':>9}"]
        for r in self.rows:
            if r["window"] == "mean":
                lines.append(f"{r['model']:<16}{r['accuracy']:>8.3f}{r['pnl']:>10.4f}{r['sharpe']:>9.3f}")
        return "\n".join(lines)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])


def _mean_row(model, reports: list[MetricsReport]) -> dict:
    return {
        "model": model,
        "window": "mean",
        "n_days": int(sum(r.n_days for r in reports)),
        "accuracy": float(np.mean([r.accuracy for r in reports])),
        "pnl": float(np.mean([r.pnl for r in reports])),
        "sharpe": float(np.mean([r.sharpe for r in reports])),
    }


def run_experiment(dataset: AlignedDataset, provider: EmbeddingProvider, model_config: ModelConfig,
                   train_config: TrainConfig, *, grid: GridSpec | None = None,
                   ablations: Sequence[str] | None = None, baselines: Sequence[str] = (),
                   out_dir=None, run_name: str | None = None, n_windows: int = N_WINDOWS,
                   signal_rate: bool = False, risk_free: float = 0.02) -> ExperimentReport:
    """Train and test every requested variant on each sliding window.

    Per window: optional grid search on validation, training, test-range
    metrics. The report holds per-window rows plus an unweighted mean row
    per model. With ``out_dir`` every artefact lands under
    ``out_dir/run.<timestamp>/`` (or ``run_name``).
    """
    ablations = list(ablations or [model_config.ablation])
    if model_config.text_dim != provider.dim:
        raise ConfigError(f"text_dim {model_config.text_dim} != provider dim {provider.dim}")
    cache = EmbeddingCache()
    store = FeatureStore(dataset, provider, cache)
    windows = make_windows(len(dataset), n_windows)
    report = ExperimentReport(windows=windows)
    if len(windows) < n_windows:
        report.notes.append(
            f"reduced protocol: {len(windows)} of {n_windows} windows fit in {len(dataset)} days"
        )
    run_dir = None
    if out_dir is not None:
        name = run_name or "run." + dt.datetime.now().strftime("%Y%m%dT%H%M%S")
        run_dir = Path(out_dir) / name
        run_dir.mkdir(parents=True, exist_ok=True)
        report.run_dir = run_dir

    per_model: dict[str, list[MetricsReport]] = {}
    hit_rates: dict[str, list[float]] = {}
    single = len(ablations) == 1
    for win in windows:
        wdir = None
        if run_dir is not None:
            wdir = run_dir / f"window_{win.window_id}"
            wdir.mkdir(exist_ok=True)
        for ablation in ablations:
            label = ABLATION_LABELS[ablation]
            base = model_config.replace(ablation=ablation)
            vdir = None
            if wdir is not None:
                vdir = wdir if single else wdir / label
                vdir.mkdir(exist_ok=True)
            if grid is not None:
                cfg, rows, res = grid_search(grid, base, train_config, store, win.train_range,
                                             win.val_range,
                                             table_path=vdir / "grid.csv" if vdir else None)
            else:
                cfg = base
                res = train(cfg, train_config, store, win.train_range, win.val_range)
            net = res.network
            test = evaluate(net, store, np.arange(*win.test_range), min_day=win.train_range[0],
                            risk_free=risk_free)
            per_model.setdefault(label, []).append(test)
            report.rows.append({"model": label, "window": win.window_id, **test.as_row()})
            if signal_rate and ablation != "no_news" and ablation != "no_quantifier":
                rate = planted_signal_hit_rate(net, store, np.arange(*win.test_range))
                hit_rates.setdefault(label, []).append(rate)
            if vdir is not None:
                with open(vdir / "config.json", "w") as fh:
                    json.dump({"model": cfg.to_dict(), "train": asdict(train_config),
                               "window": asdict(win), "best_epoch": res.best_epoch,
                               "provider": provider.name}, fh, indent=2, sort_keys=True)
                    fh.write("\n")
                save_checkpoint(vdir / "checkpoint.bin", net.state_arrays(), checkpoint_config(net, store))
                write_records(vdir / "predictions.csv", test.records)
        for kind in baselines:
            label = BASELINE_LABELS[kind]
            rep = run_baseline(kind, win, store, model_config.window_len, train_config,
                               model_config.mlp_layers, model_config.mlp_hidden, risk_free)
            per_model.setdefault(label, []).append(rep)
            report.rows.append({"model": label, "window": win.window_id, **rep.as_row()})
            if wdir is not None:
                write_records(wdir / f"predictions_{kind}.csv", rep.records)
    for label, reps in per_model.items():
        report.rows.append(_mean_row(label, reps))
    report.rows.sort(key=lambda r: (list(per_model).index(r["model"]),
                                    r["window"] == "mean", str(r["window"]).zfill(3)))
    report.extras["signal_hit_rate"] = {k: float(np.mean(v)) for k, v in hit_rates.items()}
    report.extras["signal_hit_rates"] = hit_rates
    if run_dir is not None:
        write_report(run_dir / "report.csv", report.rows)
        with open(run_dir / "run.json", "w") as fh:
            json.dump({"windows": [asdict(w) for w in windows], "notes": report.notes,
                       "ablations": ablations, "baselines": list(baselines),
                       "grid": asdict(grid) if grid is not None else None,
                       "signal_hit_rate": report.extras["signal_hit_rate"]},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    for note in report.notes:
        logger.warning(note)
    return report

"""Training loop, validation-based checkpoint selection and grid search."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, EmptySplit, InsufficientHistory, NumericError
from .features import FeatureStore, batch_days
from .metrics import DayRecord, MetricsReport, epoch_key, selection_key
from .model import ATTN_DIMS, MLP_HIDDEN, MLP_LAYERS, N_HEADS, FininNetwork, ModelConfig
from .numerics import Adam, logistic_loss, sigmoid

logger = logging.getLogger(__name__)

GRID_FIELDS = ("mlp_layers", "mlp_hidden", "n_heads", "attn_dim")
GRID_COLUMNS = GRID_FIELDS + ("val_accuracy", "val_pnl", "val_sharpe", "best_epoch")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass(frozen=True)
class GridSpec:
    mlp_layers: tuple[int, ...] = MLP_LAYERS
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN
    n_heads: tuple[int, ...] = N_HEADS
    attn_dim: tuple[int, ...] = ATTN_DIMS

    def __post_init__(self):
        allowed = dict(zip(GRID_FIELDS, (MLP_LAYERS, MLP_HIDDEN, N_HEADS, ATTN_DIMS)))
        for name in GRID_FIELDS:
            values = tuple(getattr(self, name))
            if not values or set(values) - set(allowed[name]):
                raise ConfigError(f"grid {name}={values} must be a non-empty subset of {allowed[name]}")
            object.__setattr__(self, name, tuple(sorted(set(values))))

    def points(self) -> list[dict]:
        return [dict(zip(GRID_FIELDS, combo))
                for combo in itertools.product(*(getattr(self, f) for f in GRID_FIELDS))]

    def __len__(self):
        return len(self.points())


@dataclass
class TrainResult:
    network: FininNetwork
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    val_report: MetricsReport | None = None


def train_targets(train_range: tuple[int, int], t: int) -> np.ndarray:
    """Training target days inside ``[start, stop)``.

    The first ``t - 1`` days only supply history. The last day is dropped
    because its label needs the close of the following (validation) day.
    """
    start, stop = train_range
    days = np.arange(start + t - 1, stop - 1)
    if days.size == 0:
        raise EmptySplit(f"training range {train_range} too short for window {t}")
    return days


def predict_logits(net: FininNetwork, store: FeatureStore, days: Sequence[int], *,
                   min_day: int = 0, batch_size: int = 64) -> np.ndarray:
    days = np.asarray(days, dtype=int)
    t = net.config.window_len
    with_news = net.config.ablation != "no_news"
    out = []
    for i in range(0, len(days), batch_size):
        batch = batch_days(days[i:i + batch_size], store, t, with_news=with_news,
                           with_labels=False, min_day=min_day)
        out.append(net.logits(batch))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(net: FininNetwork, store: FeatureStore, days: Sequence[int], *, min_day: int = 0,
             risk_free: float = 0.02) -> MetricsReport:
    """Metrics of the network's decisions on ``days`` (uses next-day closes)."""
    logits = predict_logits(net, store, days, min_day=min_day)
    decisions = (sigmoid(logits) > 0.5).astype(int)
    dates = store.dataset.dates
    records = [DayRecord(int(d), int(dec), store.label(int(d)), store.next_return(int(d)), dates[int(d)])
               for d, dec in zip(days, decisions)]
    return MetricsReport.from_records(records, risk_free)


def _set_phase(store, phase):
    if store.audit is not None:
        store.audit.phase = phase


def fit_network(net: FininNetwork, train_config: TrainConfig, store: FeatureStore,
                targets: Sequence[int], labels: Sequence[float], *, val_days: Sequence[int] | None = None,
                min_day: int = 0) -> TrainResult:
    """Minimise mean logistic loss over ``targets``.

    With ``val_days`` the parameters of the best validation epoch (accuracy,
    then Sharpe) are restored at the end and early stopping applies;
    without them the last epoch is kept.
    """
    t = net.config.window_len
    targets = np.asarray(targets, dtype=int)
    labels = np.asarray(labels, dtype=float)
    if targets.size == 0:
        raise EmptySplit("no training targets")
    with_news = net.config.ablation != "no_news"
    opt = Adam(net.parameters(), train_config.lr, train_config.betas, train_config.eps)
    rng = np.random.default_rng(train_config.seed)

    result = TrainResult(net)
    best_key, best_state, stale = None, None, 0
    for epoch in range(1, train_config.epochs + 1):
        _set_phase(store, "fit")
        order = rng.permutation(len(targets))
        total = 0.0
        for i in range(0, len(order), train_config.batch_size):
            chunk = order[i:i + train_config.batch_size]
            batch = batch_days(targets[chunk], store, t, with_news=with_news, with_labels=False,
                               min_day=min_day)
            logits, cache = net.forward(batch)
            loss, grad = logistic_loss(logits, labels[chunk])
            if not np.isfinite(loss).all():
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            net.backward(cache, grad / len(chunk))
            opt.step()
            total += float(loss.sum())
        entry = {"epoch": epoch, "train_loss": total / len(targets)}
        if val_days is not None:
            _set_phase(store, "validate")
            report = evaluate(net, store, val_days, min_day=min_day)
            entry.update(val_accuracy=report.accuracy, val_pnl=report.pnl, val_sharpe=report.sharpe)
            key = epoch_key(report)
            if best_key is None or key > best_key:
                best_key, best_state, stale = key, net.state_arrays(), 0
                result.best_epoch, result.val_report = epoch, report
            else:
                stale += 1
        result.history.append(entry)
        if val_days is not None and stale >= train_config.early_stop_patience:
            logger.debug("early stop at epoch %d", epoch)
            break
    if best_state is not None:
        net.load_state_arrays(best_state)
    else:
        result.best_epoch = len(result.history)
    _set_phase(store, "idle")
    return result


def train(model_config: ModelConfig, train_config: TrainConfig, store: FeatureStore,
          train_range: tuple[int, int], val_range: tuple[int, int]) -> TrainResult:
    """Fit on ``train_range`` and keep the epoch with the best validation score.

    Ranges are half-open day intervals. Validation windows may draw history
    from the training range but nothing earlier.
    """
    t = model_config.window_len
    if val_range[0] < train_range[1]:
        raise ConfigError(f"validation {val_range} must start after training {train_range}")
    if val_range[1] <= val_range[0]:
        raise EmptySplit(f"empty validation range {val_range}")
    if model_config.text_dim != store.text_dim:
        raise ConfigError(f"model text_dim {model_config.text_dim} != provider dim {store.text_dim}")
    if val_range[0] - t + 1 < train_range[0]:
        raise InsufficientHistory("validation windows reach before the training range")
    targets = train_targets(train_range, t)

    _set_phase(store, "fit")
    net = FininNetwork(model_config)
    net.fit_bar_stats(store.bars(range(*train_range)))
    labels = [store.label(int(d)) for d in targets]
    return fit_network(net, train_config, store, targets, labels,
                       val_days=np.arange(*val_range), min_day=train_range[0])


def derive_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1)[0])


def grid_search(grid: GridSpec, base: ModelConfig, train_config: TrainConfig, store: FeatureStore,
                train_range, val_range, table_path=None):
    """Train one model per grid point and pick the best by validation score.

    Ties on (Sharpe, accuracy) go to the lexicographically smallest
    (mlp_layers, mlp_hidden, n_heads, attn_dim). Returns ``(best_config,
    rows, best_result)``.
    """
    rows, best = [], None
    for i, point in enumerate(grid.points()):
        cfg = base.replace(**point, seed=derive_seed(base.seed, i))
        res = train(cfg, TrainConfig(**{**asdict(train_config), "seed": derive_seed(train_config.seed, i)}),
                    store, train_range, val_range)
        rep = res.val_report
        rows.append({**point, "val_accuracy": rep.accuracy, "val_pnl": rep.pnl,
                     "val_sharpe": rep.sharpe, "best_epoch": res.best_epoch})
        rank = (selection_key(rep), tuple(-point[f] for f in GRID_FIELDS))
        if best is None or rank > best[0]:
            best = (rank, cfg, res)
    if table_path is not None:
        write_grid_table(table_path, rows)
    return best[1], rows, best[2]


def write_grid_table(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

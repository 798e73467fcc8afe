"""scikit-learn compatible wrappers.

Estimators here take trading-day indices as ``X``: a 1-D integer array of
target days into the :class:`~finin.features.FeatureStore` given at
construction. That keeps ``get_params``/``set_params``/``clone`` and
pipelines working while the heavy per-day inputs stay in the store.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, EmptySplit, NumericError
from .features import FeatureStore
from .metrics import DayRecord, MetricsReport, epoch_key
from .model import FininNetwork, ModelConfig, explain_day
from .numerics import MLP, Adam, load_checkpoint, logistic_loss, save_checkpoint, sigmoid
from .training import TrainConfig, evaluate, fit_network, predict_logits


def check_days(X, store: FeatureStore | None = None) -> np.ndarray:
    """Validate an array of trading-day indices."""
    days = check_array(X, ensure_2d=False, dtype=None)
    days = np.asarray(days).reshape(-1)
    if days.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(days, 1), 0)):
            raise ValueError("day indices must be integers")
        days = days.astype(int)
    if store is not None and ((days < 0) | (days >= len(store))).any():
        raise ValueError(f"day indices must lie in [0, {len(store)})")
    return days.astype(int)


class FininClassifier(ClassifierMixin, BaseEstimator):
    """Next-day direction classifier built on the news-influence network.

    Parameters mirror :class:`~finin.model.ModelConfig` and
    :class:`~finin.training.TrainConfig`; ``random_state`` seeds both the
    initialisation and the batch order.
    """

    def __init__(self, store=None, window_len=3, fused_dim=16, mlp_layers=2, mlp_hidden=32,
                 n_heads=1, attn_dim=32, ablation="full", epochs=50, batch_size=16, lr=1e-3,
                 early_stop_patience=10, random_state=0):
        self.store = store
        self.window_len = window_len
        self.fused_dim = fused_dim
        self.mlp_layers = mlp_layers
        self.mlp_hidden = mlp_hidden
        self.n_heads = n_heads
        self.attn_dim = attn_dim
        self.ablation = ablation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        if self.store is None:
            raise ConfigError("FininClassifier needs a FeatureStore")
        return ModelConfig(
            window_len=self.window_len, text_dim=self.store.text_dim, fused_dim=self.fused_dim,
            mlp_layers=self.mlp_layers, mlp_hidden=self.mlp_hidden, n_heads=self.n_heads,
            attn_dim=self.attn_dim, ablation=self.ablation, seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           early_stop_patience=self.early_stop_patience, seed=self.random_state)

    def fit(self, X, y=None, eval_days=None, min_day=None):
        """Train on target days ``X``.

        ``y`` defaults to the dataset's labels. ``eval_days`` enables
        best-epoch restoration; ``min_day`` bounds how far back history
        windows and standardisation statistics may reach.
        """
        config = self._model_config()
        days = check_days(X, self.store)
        if days.size == 0:
            raise EmptySplit("no training days")
        if y is None:
            y = np.array([self.store.label(int(d)) for d in days])
        else:
            days, y = check_X_y(days.reshape(-1, 1), y)
            days = days.ravel()
        t = config.window_len
        lo = int(days.min()) - t + 1 if min_day is None else int(min_day)
        net = FininNetwork(config)
        net.fit_bar_stats(self.store.bars(range(max(lo, 0), int(days.max()) + 1)))
        val = None if eval_days is None else check_days(eval_days, self.store)
        result = fit_network(net, self._train_config(), self.store, days, y, val_days=val,
                             min_day=max(lo, 0))
        self.network_ = net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.min_day_ = max(lo, 0)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, self.store, check_days(X, self.store), min_day=0)

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)

    def evaluate(self, X, risk_free=0.02) -> MetricsReport:
        check_is_fitted(self, "network_")
        return evaluate(self.network_, self.store, check_days(X, self.store), min_day=0,
                        risk_free=risk_free)

    def explain(self, day: int):
        check_is_fitted(self, "network_")
        return explain_day(self.network_, self.store, int(day))

    def save(self, path):
        check_is_fitted(self, "network_")
        save_checkpoint(path, self.network_.state_arrays(), checkpoint_config(self.network_, self.store))

    @classmethod
    def load(cls, path, store):
        net = load_network(path, store)
        c = net.config
        clf = cls(store, window_len=c.window_len, fused_dim=c.fused_dim, mlp_layers=c.mlp_layers,
                  mlp_hidden=c.mlp_hidden, n_heads=c.n_heads, attn_dim=c.attn_dim,
                  ablation=c.ablation, random_state=c.seed)
        clf.network_, clf.classes_, clf.history_, clf.min_day_ = net, np.array([0, 1]), [], 0
        return clf


def checkpoint_config(net: FininNetwork, store=None) -> dict:
    cfg = {"kind": "finin", "model": net.config.to_dict()}
    if store is not None:
        cfg["provider"] = store.provider.name
    return cfg


def load_network(path, store=None) -> FininNetwork:
    from .exceptions import CheckpointMismatch

    cfg, arrays = load_checkpoint(path)
    if cfg.get("kind") != "finin":
        raise CheckpointMismatch(f"{path} is not a network checkpoint")
    if store is not None and cfg.get("provider") not in (None, store.provider.name):
        raise CheckpointMismatch(
            f"{path} was trained with provider {cfg['provider']}, not {store.provider.name}"
        )
    net = FininNetwork(ModelConfig(**cfg["model"]))
    try:
        net.load_state_arrays(arrays)
    except Exception as exc:
        raise CheckpointMismatch(f"{path}: {exc}") from exc
    return net


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

class AlwaysBuyClassifier(ClassifierMixin, BaseEstimator):
    """Predicts a rise every day."""

    def fit(self, X, y=None):
        self.classes_ = np.array([0, 1])
        return self

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return np.ones(len(np.asarray(X).reshape(len(X), -1)), dtype=int)


class _DayFeatures(TransformerMixin, BaseEstimator):
    """Stacks per-day features over a ``window_len``-day history, oldest first.

    Bar features are standardised with statistics from the fitted days.
    """

    def __init__(self, store=None, window_len=1):
        self.store = store
        self.window_len = window_len

    def _news_features(self, day: int) -> np.ndarray:
        raise NotImplementedError

    def _fit_news(self, days):
        pass

    def fit(self, X, y=None):
        days = check_days(X, self.store)
        span = range(max(int(days.min()) - self.window_len + 1, 0), int(days.max()) + 1)
        bars = self.store.bars(span)
        self.bar_mean_ = bars.mean(axis=0)
        std = bars.std(axis=0)
        self.bar_scale_ = np.where(std > 0, std, 1.0)
        self._fit_news(span)
        return self

    def transform(self, X):
        check_is_fitted(self, "bar_mean_")
        days = check_days(X, self.store)
        rows = []
        for d in days:
            window = range(int(d) - self.window_len + 1, int(d) + 1)
            parts = [self._news_features(w) for w in window]
            parts += [(self.store.bar(w) - self.bar_mean_) / self.bar_scale_ for w in window]
            rows.append(np.concatenate(parts))
        return np.array(rows)


class NewsFrequencyFeatures(_DayFeatures):
    """Daily news count, raw and z-scored against the fitted days."""

    def _fit_news(self, days):
        counts = np.array([self.store.n_news(d) for d in days], dtype=float)
        self.count_mean_ = counts.mean()
        self.count_scale_ = counts.std() or 1.0

    def _news_features(self, day):
        n = float(self.store.n_news(day))
        return np.array([n, (n - self.count_mean_) / self.count_scale_])


class SentimentIndicatorFeatures(_DayFeatures):
    """Mean (positive - negative) sentiment of the day's items and their count."""

    def _news_features(self, day):
        _, sent = self.store.news(day)
        if len(sent) == 0:
            return np.array([0.0, 0.0])
        return np.array([float(np.mean(sent[:, 0] - sent[:, 2])), float(len(sent))])


class MLPPredictor(ClassifierMixin, BaseEstimator):
    """The network's predictor head trained standalone on a feature matrix."""

    def __init__(self, mlp_layers=2, mlp_hidden=32, epochs=50, batch_size=16, lr=1e-3,
                 early_stop_patience=10, random_state=0):
        self.mlp_layers = mlp_layers
        self.mlp_hidden = mlp_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        """``eval_set=(X_val, returns_val)`` selects the best epoch by validation accuracy."""
        X, y = check_X_y(X, y, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        dims = [X.shape[1]] + [self.mlp_hidden] * (self.mlp_layers - 1) + [1]
        self.mlp_ = MLP(dims, "predictor", rng)
        params = self.mlp_.parameters()
        opt = Adam(params, self.lr)
        best, best_state, stale = None, None, 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            for i in range(0, len(order), self.batch_size):
                idx = order[i:i + self.batch_size]
                out, cache = self.mlp_.forward(X[idx])
                loss, grad = logistic_loss(out[:, 0], y[idx])
                if not np.isfinite(loss).all():
                    raise NumericError("non-finite loss in MLPPredictor")
                self.mlp_.backward(cache, grad[:, None] / len(idx))
                opt.step()
            if eval_set is not None:
                Xv, rv = eval_set
                dec = self._decide(np.asarray(Xv, dtype=float))
                rv = np.asarray(rv, dtype=float)
                records = [DayRecord(i, int(d), int(r > 0), float(r)) for i, (d, r) in enumerate(zip(dec, rv))]
                key = epoch_key(MetricsReport.from_records(records))
                if best is None or key > best:
                    best, best_state, stale = key, [p.value.copy() for p in params], 0
                else:
                    stale += 1
                    if stale >= self.early_stop_patience:
                        break
        if best_state is not None:
            for p, v in zip(params, best_state):
                p.value[...] = v
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def _decide(self, X):
        return (self.mlp_.forward(X)[0][:, 0] > 0).astype(int)

    def decision_function(self, X):
        check_is_fitted(self, "mlp_")
        X = check_array(X, dtype=np.float64)
        return self.mlp_.forward(X)[0][:, 0]

    def predict_proba(self, X):
        p = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)

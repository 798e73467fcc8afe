"""News-influence market direction prediction.

A frozen text encoder and numeric features feed per-unit fusion encoders;
a two-stage attention quantifier weighs each day's news against the
market encoding, and an MLP predicts the next-day close direction.
"""

from .backtest import make_windows, run_baseline, run_experiment
from .data import AlignedDataset, generate_synthetic_corpus, load_dataset, save_dataset
from .embedding import HashingProvider, PrecomputedProvider, hashing_provider, precomputed_provider
from .estimator import FininClassifier
from .exceptions import ConfigError, DataError, FininError, IoFailure, NumericError
from .features import FeatureStore, batch_days
from .metrics import accuracy, pnl, sharpe
from .model import FininNetwork, ModelConfig, explain_day, normalized_weights
from .training import GridSpec, TrainConfig, grid_search, train

__version__ = "0.1.0"

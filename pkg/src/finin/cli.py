"""Command-line entry point: ``finin {synth,backtest,train,explain,metrics}``.

Configuration comes from an optional TOML file overridden by flags. Errors
exit with 1 (config), 2 (data), 3 (numeric) or 4 (I/O).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backtest import BASELINES, N_WINDOWS, make_windows, run_experiment
from .data import DATASET_FILES, generate_synthetic_corpus, load_dataset, save_dataset
from .embedding import EmbeddingCache, HashingProvider, precomputed_provider
from .estimator import checkpoint_config, load_network
from .exceptions import ConfigError, FininError, IoFailure
from .features import FeatureStore
from .metrics import RISK_FREE, MetricsReport, read_records, write_records
from .model import ABLATIONS, ModelConfig, explain_day
from .numerics import load_checkpoint, save_checkpoint
from .training import GridSpec, TrainConfig, evaluate, train

logger = logging.getLogger("finin")

OUTPUT_ROOT_ENV = "FININ_OUTPUT_ROOT"
_MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))
_TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))


@dataclass
class RunConfig:
    """Everything a backtest or training run needs, validated up front."""

    prices: Path | None = None
    news: Path | None = None
    market_text: Path | None = None
    signals: Path | None = None
    provider: str = "hashing"
    embedding_dim: int = 64
    embedding_seed: int = 0
    embeddings: Path | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: bool = False
    grid_values: dict = field(default_factory=dict)
    ablations: list = field(default_factory=list)
    baselines: list = field(default_factory=list)
    n_windows: int = N_WINDOWS
    out_dir: Path | None = None
    run_name: str | None = None
    seed: int = 0

    def validate(self):
        for name in ("prices", "news", "market_text"):
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"missing {name} path")
            if not Path(path).exists():
                raise ConfigError(f"{name} path {path} does not exist")
        if self.provider not in ("hashing", "precomputed"):
            raise ConfigError(f"provider must be 'hashing' or 'precomputed', got {self.provider!r}")
        if self.provider == "precomputed" and (self.embeddings is None or not Path(self.embeddings).exists()):
            raise ConfigError("precomputed provider needs an existing embeddings path")
        if self.grid_values and not self.grid:
            raise ConfigError("grid values given but grid search is off")
        grid_keys = set(self.grid_values)
        if self.grid and grid_keys & set(self.model):
            raise ConfigError(f"grid search and fixed values both set for {sorted(grid_keys & set(self.model))}")
        unknown = set(self.model) - set(_MODEL_FIELDS)
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}")
        unknown = set(self.train) - set(_TRAIN_FIELDS)
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
        for b in self.baselines:
            if b not in BASELINES:
                raise ConfigError(f"unknown baseline {b!r}; choose from {BASELINES}")
        if self.n_windows < 1:
            raise ConfigError(f"n_windows must be >= 1, got {self.n_windows}")
        # building the configs runs their own checks before any data is read
        self.model_config()
        self.train_config()
        self.grid_spec()
        return self

    def model_config(self) -> ModelConfig:
        values = {"seed": self.seed, **self.model}
        values["text_dim"] = self.embedding_dim
        values.setdefault("ablation", self.ablations[0] if self.ablations else "full")
        return ModelConfig(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def grid_spec(self) -> GridSpec | None:
        return GridSpec(**{k: tuple(v) for k, v in self.grid_values.items()}) if self.grid else None

    def make_provider(self):
        if self.provider == "hashing":
            return HashingProvider(self.embedding_dim, self.embedding_seed)
        provider = precomputed_provider(self.embeddings)
        if provider.dim != self.embedding_dim:
            self.embedding_dim = provider.dim
        return provider


def _resolve(base: Path, value):
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def read_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_run_config(args) -> RunConfig:
    """Merge the TOML file (if any) with command-line flags; flags win."""
    cfg = RunConfig()
    raw, base = {}, Path.cwd()
    if getattr(args, "config", None):
        raw = read_config_file(args.config)
        base = Path(args.config).resolve().parent
    data = raw.get("data", {})
    if "dir" in data:
        d = _resolve(base, data["dir"])
        for key, name in DATASET_FILES.items():
            setattr(cfg, key, d / name)
    for key in ("prices", "news", "market_text", "signals"):
        if key in data:
            setattr(cfg, key, _resolve(base, data[key]))
    emb = raw.get("embedding", {})
    cfg.provider = emb.get("provider", cfg.provider)
    cfg.embedding_dim = int(emb.get("dim", cfg.embedding_dim))
    cfg.embedding_seed = int(emb.get("seed", cfg.embedding_seed))
    cfg.embeddings = _resolve(base, emb.get("path"))
    cfg.model = dict(raw.get("model", {}))
    cfg.train = dict(raw.get("train", {}))
    if "betas" in cfg.train:
        cfg.train["betas"] = tuple(cfg.train["betas"])
    grid = raw.get("grid", {})
    cfg.grid = bool(grid.get("enabled", False))
    cfg.grid_values = {k: v for k, v in grid.items() if k != "enabled"}
    run = raw.get("run", {})
    cfg.ablations = list(run.get("ablations", []))
    cfg.baselines = list(run.get("baselines", []))
    cfg.n_windows = int(run.get("n_windows", cfg.n_windows))
    cfg.out_dir = _resolve(base, run.get("out_dir"))
    cfg.run_name = run.get("run_name")
    cfg.seed = int(run.get("seed", cfg.seed))

    # flag overrides
    if getattr(args, "dataset", None):
        for key, name in DATASET_FILES.items():
            setattr(cfg, key, Path(args.dataset) / name)
    for key in ("prices", "news", "market_text", "signals", "embeddings"):
        if getattr(args, key, None):
            setattr(cfg, key, Path(getattr(args, key)))
    if getattr(args, "embeddings", None):
        cfg.provider = "precomputed"
    if getattr(args, "embedding_dim", None) is not None:
        cfg.embedding_dim = args.embedding_dim
    for key in ("window_len", "fused_dim", "mlp_layers", "mlp_hidden", "n_heads", "attn_dim"):
        if getattr(args, key, None) is not None:
            cfg.model[key] = getattr(args, key)
    for key in ("epochs", "batch_size", "lr", "early_stop_patience"):
        if getattr(args, key, None) is not None:
            cfg.train[key] = getattr(args, key)
    if getattr(args, "grid", None) is not None:
        cfg.grid = args.grid
    if getattr(args, "ablation", None):
        cfg.ablations = list(args.ablation)
    if getattr(args, "baseline", None):
        cfg.baselines = list(args.baseline)
    if getattr(args, "n_windows", None) is not None:
        cfg.n_windows = args.n_windows
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "run_name", None):
        cfg.run_name = args.run_name
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out)
    if cfg.out_dir is None:
        cfg.out_dir = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return cfg.validate()


def _load(cfg: RunConfig):
    provider = cfg.make_provider()
    dataset = load_dataset(cfg.prices, cfg.news, cfg.market_text, cfg.signals)
    return dataset, provider


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = generate_synthetic_corpus(args.days, args.news_per_day, args.fidelity, args.seed)
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / f"synth-s{args.seed}"
    paths = save_dataset(ds, out)
    for p in paths.values():
        print(p)
    return 0


def cmd_backtest(args) -> int:
    cfg = build_run_config(args)
    dataset, provider = _load(cfg)
    report = run_experiment(
        dataset, provider, cfg.model_config(), cfg.train_config(), grid=cfg.grid_spec(),
        ablations=cfg.ablations or None, baselines=cfg.baselines, out_dir=cfg.out_dir,
        run_name=cfg.run_name, n_windows=cfg.n_windows,
        signal_rate=bool(dataset.signal_ids),
    )
    for note in report.notes:
        print(f"note: {note}")
    print(report.format_table())
    for label, rate in report.extras.get("signal_hit_rate", {}).items():
        print(f"{label}: planted signal ranked first on {rate:.3f} of test days")
    print(f"report: {report.run_dir / 'report.csv'}")
    return 0


def cmd_train(args) -> int:
    """Train one model on a single protocol window and save its checkpoint."""
    cfg = build_run_config(args)
    if cfg.grid:
        raise ConfigError("train runs a fixed configuration; use backtest for grid search")
    dataset, provider = _load(cfg)
    windows = make_windows(len(dataset), cfg.n_windows)
    if not 0 <= args.window < len(windows):
        raise ConfigError(f"window {args.window} does not fit in {len(dataset)} days")
    win = windows[args.window]
    store = FeatureStore(dataset, provider, EmbeddingCache())
    model_config = cfg.model_config()
    res = train(model_config, cfg.train_config(), store, win.train_range, win.val_range)
    test = evaluate(res.network, store, np.arange(*win.test_range), min_day=win.train_range[0])
    out = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / f"{model_config.label}-w{win.window_id}.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.network.state_arrays(), checkpoint_config(res.network, store))
    history = out.with_suffix(".history.json")
    history.write_text(json.dumps({"best_epoch": res.best_epoch, "history": res.history,
                                   "window": asdict(win)}, indent=2) + "\n")
    write_records(out.with_suffix(".predictions.csv"), test.records)
    print(f"best epoch {res.best_epoch}; test accuracy {test.accuracy:.4f} "
          f"pnl {test.pnl:.4f} sharpe {test.sharpe:.4f}")
    print(f"checkpoint: {out}")
    return 0


def _provider_for_checkpoint(name: str | None, embeddings):
    if embeddings:
        return precomputed_provider(embeddings)
    if name and name.startswith("hashing-d"):
        dim, seed = name[len("hashing-d"):].split("-s")
        return HashingProvider(int(dim), int(seed))
    raise ConfigError(f"checkpoint was trained with provider {name!r}; pass --embeddings")


def cmd_explain(args) -> int:
    import datetime as dt

    cfg, _ = load_checkpoint(args.checkpoint)
    provider = _provider_for_checkpoint(cfg.get("provider"), args.embeddings)
    paths = {k: Path(args.dataset) / v for k, v in DATASET_FILES.items()} if args.dataset else {}
    for key in ("prices", "news", "market_text"):
        if getattr(args, key, None):
            paths[key] = Path(getattr(args, key))
        if key not in paths:
            raise ConfigError(f"missing {key} path (give --dataset or --{key.replace('_', '-')})")
    dataset = load_dataset(paths["prices"], paths["news"], paths["market_text"])
    try:
        date = dt.date.fromisoformat(args.date)
    except ValueError:
        raise ConfigError(f"date must be YYYY-MM-DD, got {args.date!r}") from None
    day = dataset.day_of(date)
    store = FeatureStore(dataset, provider)
    net = load_network(args.checkpoint, store)
    items = explain_day(net, store, day)
    width = min(max(len(i.headline) for i in items), 72)
    print(f"{'headline':<{width}}  {'raw':>10}  {'normalized':>10}")
    for it in items:
        print(f"{it.headline[:width]:<{width}}  {it.raw_weight:>10.6f}  {it.normalized_weight:>10.6f}")
    return 0


def cmd_metrics(args) -> int:
    records = read_records(args.predictions)
    rep = MetricsReport.from_records(records, args.risk_free)
    print(f"days {rep.n_days}")
    print(f"accuracy {rep.accuracy!r}")
    print(f"pnl {rep.pnl!r}")
    print(f"sharpe {rep.sharpe!r}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--dataset", help="directory holding prices.csv, news.jsonl, market.json")
    p.add_argument("--prices")
    p.add_argument("--news")
    p.add_argument("--market-text", dest="market_text")
    p.add_argument("--signals")
    p.add_argument("--embeddings", help="precomputed embedding file (selects that provider)")
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--window-len", type=int)
    p.add_argument("--fused-dim", type=int)
    p.add_argument("--mlp-layers", type=int)
    p.add_argument("--mlp-hidden", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--attn-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finin", description="News-influence market prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-signal corpus")
    p.add_argument("--days", type=int, default=2000)
    p.add_argument("--news-per-day", type=int, default=20)
    p.add_argument("--fidelity", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backtest", help="sliding-window experiment")
    _add_run_flags(p)
    p.add_argument("--ablation", action="append", choices=ABLATIONS,
                   help="variant to run; repeat for several")
    p.add_argument("--baseline", action="append", choices=BASELINES)
    p.add_argument("--grid", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--n-windows", type=int)
    p.add_argument("--run-name", help="run directory name instead of run.<timestamp>")
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("train", help="train on one protocol window and save a checkpoint")
    _add_run_flags(p)
    p.add_argument("--ablation", action="append", choices=ABLATIONS)
    p.add_argument("--window", type=int, default=0, help="protocol window index")
    p.add_argument("--checkpoint", help="checkpoint output path")
    p.set_defaults(func=cmd_train, grid=None)

    p = sub.add_parser("explain", help="rank one day's headlines by influence weight")
    p.add_argument("checkpoint")
    p.add_argument("date", help="trading date, YYYY-MM-DD")
    p.add_argument("--dataset")
    p.add_argument("--prices")
    p.add_argument("--news")
    p.add_argument("--market-text", dest="market_text")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("metrics", help="recompute metrics from a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--risk-free", type=float, default=RISK_FREE)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FininError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())

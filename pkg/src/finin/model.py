"""News-influence network: fusion encoder, influence quantifier, predictor.

Per trading day the network

1. encodes the market (shared text layer on the market text, an MLP on the
   standardised bar, a fusion MLP over both) into ``m_e``;
2. encodes every news item the same way (shared text layer on the
   headline, an MLP on the sentiment triple, a second fusion MLP) into
   ``r_e``;
3. lets the day's items attend to each other (multi-head attention with a
   residual connection) giving context features ``r_f``;
4. scores each item against the market encoding with a query/key
   attention whose softmax excludes the market's own position, averages
   the per-head weights and sums ``r_f`` with them into ``r_f_day``.

The predictor MLP reads ``m_e`` for the last ``t`` days followed by
``r_f_day`` for the same days and emits one logit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, NoNews, ShapeMismatch
from .features import N_BAR_FEATURES, N_SENTIMENT, DayBatch
from .numerics import MLP, Linear, MultiHeadAttention, Parameter, sigmoid

WINDOW_LENS = (1, 3, 5, 10, 20)
MLP_LAYERS = (2, 3, 4)
MLP_HIDDEN = (16, 32, 64)
N_HEADS = (1, 3, 6)
ATTN_DIMS = (32, 64, 128)
ABLATIONS = ("full", "no_news", "no_text", "no_quantifier")
ABLATION_LABELS = {
    "full": "FININ",
    "no_news": "FININ-NTP-NNP",
    "no_text": "FININ-MTP-NTP",
    "no_quantifier": "FININ-MIQ",
}


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 1
    text_dim: int = 64
    fused_dim: int = 16
    mlp_layers: int = 2
    mlp_hidden: int = 32
    n_heads: int = 1
    attn_dim: int = 32
    ablation: str = "full"
    seed: int = 0

    def __post_init__(self):
        checks = (
            ("window_len", WINDOW_LENS),
            ("mlp_layers", MLP_LAYERS),
            ("mlp_hidden", MLP_HIDDEN),
            ("n_heads", N_HEADS),
            ("attn_dim", ATTN_DIMS),
            ("ablation", ABLATIONS),
        )
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.text_dim < 1 or self.fused_dim < 1:
            raise ConfigError("text_dim and fused_dim must be positive")

    @property
    def label(self) -> str:
        return ABLATION_LABELS[self.ablation]

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _mlp_dims(in_dim, out_dim, layers, hidden):
    return [in_dim] + [hidden] * (layers - 1) + [out_dim]


@dataclass
class EncodedDay:
    m_te: np.ndarray
    m_ne: np.ndarray
    m_e: np.ndarray
    r_te: np.ndarray
    r_ne: np.ndarray
    r_e: np.ndarray
    r_f_items: np.ndarray
    r_f_day: np.ndarray
    raw_weights: np.ndarray
    head_weights: np.ndarray = field(default=None, repr=False)


@dataclass
class Prediction:
    day: int
    logit: float
    probability: float
    decision: int

    @classmethod
    def from_logit(cls, day, logit):
        p = float(sigmoid(np.asarray(logit)))
        return cls(int(day), float(logit), p, int(p > 0.5))


class FininNetwork:
    """Parameters and batched forward/backward passes."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = c = config
        if rng is None:
            rng = np.random.default_rng(c.seed)
        h, f = c.mlp_hidden, c.fused_dim
        self.e_t = Linear(c.text_dim, h, "e_t", rng)
        self.e_n1 = MLP(_mlp_dims(N_BAR_FEATURES, h, c.mlp_layers, h), "e_n1", rng)
        self.e_n2 = MLP(_mlp_dims(N_SENTIMENT, h, c.mlp_layers, h), "e_n2", rng)
        self.f1 = MLP(_mlp_dims(2 * h, f, c.mlp_layers, h), "f1", rng)
        self.f2 = MLP(_mlp_dims(2 * h, f, c.mlp_layers, h), "f2", rng)
        self.attn_news = MultiHeadAttention(f, c.n_heads, c.attn_dim, "attn_news", rng)
        self.attn_market = MultiHeadAttention(f, c.n_heads, c.attn_dim, "attn_market", rng,
                                              with_values=False)
        self.placeholder = Parameter("placeholder_news", rng.uniform(-0.1, 0.1, size=f))
        blocks = 1 if c.ablation == "no_news" else 2
        self.predictor = MLP(_mlp_dims(blocks * c.window_len * f, 1, c.mlp_layers, h),
                             "predictor", rng)
        self.bar_mean = np.zeros(N_BAR_FEATURES)
        self.bar_scale = np.ones(N_BAR_FEATURES)

    # -- parameter bookkeeping ---------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = self.e_t.parameters() + self.e_n1.parameters() + self.f1.parameters()
        if self.config.ablation != "no_news":
            ps += self.e_n2.parameters() + self.f2.parameters() + self.attn_news.parameters()
            if self.config.ablation != "no_quantifier":
                ps += self.attn_market.parameters()
            ps.append(self.placeholder)
        return ps + self.predictor.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value.copy() for p in self.parameters()}
        out["stats.bar_mean"] = self.bar_mean.copy()
        out["stats.bar_scale"] = self.bar_scale.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in arrays:
                raise ShapeMismatch(f"missing parameter {p.name}")
            if arrays[p.name].shape != p.shape:
                raise ShapeMismatch(f"{p.name}: shape {arrays[p.name].shape} != {p.shape}")
            p.value[...] = arrays[p.name]
        self.bar_mean = np.array(arrays["stats.bar_mean"], dtype=float)
        self.bar_scale = np.array(arrays["stats.bar_scale"], dtype=float)

    def fit_bar_stats(self, bars: np.ndarray):
        """Standardisation statistics from training-range bars only."""
        self.bar_mean = bars.mean(axis=0)
        std = bars.std(axis=0)
        self.bar_scale = np.where(std > 0, std, 1.0)

    def standardize(self, bars):
        return (np.asarray(bars, dtype=float) - self.bar_mean) / self.bar_scale

    # -- stages ----------------------------------------------------------------

    def _text(self, emb):
        out, cache = self.e_t.forward(emb)
        if self.config.ablation == "no_text":
            return np.zeros_like(out), None
        return out, cache

    def encode_market(self, market_emb, bars_std):
        """m_e for each row of ``bars_std`` ([..., 6])."""
        bars_std = np.asarray(bars_std, dtype=float)
        m_te, tc = self._text(market_emb)
        m_te = np.broadcast_to(m_te, bars_std.shape[:-1] + m_te.shape[-1:])
        m_ne, nc = self.e_n1.forward(bars_std)
        m_e, fc = self.f1.forward(np.concatenate([m_te, m_ne], axis=-1))
        return m_e, (tc, nc, fc, m_te, m_ne)

    def encode_market_backward(self, cache, dm_e):
        tc, nc, fc, m_te, m_ne = cache
        dcat = self.f1.backward(fc, dm_e)
        h = m_te.shape[-1]
        self.e_n1.backward(nc, dcat[..., h:])
        if tc is not None:
            dm_te = dcat[..., :h].reshape(-1, h).sum(axis=0)
            self.e_t.backward(tc, dm_te)

    def encode_news(self, news_emb, sentiment, placeholder=None):
        """r_e per item ([..., N, fused_dim]); placeholder rows use the learned vector."""
        r_te, tc = self._text(news_emb)
        r_ne, nc = self.e_n2.forward(sentiment)
        r_e, fc = self.f2.forward(np.concatenate([r_te, r_ne], axis=-1))
        if placeholder is not None and placeholder.any():
            r_e = r_e.copy()
            r_e[placeholder, 0] = self.placeholder.value
        return r_e, (tc, nc, fc, r_te, r_ne, placeholder)

    def encode_news_backward(self, cache, dr_e):
        tc, nc, fc, r_te, r_ne, placeholder = cache
        if placeholder is not None and placeholder.any():
            dr_e = dr_e.copy()
            self.placeholder.grad += dr_e[placeholder, 0].sum(axis=0)
            dr_e[placeholder, 0] = 0.0
        dcat = self.f2.backward(fc, dr_e)
        h = r_te.shape[-1]
        self.e_n2.backward(nc, dcat[..., h:])
        if tc is not None:
            self.e_t.backward(tc, dcat[..., :h])

    def contextualize(self, r_e, mask):
        out, weights, cache = self.attn_news.forward(r_e, r_e, mask)
        return r_e + out, cache

    def contextualize_backward(self, cache, dr_f):
        dq, dkv = self.attn_news.backward(cache, dr_f)
        return dr_f + dq + dkv

    def quantify(self, m_e, r_f, mask):
        """Exclusion-softmax weights and the weighted daily news feature.

        The market encoding is prepended to the keys and masked out, so the
        softmax runs over news positions only.
        """
        keys = np.concatenate([m_e[..., None, :], r_f], axis=-2)
        kmask = np.concatenate([np.zeros(mask.shape[:-1] + (1,), dtype=bool), mask], axis=-1)
        head_w, wc = self.attn_market.attention_weights(m_e[..., None, :], keys, kmask)
        # head_w: [..., h, 1, N+1]
        full_w = head_w.mean(axis=-3)[..., 0, :]
        weights = full_w[..., 1:]
        r_f_day = np.einsum("...n,...nf->...f", weights, r_f)
        return r_f_day, weights, (wc, head_w, weights, r_f, full_w)

    def quantify_backward(self, cache, dr_f_day):
        wc, head_w, weights, r_f, full_w = cache
        dweights = np.einsum("...f,...nf->...n", dr_f_day, r_f)
        dr_f = weights[..., :, None] * dr_f_day[..., None, :]
        dfull = np.concatenate([np.zeros(dweights.shape[:-1] + (1,)), dweights], axis=-1)
        n_heads = head_w.shape[-3]
        dhead = np.broadcast_to((dfull / n_heads)[..., None, None, :], head_w.shape)
        dq, dk = self.attn_market.attention_weights_backward(wc, dhead)
        dm_e = dq[..., 0, :] + dk[..., 0, :]
        return dm_e, dr_f + dk[..., 1:, :]

    @staticmethod
    def mean_pool(r_f, mask):
        m = mask.astype(float)
        return np.einsum("...n,...nf->...f", m, r_f) / m.sum(axis=-1, keepdims=True)

    # -- whole network -----------------------------------------------------------

    def forward(self, batch: DayBatch):
        """Logits for ``batch.targets`` and a cache for :meth:`backward`."""
        c = self.config
        bars_std = self.standardize(batch.bars)
        m_e, mc = self.encode_market(batch.market_emb, bars_std)
        diag = {"m_e": m_e}
        blocks = [m_e[batch.index].reshape(len(batch), -1)]
        nc = None
        if c.ablation != "no_news":
            if batch.mask is None:
                raise ShapeMismatch("batch built without news for a news-using model")
            r_e, ec = self.encode_news(batch.news_emb, batch.sentiment, batch.placeholder)
            r_f, cc = self.contextualize(r_e, batch.mask)
            if c.ablation == "no_quantifier":
                r_f_day = self.mean_pool(r_f, batch.mask)
                weights = batch.mask / batch.mask.sum(axis=-1, keepdims=True)
                qc = None
            else:
                r_f_day, weights, qc = self.quantify(m_e, r_f, batch.mask)
            blocks.append(r_f_day[batch.index].reshape(len(batch), -1))
            nc = (ec, cc, qc, r_f)
            diag.update(r_e=r_e, r_f=r_f, r_f_day=r_f_day, weights=weights)
        x = np.concatenate(blocks, axis=-1)
        out, pc = self.predictor.forward(x)
        return out[:, 0], (batch, mc, nc, pc, m_e.shape, diag)

    def backward(self, cache, dlogits):
        batch, mc, nc, pc, m_shape, _ = cache
        c = self.config
        dx = self.predictor.backward(pc, np.asarray(dlogits, dtype=float)[:, None])
        tf = c.window_len * c.fused_dim
        dm_e = np.zeros(m_shape)
        np.add.at(dm_e, batch.index, dx[:, :tf].reshape(len(batch), c.window_len, -1))
        if nc is not None:
            ec, cc, qc, r_f = nc
            dr_f_day = np.zeros((m_shape[0], c.fused_dim))
            np.add.at(dr_f_day, batch.index, dx[:, tf:].reshape(len(batch), c.window_len, -1))
            if qc is None:
                m = batch.mask.astype(float)
                dr_f = (m / m.sum(axis=-1, keepdims=True))[..., None] * dr_f_day[:, None, :]
            else:
                dm_q, dr_f = self.quantify_backward(qc, dr_f_day)
                dm_e += dm_q
            dr_e = self.contextualize_backward(cc, dr_f)
            self.encode_news_backward(ec, dr_e)
        self.encode_market_backward(mc, dm_e)

    def diagnostics(self, cache) -> dict:
        return cache[-1]

    def logits(self, batch: DayBatch) -> np.ndarray:
        return self.forward(batch)[0]

    def encode_day(self, market_emb, bar_raw, news_emb, sentiment) -> EncodedDay:
        """Every intermediate feature for a single day (no padding)."""
        bar_std = self.standardize(bar_raw)
        m_te, _ = self._text(market_emb)
        m_ne, _ = self.e_n1.forward(bar_std)
        m_e, _ = self.encode_market(market_emb, bar_std)
        n = len(news_emb)
        placeholder = None
        if n == 0:
            news_emb = np.zeros((1, self.config.text_dim))
            sentiment = np.zeros((1, N_SENTIMENT))
            placeholder = np.array(True)
        r_te, _ = self._text(news_emb)
        r_ne, _ = self.e_n2.forward(sentiment)
        r_e, _ = self.f2.forward(np.concatenate([r_te, r_ne], axis=-1))
        if placeholder is not None:
            r_e = self.placeholder.value[None, :].copy()
        mask = np.ones(len(r_e), dtype=bool)
        r_f, _ = self.contextualize(r_e, mask)
        head_w = None
        if self.config.ablation == "no_quantifier":
            r_f_day = self.mean_pool(r_f, mask)
            weights = mask / mask.sum()
        else:
            r_f_day, weights, qc = self.quantify(m_e, r_f, mask)
            head_w = qc[1][..., 0, 1:]
        return EncodedDay(m_te, m_ne, m_e, r_te, r_ne, r_e, r_f, r_f_day, weights, head_w)


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------

def encode_market(net: FininNetwork, m_text_embedding, m_numeric):
    return net.encode_market(m_text_embedding, net.standardize(m_numeric))[0]


def encode_news(net: FininNetwork, bundle, provider):
    if len(bundle.items) == 0:
        return net.placeholder.value[None, :].copy()
    emb = np.stack([provider.embed_news(it) for it in bundle.items])
    if emb.shape[-1] != net.config.text_dim:
        raise ShapeMismatch(f"provider dim {emb.shape[-1]} != model text_dim {net.config.text_dim}")
    sent = np.array([it.sentiment for it in bundle.items])
    return net.encode_news(emb, sent)[0]


def contextualize_news(net: FininNetwork, r_e_items):
    r_e_items = np.asarray(r_e_items, dtype=float)
    if r_e_items.ndim != 2 or len(r_e_items) == 0:
        raise ShapeMismatch("need a non-empty [N, fused_dim] array of item encodings")
    return net.contextualize(r_e_items, np.ones(len(r_e_items), dtype=bool))[0]


def quantify_influence(net: FininNetwork, m_e, r_f_items):
    """(r_f_day, weights) for one day."""
    r_f_items = np.asarray(r_f_items, dtype=float)
    if r_f_items.ndim != 2 or len(r_f_items) == 0:
        raise ShapeMismatch("need a non-empty [N, fused_dim] array of context features")
    r_f_day, weights, _ = net.quantify(np.asarray(m_e, dtype=float), r_f_items,
                                       np.ones(len(r_f_items), dtype=bool))
    return r_f_day, weights


def forward(net: FininNetwork, batch: DayBatch) -> list[Prediction]:
    logits = net.logits(batch)
    return [Prediction.from_logit(d, z) for d, z in zip(batch.targets, logits)]


def normalized_weights(raw_weights: Sequence[float]) -> np.ndarray:
    """Min-max rescaling of one day's weights onto [0, 1]; constant input maps to 0.5."""
    w = np.asarray(raw_weights, dtype=float)
    if w.size == 0:
        raise ShapeMismatch("no weights to normalise")
    lo, hi = w.min(), w.max()
    if hi == lo:
        return np.full_like(w, 0.5)
    return (w - lo) / (hi - lo)


@dataclass
class ExplainedItem:
    headline: str
    raw_weight: float
    normalized_weight: float
    item_id: str = ""


def explain_day(net: FininNetwork, store, day: int) -> list[ExplainedItem]:
    """Rank the day's news items by normalised quantifier weight (stable on ties)."""
    bundle = store.dataset.news[day]
    if len(bundle.items) == 0:
        raise NoNews(f"day {day} ({bundle.day.date}) has no news")
    emb, sent = store.news(day)
    enc = net.encode_day(store.market_embedding(), store.bar(day), emb, sent)
    raw = enc.raw_weights
    norm = normalized_weights(raw)
    order = sorted(range(len(raw)), key=lambda i: -norm[i])
    return [ExplainedItem(bundle.items[i].headline, float(raw[i]), float(norm[i]), bundle.items[i].id)
            for i in order]


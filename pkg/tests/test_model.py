import numpy as np
import pytest

import oracles
from conftest import jitter_biases, ragged_corpus, toy_network
from finin.data import DailyNewsBundle
from finin.embedding import HashingProvider
from finin.exceptions import ConfigError, NoNews, ShapeMismatch
from finin.features import FeatureStore, batch_days
from finin.model import (
    ABLATION_LABELS,
    FininNetwork,
    ModelConfig,
    contextualize_news,
    encode_market,
    encode_news,
    explain_day,
    forward,
    normalized_weights,
    quantify_influence,
)
from finin.numerics import grad_check, logistic_loss


@pytest.fixture(scope="module")
def ragged_store():
    return FeatureStore(ragged_corpus([1, 2, 4, 0, 3]), HashingProvider(16, 0))


# -- configuration ----------------------------------------------------------------

@pytest.mark.parametrize("field,value", [("window_len", 7), ("mlp_hidden", 48), ("mlp_layers", 5),
                                         ("n_heads", 2), ("attn_dim", 16), ("ablation", "none")])
def test_config_rejects_values_outside_grid(field, value):
    with pytest.raises(ConfigError):
        ModelConfig(**{field: value})


def test_ablation_labels():
    assert ABLATION_LABELS == {"full": "FININ", "no_news": "FININ-NTP-NNP",
                               "no_text": "FININ-MTP-NTP", "no_quantifier": "FININ-MIQ"}


def test_parameters_per_ablation():
    names = {a: {p.name.split(".")[0] for p in FininNetwork(ModelConfig(ablation=a)).parameters()}
             for a in ("full", "no_news", "no_quantifier")}
    assert "attn_market" in names["full"] and "placeholder_news" in names["full"]
    assert "attn_market" not in names["no_quantifier"]
    assert names["no_news"] == {"e_t", "e_n1", "f1", "predictor"}


def test_predictor_input_width():
    full = FininNetwork(ModelConfig(window_len=3, fused_dim=16))
    none = FininNetwork(ModelConfig(window_len=3, fused_dim=16, ablation="no_news"))
    assert full.predictor.in_dim == 2 * 3 * 16
    assert none.predictor.in_dim == 3 * 16


# -- encoders ---------------------------------------------------------------------

def zero_params(net):
    for p in net.parameters():
        p.value[...] = 0.0


def test_encode_market_zero_params_gives_zero(small_store):
    net = toy_network(small_store)
    zero_params(net)
    m = encode_market(net, small_store.market_embedding(), small_store.bar(3))
    np.testing.assert_array_equal(m, np.zeros(16))


def test_no_text_market_encoding_ignores_text(small_store):
    net = toy_network(small_store, ablation="no_text")
    bar = small_store.bar(3)
    a = encode_market(net, small_store.market_embedding(), bar)
    b = encode_market(net, np.zeros(small_store.text_dim), bar)
    np.testing.assert_array_equal(a, b)


def test_encode_news_counts_and_placeholder(small_store, small_corpus):
    net = toy_network(small_store)
    bundle = small_corpus.news[2]
    assert encode_news(net, bundle, small_store.provider).shape == (len(bundle), 16)
    empty = DailyNewsBundle(bundle.day, ())
    np.testing.assert_array_equal(encode_news(net, empty, small_store.provider), net.placeholder.value[None])


def test_encode_news_items_are_independent(small_store, small_corpus):
    net = toy_network(small_store)
    bundle = small_corpus.news[2]
    all_items = encode_news(net, bundle, small_store.provider)
    one = encode_news(net, DailyNewsBundle(bundle.day, bundle.items[1:2]), small_store.provider)
    np.testing.assert_allclose(all_items[1], one[0], atol=1e-14)


def test_encode_news_provider_dim_mismatch(small_store, small_corpus):
    net = toy_network(small_store)
    with pytest.raises(ShapeMismatch):
        encode_news(net, small_corpus.news[2], HashingProvider(32))


# -- contextualisation --------------------------------------------------------------

def test_contextualize_single_item(small_store):
    net = toy_network(small_store)
    jitter_biases(net)
    r_e = np.random.default_rng(0).normal(size=(1, 16))
    att = net.attn_news
    v = r_e @ att.value.weight.value + att.value.bias.value
    expected = v @ att.output.weight.value + att.output.bias.value + r_e
    np.testing.assert_allclose(contextualize_news(net, r_e), expected, atol=1e-13)


def test_contextualize_identical_items(small_store):
    net = toy_network(small_store)
    r = np.tile(np.random.default_rng(0).normal(size=16), (3, 1))
    out = contextualize_news(net, r)
    np.testing.assert_allclose(out[0], out[1], atol=1e-14)
    np.testing.assert_allclose(out[0], out[2], atol=1e-14)


def test_contextualize_permutation(small_store):
    net = toy_network(small_store, n_heads=3)
    r = np.random.default_rng(0).normal(size=(5, 16))
    perm = np.array([3, 0, 4, 1, 2])
    np.testing.assert_allclose(contextualize_news(net, r)[perm], contextualize_news(net, r[perm]), atol=1e-12)


# -- quantifier ----------------------------------------------------------------------

def test_quantify_single_item(small_store):
    net = toy_network(small_store)
    r = np.random.default_rng(0).normal(size=(1, 16))
    day, w = quantify_influence(net, np.ones(16), r)
    assert w.tolist() == [1.0]
    np.testing.assert_array_equal(day, r[0])


def test_quantify_zero_query_gives_uniform(small_store):
    net = toy_network(small_store, n_heads=3)
    net.attn_market.query.weight.value[...] = 0.0
    net.attn_market.query.bias.value[...] = 0.0
    r = np.random.default_rng(0).normal(size=(4, 16))
    day, w = quantify_influence(net, np.random.default_rng(1).normal(size=16), r)
    np.testing.assert_allclose(w, 0.25, atol=1e-12)
    np.testing.assert_allclose(day, r.mean(axis=0), atol=1e-12)


@pytest.mark.parametrize("n_heads", [1, 3, 6])
def test_quantify_matches_scalar_oracle(small_store, n_heads):
    net = toy_network(small_store, n_heads=n_heads, attn_dim=32)
    jitter_biases(net)
    rng = np.random.default_rng(n_heads)
    m_e = rng.normal(size=16)
    r_f = rng.normal(size=(3, 16))
    _, w = quantify_influence(net, m_e, r_f)
    att = net.attn_market
    expected = oracles.influence_weights(att.query.weight.value.tolist(), att.query.bias.value.tolist(),
                                         att.key.weight.value.tolist(), n_heads, 32,
                                         m_e.tolist(), r_f.tolist())
    np.testing.assert_allclose(w, expected, atol=1e-9)


def test_quantify_excludes_market_even_when_it_would_dominate(small_store):
    net = toy_network(small_store)
    m_e = np.random.default_rng(0).normal(size=16) * 10
    r_f = np.random.default_rng(1).normal(size=(3, 16)) * 0.01
    _, w = quantify_influence(net, m_e, r_f)
    assert abs(w.sum() - 1.0) < 1e-12 and (w > 0).all()


# -- whole network --------------------------------------------------------------------

def test_zero_predictor_gives_half(small_store):
    net = toy_network(small_store, window_len=1)
    for p in net.predictor.parameters():
        p.value[...] = 0.0
    (pred,) = forward(net, batch_days([5], small_store, 1))
    assert pred.logit == 0.0 and pred.probability == 0.5 and pred.decision == 0


def test_no_quantifier_equals_quantifier_with_uniform_weights(small_store):
    full = toy_network(small_store, window_len=3)
    miq = toy_network(small_store, window_len=3, ablation="no_quantifier")
    full.attn_market.query.weight.value[...] = 0.0
    full.attn_market.query.bias.value[...] = 0.0
    batch = batch_days([6, 9], small_store, 3)
    _, cf = full.forward(batch)
    _, cm = miq.forward(batch)
    np.testing.assert_allclose(full.diagnostics(cf)["r_f_day"], miq.diagnostics(cm)["r_f_day"], atol=1e-12)


def test_batched_equals_single(ragged_store):
    net = toy_network(ragged_store, window_len=3, n_heads=3)
    jitter_biases(net)
    targets = [4, 5, 6, 7, 8, 11]
    batched = net.logits(batch_days(targets, ragged_store, 3))
    single = [net.logits(batch_days([d], ragged_store, 3))[0] for d in targets]
    np.testing.assert_allclose(batched, single, atol=1e-9)


def test_padding_neutrality(ragged_store):
    net = toy_network(ragged_store, window_len=3)
    a = net.logits(batch_days([7, 8], ragged_store, 3))
    b = net.logits(batch_days([7, 8], ragged_store, 3, pad_to=12))
    np.testing.assert_allclose(a, b, atol=1e-9)
    _, cache = net.forward(batch_days([7, 8], ragged_store, 3, pad_to=12))
    batch = cache[0]
    w = net.diagnostics(cache)["weights"]
    assert (w[~batch.mask] == 0.0).all()


def test_permuting_news_within_a_day(small_corpus, small_store):
    from dataclasses import replace

    net = toy_network(small_store, window_len=1, n_heads=3)
    day = 6
    items = small_corpus.news[day].items
    perm = [2, 0, 3, 1]
    shuffled = list(small_corpus.news)
    shuffled[day] = DailyNewsBundle(small_corpus.news[day].day, tuple(items[i] for i in perm))
    other = FeatureStore(replace(small_corpus, news=tuple(shuffled)), small_store.provider)
    za, ca = net.forward(batch_days([day], small_store, 1))
    zb, cb = net.forward(batch_days([day], other, 1))
    assert abs(za[0] - zb[0]) < 1e-9
    wa = net.diagnostics(ca)["weights"][0]
    wb = net.diagnostics(cb)["weights"][0]
    np.testing.assert_allclose(wa[perm], wb, atol=1e-12)


def test_checkpoint_state_round_trip(small_store):
    a = toy_network(small_store, window_len=3)
    b = FininNetwork(a.config.replace(seed=99))
    b.load_state_arrays(a.state_arrays())
    batch = batch_days([5, 6], small_store, 3)
    np.testing.assert_array_equal(a.logits(batch), b.logits(batch))


# -- gradients -------------------------------------------------------------------------

def loss_closure(net, batch):
    def closure():
        z, c = net.forward(batch)
        loss, g = logistic_loss(z, batch.labels)
        net.backward(c, g)
        return float(loss.sum())
    return closure


@pytest.mark.parametrize("ablation", ["full", "no_text", "no_quantifier", "no_news"])
def test_end_to_end_gradient_ragged_news(ragged_store, ablation):
    # days 5..9 carry 1, 2, 4, 0 and 3 items
    net = toy_network(ragged_store, window_len=3, n_heads=3, ablation=ablation)
    jitter_biases(net)
    batch = batch_days([7, 8, 9], ragged_store, 3)
    err = grad_check(loss_closure(net, batch), net.parameters(), eps=3e-3, max_coords=8, order=4)
    assert err < 1e-4


def test_encode_market_gradient(small_store):
    net = toy_network(small_store)
    jitter_biases(net)
    m = small_store.market_embedding()
    bars = net.standardize(small_store.bars([3, 4]))
    g = np.random.default_rng(0).normal(size=(2, 16))

    def closure():
        out, c = net.encode_market(m, bars)
        net.encode_market_backward(c, g)
        return float((out * g).sum())

    params = net.e_t.parameters() + net.e_n1.parameters() + net.f1.parameters()
    assert grad_check(closure, params, eps=1e-5) < 1e-4


# -- inspection --------------------------------------------------------------------------

@pytest.mark.parametrize("raw,expected", [([0.2, 0.5, 0.8], [0.0, 0.5, 1.0]),
                                          ([0.25, 0.25], [0.5, 0.5]), ([1.0], [0.5])])
def test_normalized_weights(raw, expected):
    np.testing.assert_allclose(normalized_weights(raw), expected, atol=1e-15)


def test_explain_day(ragged_store):
    net = toy_network(ragged_store, window_len=1)
    rows = explain_day(net, ragged_store, 7)  # a 4-item day
    assert len(rows) == 4
    assert abs(sum(r.raw_weight for r in rows) - 1.0) < 1e-9
    norms = [r.normalized_weight for r in rows]
    assert norms == sorted(norms, reverse=True)
    with pytest.raises(NoNews):
        explain_day(net, ragged_store, 8)

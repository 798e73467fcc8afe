import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from finin.data import generate_synthetic_corpus
from finin.embedding import HashingProvider
from finin.estimator import (AlwaysBuyClassifier, FininClassifier, MLPPredictor,
                             NewsFrequencyFeatures, SentimentIndicatorFeatures)
from finin.exceptions import CheckpointMismatch, ConfigError
from finin.features import FeatureStore


@pytest.fixture(scope="module")
def store():
    return FeatureStore(generate_synthetic_corpus(90, 4, 0.9, 8), HashingProvider(16))


def quick(store, **kw):
    return FininClassifier(store, fused_dim=8, mlp_hidden=16, epochs=3, **kw)


def test_params_round_trip_through_clone(store):
    clf = quick(store, n_heads=3, random_state=5)
    params = clf.get_params()
    assert params["n_heads"] == 3 and params["random_state"] == 5
    twin = clone(clf)
    assert twin.get_params()["n_heads"] == 3
    twin.set_params(attn_dim=64)
    assert twin.attn_dim == 64 and clf.attn_dim == 32


def test_fit_predict_shapes(store):
    clf = quick(store).fit(np.arange(2, 60), eval_days=np.arange(60, 70), min_day=0)
    proba = clf.predict_proba(np.arange(70, 80))
    assert proba.shape == (10, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(np.arange(70, 80))) <= {0, 1}
    assert 1 <= clf.best_epoch_ <= 3
    rep = clf.evaluate(np.arange(70, 80))
    assert rep.n_days == 10


def test_unfitted_predict_raises(store):
    with pytest.raises(NotFittedError):
        quick(store).predict([10])


def test_missing_store_is_a_config_error():
    with pytest.raises(ConfigError):
        FininClassifier().fit([5, 6])


def test_save_load_round_trip(store, tmp_path):
    clf = quick(store).fit(np.arange(2, 60))
    clf.save(tmp_path / "m.bin")
    back = FininClassifier.load(tmp_path / "m.bin", store)
    days = np.arange(60, 80)
    np.testing.assert_array_equal(back.decision_function(days), clf.decision_function(days))
    assert back.explain(65)[0].headline


def test_load_with_other_provider_fails(store, tmp_path):
    quick(store).fit(np.arange(2, 40)).save(tmp_path / "m.bin")
    other = FeatureStore(store.dataset, HashingProvider(16, seed=9))
    with pytest.raises(CheckpointMismatch):
        FininClassifier.load(tmp_path / "m.bin", other)


def test_always_buy_predicts_ones():
    assert AlwaysBuyClassifier().fit([1, 2, 3]).predict([4, 5]).tolist() == [1, 1]


def test_feature_transformers_widths(store):
    days = np.arange(3, 30)
    sent = SentimentIndicatorFeatures(store, window_len=3).fit(days).transform(days)
    freq = NewsFrequencyFeatures(store, window_len=1).fit(days).transform(days)
    assert sent.shape[0] == freq.shape[0] == len(days)
    assert np.isfinite(sent).all() and np.isfinite(freq).all()


def test_mlp_predictor_learns_a_linear_rule():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 4))
    y = (X[:, 0] - X[:, 1] > 0).astype(int)
    model = MLPPredictor(epochs=40, random_state=0).fit(X[:200], y[:200])
    assert (model.predict(X[200:]) == y[200:]).mean() > 0.9

"""Acceptance suite: one PASS/FAIL line per criterion, shown in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 6 and 7 train
the full planted-signal experiment twice and take several minutes.
"""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from conftest import jitter_biases, ragged_corpus, record_verdict
from finin.backtest import make_windows, run_experiment
from finin.data import generate_synthetic_corpus
from finin.embedding import HashingProvider
from finin.features import AccessAudit, FeatureStore, batch_days
from finin.metrics import accuracy, make_records, pnl, sharpe
from finin.model import FininNetwork, ModelConfig
from finin.numerics import (MLP, Linear, MultiHeadAttention, Parameter, grad_check, logistic_loss,
                            masked_softmax, silu, silu_backward, softmax_backward)
from finin.training import GridSpec, TrainConfig, grid_search, train

ABLATIONS = ("full", "no_news", "no_text", "no_quantifier")


# -- 1 ------------------------------------------------------------------------

def _elementwise_checks(rng):
    """Relative errors for the building blocks below the network level."""
    errs = {}
    x = Parameter("x", rng.normal(size=(4, 5)))
    g = rng.normal(size=(4, 5))

    def silu_closure():
        x.grad += silu_backward(x.value, g)
        return float((silu(x.value) * g).sum())

    def softmax_closure():
        mask = np.array([True, True, False, True, True])
        p = masked_softmax(x.value, mask)
        x.grad += softmax_backward(p, g)
        return float((p * g).sum())

    y = (rng.random((4, 5)) > 0.5).astype(float)

    def loss_closure():
        loss, d = logistic_loss(x.value, y)
        x.grad += d
        return float(loss.sum())

    errs["silu"] = grad_check(silu_closure, [x])
    errs["masked_softmax"] = grad_check(softmax_closure, [x])
    errs["logistic_loss"] = grad_check(loss_closure, [x])

    inp = rng.normal(size=(5, 6))
    lin = Linear(6, 4, "lin", rng)
    lin.bias.value += rng.uniform(-0.2, 0.2, 4)
    t = rng.normal(size=(5, 4))

    def lin_closure():
        out, c = lin.forward(inp)
        lin.backward(c, out - t)
        return 0.5 * float(((out - t) ** 2).sum())

    errs["linear"] = grad_check(lin_closure, lin.parameters())

    mlp = MLP([6, 16, 16, 3], "mlp", rng)
    jitter_biases(mlp, 2)

    def mlp_closure():
        out, c = mlp.forward(inp)
        mlp.backward(c, np.cos(out))
        return float(np.sin(out).sum())

    errs["mlp"] = grad_check(mlp_closure, mlp.parameters())

    for values in (True, False):
        att = MultiHeadAttention(6, 3, 32, "att", rng, with_values=values)
        jitter_biases(att, 3)
        q, kv = rng.normal(size=(2, 6)), rng.normal(size=(4, 6))
        mask = np.array([True, True, True, False])
        if values:
            go = rng.normal(size=(2, 6))

            def att_closure():
                out, _, c = att.forward(q, kv, mask)
                att.backward(c, go)
                return float((out * go).sum())
        else:
            gw = rng.normal(size=(3, 2, 4))

            def att_closure():
                w, c = att.attention_weights(q, kv, mask)
                att.attention_weights_backward(c, gw)
                return float((w * gw).sum())
        errs[f"attention(values={values})"] = grad_check(att_closure, att.parameters())
    return errs


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = _elementwise_checks(rng)
    store = FeatureStore(ragged_corpus([1, 2, 4, 0, 3]), HashingProvider(16, 0))
    corners = list(itertools.product((2, 4), (16, 64), (1, 6), (32, 128)))
    worst, worst_at = 0.0, None
    for ablation, (layers, hidden, heads, adim), t in itertools.product(ABLATIONS, corners, (1, 3)):
        cfg = ModelConfig(window_len=t, text_dim=16, fused_dim=16, mlp_layers=layers, mlp_hidden=hidden,
                          n_heads=heads, attn_dim=adim, ablation=ablation)
        net = FininNetwork(cfg)
        net.fit_bar_stats(store.bars(range(len(store))))
        jitter_biases(net)
        batch = batch_days([7, 8, 9], store, t)

        def closure():
            z, c = net.forward(batch)
            loss, g = logistic_loss(z, batch.labels)
            net.backward(c, g)
            return float(loss.sum())

        err = grad_check(closure, net.parameters(), eps=3e-3, max_coords=4, order=4,
                         rng=np.random.default_rng(layers * hidden + heads * adim + t))
        if err > worst:
            worst, worst_at = err, (ablation, layers, hidden, heads, adim, t)
    elapsed = time.perf_counter() - start
    layer_worst = max(errs.values())
    ok = worst < 1e-4 and layer_worst < 1e-4 and elapsed < 300
    record_verdict(1, ok, f"{len(errs)} operations max rel err {layer_worst:.2e}; "
                          f"128 network checks max rel err {worst:.2e} at {worst_at}; {elapsed:.0f}s")


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_quantifier_invariants():
    rng = np.random.default_rng(2)
    failures = []
    zero_net = {}
    for i in range(1000):
        heads = (1, 3, 6)[i % 3]
        n = int(rng.integers(1, 51))
        cfg = ModelConfig(text_dim=16, n_heads=heads, attn_dim=32, seed=i)
        net = FininNetwork(cfg)
        jitter_biases(net, seed=i)
        m_e = rng.normal(size=(1, 16)) * rng.uniform(0.1, 10)
        r_f = rng.normal(size=(1, n, 16)) * rng.uniform(0.1, 10)
        mask = np.ones((1, n), dtype=bool)
        _, w, qc = net.quantify(m_e, r_f, mask)
        full = qc[-1]
        w = w[0]
        if not ((w >= 0).all() and abs(w.sum() - 1.0) <= 1e-9 and full[0, 0] == 0.0):
            failures.append(("simplex", i))
        if n == 1 and w[0] != 1.0:
            failures.append(("single", i))
        if heads not in zero_net:
            z = FininNetwork(cfg)
            z.attn_market.query.weight.value[...] = 0.0
            z.attn_market.query.bias.value[...] = 0.0
            zero_net[heads] = z
        _, wz, _ = zero_net[heads].quantify(m_e, r_f, mask)
        if np.abs(wz[0] - 1.0 / n).max() > 1e-12:
            failures.append(("uniform", i))
    record_verdict(2, not failures, f"1000 instances, N in 1..50, failures {failures[:5]}")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_ablation_identities():
    store = FeatureStore(ragged_corpus([3, 1, 5, 0, 2, 4]), HashingProvider(16, 0))
    rng = np.random.default_rng(3)
    worst_mean, news_bad, text_bad = 0.0, 0, 0
    for i in range(100):
        t = (1, 3)[i % 2]
        targets = np.sort(rng.choice(np.arange(3, 39), size=3, replace=False))
        batch = batch_days(targets, store, t)
        noisy = replace(batch, news_emb=rng.normal(size=batch.news_emb.shape),
                        sentiment=rng.dirichlet((1, 1, 1), size=batch.sentiment.shape[:2]))
        relabelled = replace(batch, news_emb=rng.normal(size=batch.news_emb.shape),
                             market_emb=rng.normal(size=batch.market_emb.shape))

        net = FininNetwork(ModelConfig(window_len=t, text_dim=16, ablation="no_quantifier", seed=i))
        net.fit_bar_stats(store.bars(range(40)))
        jitter_biases(net, seed=i)
        _, cache = net.forward(batch)
        d = net.diagnostics(cache)
        m = batch.mask[..., None]
        mean = (d["r_f"] * m).sum(axis=1) / m.sum(axis=1)
        worst_mean = max(worst_mean, float(np.abs(d["r_f_day"] - mean).max()))

        net = FininNetwork(ModelConfig(window_len=t, text_dim=16, ablation="no_news", seed=i))
        net.fit_bar_stats(store.bars(range(40)))
        if not np.array_equal(net.logits(batch), net.logits(noisy)):
            news_bad += 1

        net = FininNetwork(ModelConfig(window_len=t, text_dim=16, ablation="no_text", seed=i))
        net.fit_bar_stats(store.bars(range(40)))
        jitter_biases(net, seed=i)
        if not np.array_equal(net.logits(batch), net.logits(relabelled)):
            text_bad += 1
    ok = worst_mean <= 1e-12 and news_bad == 0 and text_bad == 0
    record_verdict(3, ok, f"100 instances each: mean-pool max dev {worst_mean:.1e}, "
                          f"no_news changed {news_bad}, no_text changed {text_bad}")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        closes = 100 * np.cumprod(np.r_[1.0, 1 + rng.normal(0, 0.01, 20)])
        dec = rng.integers(0, 2, 20)
        recs = make_records(range(20), dec, closes)
        c, d = closes.tolist(), dec.tolist()
        worst = max(worst, abs(pnl(recs) - oracles.pnl(d, c)),
                    abs(sharpe(recs) - oracles.sharpe(d, c)),
                    abs(accuracy(recs) - oracles.accuracy(d, c)))
    # wrong on the second day of [100, 101, 103.02]; then returns 0.03 and 0.01 both called right
    hand_pnl = pnl(make_records([0, 1], [1, 0], [100.0, 101.0, 103.02]))
    hand_sr = sharpe(make_records([0, 1], [1, 1], [100.0, 103.0, 104.03]))
    ok = worst <= 1e-9 and abs(hand_pnl + 0.01) < 1e-12 and abs(hand_sr) < 1e-9
    record_verdict(4, ok, f"100 series max abs diff {worst:.1e}; hand pnl {hand_pnl:.12f}, "
                          f"hand SR {hand_sr:.1e}")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_protocol_bookkeeping():
    wins = make_windows(4020)
    starts_ok = [w.start_day for w in wins] == [391 * k for k in range(10)]
    splits_ok = all(
        w.train_range[1] - w.train_range[0] == 400
        and w.val_range == (w.train_range[1], w.train_range[1] + 50)
        and w.test_range == (w.val_range[1], w.val_range[1] + 50)
        for w in wins)
    tests = [set(range(*w.test_range)) for w in wins]
    disjoint = all(not (a & b) for a, b in itertools.combinations(tests, 2))

    corpus = generate_synthetic_corpus(4020, 2, 0.9, 5)
    audit = AccessAudit()
    store = FeatureStore(corpus, HashingProvider(16), audit=audit)
    leaks = 0
    for w in (wins[0], wins[-1]):
        audit.touches.clear()
        train(ModelConfig(window_len=3, text_dim=16, mlp_hidden=16), TrainConfig(epochs=1), store,
              w.train_range, w.val_range)
        fit_days = audit.days("fit")
        leaks += sum(1 for d in fit_days if d >= w.train_range[1] or d < w.train_range[0])
    ok = len(wins) == 10 and starts_ok and splits_ok and disjoint and leaks == 0
    record_verdict(5, ok, f"{len(wins)} windows, starts 391k {starts_ok}, splits {splits_ok}, "
                          f"disjoint tests {disjoint}, out-of-range fit touches {leaks}")


# -- 6 and 7 ------------------------------------------------------------------

def planted_signal_run(out_dir):
    corpus = generate_synthetic_corpus(2000, 20, 0.9, 1)
    return run_experiment(corpus, HashingProvider(64, 0), ModelConfig(window_len=3, text_dim=64),
                          TrainConfig(seed=0), ablations=["full", "no_quantifier", "no_news"],
                          out_dir=out_dir, run_name="acceptance", signal_rate=True)


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    start = time.perf_counter()
    report = planted_signal_run(tmp_path_factory.mktemp("first"))
    return report, time.perf_counter() - start


def test_criterion_6_planted_signal(planted):
    report, elapsed = planted
    acc = {m: report.mean(m)["accuracy"] for m in ("FININ", "FININ-MIQ", "FININ-NTP-NNP")}
    hits = report.extras["signal_hit_rates"]["FININ"]
    hit = float(np.mean(hits))
    per_window = [r["accuracy"] for r in report.per_window("FININ")]
    checks = {
        "acc>=0.80": acc["FININ"] >= 0.80,
        "beats MIQ": acc["FININ"] > acc["FININ-MIQ"],
        "beats NTP-NNP": acc["FININ"] > acc["FININ-NTP-NNP"],
        "hit>=0.80": hit >= 0.80,
        "<30min": elapsed < 1800,
    }
    failed = [k for k, v in checks.items() if not v]
    record_verdict(6, not failed,
                   f"{len(per_window)} windows; FININ acc {acc['FININ']:.3f} {per_window}, "
                   f"MIQ {acc['FININ-MIQ']:.3f}, NTP-NNP {acc['FININ-NTP-NNP']:.3f}; "
                   f"signal top-ranked {hit:.3f} {hits}; {elapsed:.0f}s; failed {failed}")


def test_criterion_7_determinism(planted, tmp_path):
    first, _ = planted
    second = planted_signal_run(tmp_path)
    a = (first.run_dir / "report.csv").read_bytes()
    b = (second.run_dir / "report.csv").read_bytes()
    record_verdict(7, a == b, f"report.csv {len(a)} bytes, identical {a == b}")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_grid_search(tmp_path):
    store = FeatureStore(generate_synthetic_corpus(40, 2, 0.9, 8), HashingProvider(16))
    grid = GridSpec()
    table = tmp_path / "grid.csv"
    best, rows, _ = grid_search(grid, ModelConfig(window_len=1, text_dim=16), TrainConfig(epochs=1),
                                store, (0, 30), (30, 38), table_path=table)
    lines = table.read_text().splitlines()
    configs = {tuple(r[f] for f in ("mlp_layers", "mlp_hidden", "n_heads", "attn_dim")) for r in rows}
    ok = len(grid.points()) == 81 and len(rows) == 81 and len(lines) == 82 and len(configs) == 81
    record_verdict(8, ok, f"{len(grid.points())} grid points, {len(lines) - 1} table rows, "
                          f"{len(configs)} distinct; best {best.mlp_layers}/{best.mlp_hidden}/"
                          f"{best.n_heads}/{best.attn_dim}")

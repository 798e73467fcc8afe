"""Independent scalar re-implementations used as test oracles.

Plain Python loops over floats and the ``math`` module; nothing here calls
into the package's vectorised code paths.
"""

import math


def softmax(scores, mask=None):
    n = len(scores)
    mask = mask if mask is not None else [True] * n
    live = [s for s, m in zip(scores, mask) if m]
    top = max(live)
    exps = [math.exp(s - top) if m else 0.0 for s, m in zip(scores, mask)]
    total = sum(exps)
    return [e / total for e in exps]


def matvec(x, w):
    """Row vector ``x`` times matrix ``w`` (list of rows)."""
    cols = len(w[0])
    return [sum(x[i] * w[i][j] for i in range(len(x))) for j in range(cols)]


def influence_weights(wq, bq, wk, n_heads, d_k, m_e, r_f):
    """Exclusion-softmax weights of each news item against the market query.

    Scores every key (market first, then items) per head, drops the market
    position, normalises over items and averages the heads.
    """
    q = [a + b for a, b in zip(matvec(m_e, wq), bq)]
    keys = [matvec(m_e, wk)] + [matvec(r, wk) for r in r_f]
    n = len(r_f)
    avg = [0.0] * n
    for h in range(n_heads):
        lo, hi = h * d_k, (h + 1) * d_k
        scores = []
        for k in keys[1:]:
            dot = sum(q[i] * k[i] for i in range(lo, hi))
            scores.append(dot / math.sqrt(d_k))
        w = softmax(scores)
        for i in range(n):
            avg[i] += w[i] / n_heads
    return avg


def simple_returns(closes):
    return [(closes[i + 1] - closes[i]) / closes[i] for i in range(len(closes) - 1)]


def pnl(decisions, closes):
    """Profit of following each call: gain the move when right, lose it when wrong."""
    total = 0.0
    for d, dec in enumerate(decisions):
        ret = (closes[d + 1] - closes[d]) / closes[d]
        label = 1 if closes[d + 1] > closes[d] else 0
        flag = 1 if dec == label else -1
        total += flag * abs(ret)
    return total


def sharpe(decisions, closes, risk_free=0.02):
    strat = []
    for d, dec in enumerate(decisions):
        ret = (closes[d + 1] - closes[d]) / closes[d]
        label = 1 if closes[d + 1] > closes[d] else 0
        strat.append(abs(ret) if dec == label else -abs(ret))
    n = len(strat)
    mean = sum(strat) / n
    var = sum((r - mean) ** 2 for r in strat) / (n - 1)
    return (mean - risk_free) / math.sqrt(var)


def accuracy(decisions, closes):
    hits = 0
    for d, dec in enumerate(decisions):
        label = 1 if closes[d + 1] > closes[d] else 0
        hits += dec == label
    return hits / len(decisions)

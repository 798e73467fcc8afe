"""Differentiable building blocks on float64 numpy arrays.

Layers follow a functional convention: ``forward`` returns the output and an
opaque cache, ``backward(cache, grad_out)`` accumulates parameter gradients
into :attr:`Parameter.grad` and returns the gradient with respect to the
input. Keeping the cache outside the layer lets one layer be applied several
times in a single computation (the shared text layer is used for both market
and news text).

Masks are boolean arrays where ``True`` marks a position that takes part in
the computation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import AllMasked, CheckpointMismatch, InvalidParameter, IoFailure, MalformedFile, ShapeMismatch

DTYPE = np.float64
ACTIVATION = "silu"
NEG_INF = -np.inf


@dataclass(eq=False)
class Parameter:
    """A trainable array together with its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def silu(x):
    """x * sigmoid(x): a smooth member of the ReLU family (no kink at 0)."""
    return x * sigmoid(x)


def silu_backward(x, dy):
    s = sigmoid(x)
    return dy * (s + x * s * (1.0 - s))


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    z = np.asarray(z, dtype=DTYPE)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


# ---------------------------------------------------------------------------
# linear / MLP
# ---------------------------------------------------------------------------

class Linear:
    """Affine map ``y = x @ W + b`` over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, name: str, rng: np.random.Generator | None = None,
                 bias: bool = True):
        if rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            w = uniform_init(rng, in_dim, (in_dim, out_dim))
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim)) if bias else None

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(
                f"{self.weight.name}: input last dim {x.shape[-1]} != {self.in_dim}"
            )
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y, x

    def backward(self, x, dy):
        x2 = x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        self.weight.grad += x2.T @ dy2
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0)
        return dy @ self.weight.value.T


def linear(weight: Parameter, bias: Parameter, x):
    """Functional form of :class:`Linear` for callers holding raw parameters."""
    layer = Linear.__new__(Linear)
    layer.weight, layer.bias = weight, bias
    return layer.forward(x)[0]


class MLP:
    """Stack of linear layers with SiLU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], name: str, rng: np.random.Generator | None = None):
        if len(dims) < 2:
            raise ShapeMismatch("an MLP needs at least an input and an output size")
        self.layers = [
            Linear(dims[i], dims[i + 1], f"{name}.{i}", rng) for i in range(len(dims) - 1)
        ]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        caches = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z, c = layer.forward(h)
            caches.append((c, z))
            h = silu(z) if i < last else z
        return h, caches

    def backward(self, caches, dy):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            c, z = caches[i]
            if i < last:
                dy = silu_backward(z, dy)
            dy = self.layers[i].backward(c, dy)
        return dy


def mlp_forward(layers: Sequence[Linear], x):
    """Run a chain of :class:`Linear` layers with the fixed activation."""
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeMismatch(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
    mlp = MLP.__new__(MLP)
    mlp.layers = list(layers)
    return mlp.forward(x)[0]


# ---------------------------------------------------------------------------
# softmax and attention
# ---------------------------------------------------------------------------

def masked_softmax(scores, mask=None, axis: int = -1):
    """Softmax along ``axis`` with masked positions forced to exactly zero."""
    scores = np.asarray(scores, dtype=DTYPE)
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=axis).all():
        raise AllMasked("softmax over a row with no unmasked positions")
    s = np.where(mask, scores, NEG_INF)
    s = s - s.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, dp, axis: int = -1):
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def _split_heads(x, n_heads, d_k):
    # [..., n, h*dk] -> [..., h, n, dk]
    x = x.reshape(x.shape[:-1] + (n_heads, d_k))
    return np.swapaxes(x, -2, -3)


def _merge_heads(x):
    # [..., h, n, dk] -> [..., n, h*dk]
    x = np.swapaxes(x, -2, -3)
    return x.reshape(x.shape[:-2] + (-1,))


class MultiHeadAttention:
    """Scaled dot-product attention with query/key/value/output projections.

    ``forward(queries, keys_values, key_mask)`` works on arrays with any
    number of leading batch axes: queries ``[..., q, dim]``, keys_values
    ``[..., n, dim]``, key_mask ``[..., n]``. Returns outputs ``[..., q, dim]``
    and weights ``[..., heads, q, n]``.
    """

    def __init__(self, dim: int, n_heads: int, d_k: int, name: str,
                 rng: np.random.Generator | None = None, with_values: bool = True):
        self.dim, self.n_heads, self.d_k = dim, n_heads, d_k
        inner = n_heads * d_k
        self.query = Linear(dim, inner, f"{name}.query", rng)
        # a key bias shifts every score in a row by the same amount; softmax cancels it
        self.key = Linear(dim, inner, f"{name}.key", rng, bias=False)
        self.with_values = with_values
        if with_values:
            self.value = Linear(dim, inner, f"{name}.value", rng)
            self.output = Linear(inner, dim, f"{name}.output", rng)

    def parameters(self):
        ps = self.query.parameters() + self.key.parameters()
        if self.with_values:
            ps += self.value.parameters() + self.output.parameters()
        return ps

    # scores and weights only; used directly by the influence quantifier
    def attention_weights(self, queries, keys, key_mask):
        if queries.shape[-1] != self.dim or keys.shape[-1] != self.dim:
            raise ShapeMismatch(
                f"attention dim {self.dim}, got queries {queries.shape} keys {keys.shape}"
            )
        qp, qc = self.query.forward(queries)
        kp, kc = self.key.forward(keys)
        qh = _split_heads(qp, self.n_heads, self.d_k)
        kh = _split_heads(kp, self.n_heads, self.d_k)
        scale = 1.0 / math.sqrt(self.d_k)
        scores = (qh @ np.swapaxes(kh, -1, -2)) * scale
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        weights = masked_softmax(scores, mask)
        return weights, (qc, kc, qh, kh, scale, weights)

    def attention_weights_backward(self, cache, dweights):
        qc, kc, qh, kh, scale, weights = cache
        dscores = softmax_backward(weights, dweights) * scale
        dqh = dscores @ kh
        dkh = np.swapaxes(dscores, -1, -2) @ qh
        dq = self.query.backward(qc, _merge_heads(dqh))
        dk = self.key.backward(kc, _merge_heads(dkh))
        return dq, dk

    def forward(self, queries, keys_values, key_mask):
        if not self.with_values:
            raise ShapeMismatch("attention layer built without value/output projections")
        weights, wcache = self.attention_weights(queries, keys_values, key_mask)
        vp, vc = self.value.forward(keys_values)
        vh = _split_heads(vp, self.n_heads, self.d_k)
        ah = weights @ vh
        a = _merge_heads(ah)
        out, oc = self.output.forward(a)
        return out, weights, (wcache, vc, vh, weights, oc)

    def backward(self, cache, dout, dweights=None):
        """Return (d_queries, d_keys_values)."""
        wcache, vc, vh, weights, oc = cache
        da = self.output.backward(oc, dout)
        dah = _split_heads(da, self.n_heads, self.d_k)
        dw = dah @ np.swapaxes(vh, -1, -2)
        if dweights is not None:
            dw = dw + dweights
        dvh = np.swapaxes(weights, -1, -2) @ dah
        dkv = self.value.backward(vc, _merge_heads(dvh))
        dq, dk = self.attention_weights_backward(wcache, dw)
        return dq, dk + dkv


def scaled_dot_attention(params: MultiHeadAttention, queries, keys_values, key_mask=None):
    """Convenience wrapper returning ``(outputs, weights)``."""
    keys_values = np.asarray(keys_values, dtype=DTYPE)
    if key_mask is None:
        key_mask = np.ones(keys_values.shape[:-1], dtype=bool)
    out, weights, _ = params.forward(np.asarray(queries, dtype=DTYPE), keys_values, key_mask)
    return out, weights


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def logistic_loss(logit, label):
    """Binary cross-entropy on a raw logit.

    Returns ``(loss, dloss/dlogit)`` elementwise; ``softplus(z) - y*z`` is
    computed without overflow for large ``|z|``.
    """
    z = np.asarray(logit, dtype=DTYPE)
    y = np.asarray(label, dtype=DTYPE)
    loss = softplus(z) - y * z
    grad = sigmoid(z) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


class Adam:
    """Adam with bias correction. ``step`` zeroes gradients afterwards."""

    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if not lr >= 0:
            raise InvalidParameter(f"learning rate must be non-negative, got {lr}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise InvalidParameter(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise InvalidParameter(f"eps must be positive, got {eps}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, (b1, b2), eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state):
        self.t = state["t"]
        self.m = [m.copy() for m in state["m"]]
        self.v = [v.copy() for v in state["v"]]


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8, state=None):
    """Single functional Adam update; returns the new optimizer state."""
    if lr <= 0:
        raise InvalidParameter(f"learning rate must be positive, got {lr}")
    opt = Adam(params, lr, betas, eps)
    if state is not None:
        opt.load_state_dict(state)
    opt.step()
    return opt.state_dict()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(closure: Callable[[], float], params: Sequence[Parameter], eps: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``closure`` must zero nothing itself: it evaluates the loss and runs the
    backward pass, accumulating into ``Parameter.grad``. Gradients are zeroed
    here before each evaluation. With ``max_coords`` set, at most that many
    randomly chosen coordinates per parameter are probed.

    ``order=4`` uses the five-point stencil, whose O(eps^4) truncation error
    allows a larger step and so less round-off on deep compositions where
    individual gradient entries are small.
    """
    if order not in (2, 4):
        raise InvalidParameter(f"order must be 2 or 4, got {order}")
    params = list(params)
    for p in params:
        p.zero_grad()
    closure()
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for j in idx:
            orig = flat[j]

            def at(step):
                flat[j] = orig + step
                return closure()

            if order == 2:
                num = (at(eps) - at(-eps)) / (2.0 * eps)
            else:
                num = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
            flat[j] = orig
            an = a.reshape(-1)[j]
            err = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"FININCKPT1\n"


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict):
    """Write named float64 arrays after a JSON header line carrying the config digest."""
    header = {
        "digest": config_digest(config),
        "config": config,
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_config: dict | None = None):
    """Return ``(config, arrays)``; digest mismatches raise CheckpointMismatch."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(MAGIC):
        raise MalformedFile(f"{path}: not a checkpoint file")
    nl = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):nl])
    config = header["config"]
    if config_digest(config) != header["digest"]:
        raise CheckpointMismatch(f"{path}: config digest does not match header")
    if expected_config is not None and config_digest(expected_config) != header["digest"]:
        raise CheckpointMismatch(f"{path}: checkpoint was written for a different config")
    offset = nl + 1
    arrays = {}
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(data):
            raise MalformedFile(f"{path}: truncated payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise MalformedFile(f"{path}: {len(data) - offset} trailing bytes")
    return config, arrays

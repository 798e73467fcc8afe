"""Frozen text-embedding providers.

The model never runs a language model itself. Text vectors come from an
:class:`EmbeddingProvider`: either the seeded feature-hashing backend, which
needs no external resources, or a file of vectors computed offline.
"""

from __future__ import annotations

import hashlib
import re
from pathlib import Path

import numpy as np

from .exceptions import DimensionMismatch, EmptyText, InvalidParameter, IoFailure, MalformedFile, MissingKey

_SPLIT = re.compile(r"[^0-9a-z]+")
MARKET_KEY = "__market__"


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


class EmbeddingProvider:
    """Base contract: ``embed`` is a pure function of the text."""

    name: str = "provider"
    dim: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_news(self, item) -> np.ndarray:
        return self.embed(item.headline)

    def embed_market(self, market_text) -> np.ndarray:
        return self.embed(market_text.text)


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return provider.embed(text)


class HashingProvider(EmbeddingProvider):
    """Signed feature hashing of lowercase alphanumeric tokens, L2-normalised.

    Each token is hashed with an 8-byte keyed BLAKE2b digest; the digest
    modulo ``dim`` picks the slot and its top bit picks the sign.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if int(dim) != dim or dim < 8:
            raise InvalidParameter(f"hashing dim must be an integer >= 8, got {dim}")
        self.dim = int(dim)
        self.seed = int(seed)
        self.name = f"hashing-d{self.dim}-s{self.seed}"
        self._key = self.seed.to_bytes(8, "little", signed=True)

    def _hash(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=self._key).digest()
        return int.from_bytes(digest, "little")

    def embed(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text:
            raise EmptyText("cannot embed empty text")
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            h = self._hash(tok)
            vec[h % self.dim] += -1.0 if h >> 63 else 1.0
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm


def hashing_provider(dim: int, seed: int = 0) -> HashingProvider:
    return HashingProvider(dim, seed)


class PrecomputedProvider(EmbeddingProvider):
    """Vectors read from a tab-separated file keyed by text or by news id.

    For id-keyed files the market text is looked up under ``__market__``.
    """

    def __init__(self, vectors: dict[str, np.ndarray], dim: int, keyed_by: str = "text", name: str = "precomputed"):
        self.vectors = vectors
        self.dim = dim
        self.keyed_by = keyed_by
        self.name = name

    def _lookup(self, key: str) -> np.ndarray:
        try:
            return self.vectors[key]
        except KeyError:
            raise MissingKey(f"no embedding for key {key!r}") from None

    def embed(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text:
            raise EmptyText("cannot embed empty text")
        return self._lookup(text).copy()

    def embed_news(self, item) -> np.ndarray:
        if self.keyed_by == "id":
            return self._lookup(item.id).copy()
        return self.embed(item.headline)

    def embed_market(self, market_text) -> np.ndarray:
        if self.keyed_by == "id":
            return self._lookup(MARKET_KEY).copy()
        return self.embed(market_text.text)


def precomputed_provider(path) -> PrecomputedProvider:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read embedding file {path}: {exc}") from exc
    if not lines:
        raise MalformedFile(f"{path}: empty embedding file")
    header = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
    try:
        dim = int(header["dim"])
        keyed_by = header["keyed_by"]
    except (KeyError, ValueError) as exc:
        raise MalformedFile(f"{path}: header must read 'dim=<E> keyed_by=<text|id>'") from exc
    if keyed_by not in ("text", "id") or dim <= 0:
        raise MalformedFile(f"{path}: bad header {lines[0]!r}")
    vectors = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        key, sep, rest = line.partition("\t")
        if not sep:
            raise MalformedFile(f"{path}:{lineno}: expected key<TAB>values")
        try:
            vec = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedFile(f"{path}:{lineno}: non-numeric value") from exc
        if len(vec) != dim:
            raise DimensionMismatch(f"{path}:{lineno}: {len(vec)} values, header says {dim}")
        if not np.all(np.isfinite(vec)):
            raise MalformedFile(f"{path}:{lineno}: non-finite value")
        vectors[key] = vec
    return PrecomputedProvider(vectors, dim, keyed_by, name=f"precomputed:{Path(path).name}")


def write_embeddings(path, vectors: dict[str, np.ndarray], keyed_by: str = "text"):
    dims = {len(v) for v in vectors.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"vectors of differing lengths {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={dim} keyed_by={keyed_by}\n")
        for key, vec in vectors.items():
            fh.write(key + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


class EmbeddingCache:
    """Memoises provider output per (provider name, key)."""

    def __init__(self):
        self._store: dict[tuple[str, str, str], np.ndarray] = {}

    def market(self, provider, market_text) -> np.ndarray:
        key = (provider.name, "market", market_text.text)
        if key not in self._store:
            self._store[key] = provider.embed_market(market_text)
        return self._store[key]

    def news(self, provider, item) -> np.ndarray:
        tag = item.id if getattr(provider, "keyed_by", "text") == "id" else item.headline
        key = (provider.name, "news", tag)
        if key not in self._store:
            self._store[key] = provider.embed_news(item)
        return self._store[key]

    def __len__(self):
        return len(self._store)

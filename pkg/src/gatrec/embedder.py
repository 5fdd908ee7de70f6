"""Text -> fixed-dimension vectors, with a signed feature-hashing fallback and a binary table cache.

Hashing fallback
----------------
Text is lowercased and split into maximal runs of Unicode letters/digits. Each
token ``t`` (UTF-8 bytes) is hashed twice with BLAKE2b, 8-byte digests,
little-endian integers:

* bucket: ``blake2b(t, digest_size=8, person=b"gatrec-bucket") mod dim``
* sign:   ``+1`` if ``blake2b(t, digest_size=8, person=b"gatrec-sign")`` is even, else ``-1``

Signed counts are accumulated per bucket and the result is L2-normalized
(the empty / token-free text maps to the zero vector).
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 384
EMBED_ENDPOINT_ENV = "GATREC_EMBED_ENDPOINT"
EMBED_API_KEY_ENV = "GATREC_EMBED_API_KEY"

CACHE_MAGIC = b"GREM"
USER, ITEM = 0, 1

_TOKEN_RE = re.compile(r"[^\W_]+")


class EmbeddingError(RuntimeError):
    pass


class IncompleteTableError(EmbeddingError):
    def __init__(self, missing_users, missing_items):
        super().__init__(f"missing text for users {sorted(missing_users)} and items {sorted(missing_items)}")
        self.missing_users = sorted(missing_users)
        self.missing_items = sorted(missing_items)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@lru_cache(maxsize=1 << 16)
def _token_hashes(token: str) -> tuple[int, int]:
    b = token.encode("utf-8")
    h1 = int.from_bytes(hashlib.blake2b(b, digest_size=8, person=b"gatrec-bucket").digest(), "little")
    h2 = int.from_bytes(hashlib.blake2b(b, digest_size=8, person=b"gatrec-sign").digest(), "little")
    return h1, h2


def hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    v = np.zeros(dim)
    for tok in tokenize(text):
        h1, h2 = _token_hashes(tok)
        v[h1 % dim] += 1.0 if h2 % 2 == 0 else -1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


class HashingProvider:
    name = "hash"

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self.calls = 0

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        self.calls += 1
        return np.stack([hash_embed(t, self.dim) for t in texts]) if texts else np.zeros((0, self.dim))


class RemoteEncoderProvider:
    """HTTP encoder: POST ``{"model", "inputs"}`` and receive one JSON float array per input."""

    remote = True
    name = "remote"

    def __init__(self, endpoint: Optional[str] = None, model: str = "all-MiniLM-L6-v2", dim: int = DEFAULT_DIM,
                 api_key: Optional[str] = None, session=None, batch_size: int = 64, max_concurrency: int = 4,
                 retries: int = 3, backoff: float = 1.0, timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get(EMBED_ENDPOINT_ENV)
        if not self.endpoint:
            raise ValueError(f"remote encoder requires an endpoint (set {EMBED_ENDPOINT_ENV})")
        self.model = model
        self.dim = dim
        self.api_key = api_key or os.environ.get(EMBED_API_KEY_ENV)
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.batch_size = batch_size
        self.max_concurrency = max_concurrency
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.calls = 0

    def _post(self, texts):
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last_exc = None
        for attempt in range(self.retries):
            self.calls += 1
            try:
                resp = self.session.post(self.endpoint, json={"model": self.model, "inputs": list(texts)},
                                         headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                out = np.asarray(resp.json(), dtype=np.float64)
                if out.shape != (len(texts), self.dim) or not np.isfinite(out).all():
                    raise EmbeddingError(f"encoder returned shape {out.shape}, expected {(len(texts), self.dim)}")
                return out
            except Exception as exc:
                last_exc = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise EmbeddingError(f"remote encoder failed after {self.retries} attempts: {last_exc}") from last_exc

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        chunks = [texts[i : i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if not chunks:
            return np.zeros((0, self.dim))
        with ThreadPoolExecutor(max_workers=max(1, self.max_concurrency)) as pool:
            return np.concatenate(list(pool.map(self._post, chunks)))


def embed_text(text: str, provider) -> np.ndarray:
    return provider.embed_batch([text])[0]


# ---------------------------------------------------------------------------
# Embedding table + binary cache


@dataclass
class EmbeddingTable:
    dim: int
    user_vectors: dict[int, np.ndarray] = field(default_factory=dict)
    item_vectors: dict[int, np.ndarray] = field(default_factory=dict)

    def matrix(self, user_ids: Sequence[int], item_ids: Sequence[int]) -> np.ndarray:
        """Stack rows in node-index order: users first, then items."""
        rows = [self.user_vectors[u] for u in user_ids] + [self.item_vectors[i] for i in item_ids]
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), self.dim)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kind", "u1"), ("id", "<u8"), ("vec", "<f4", (dim,))])


def save_table(path, table: EmbeddingTable) -> None:
    """Header ``magic | dim u32 | count u64`` then packed ``kind u8 | id u64 | dim x f32`` records, all LE."""
    records = [(USER, u, v) for u, v in sorted(table.user_vectors.items())]
    records += [(ITEM, i, v) for i, v in sorted(table.item_vectors.items())]
    arr = np.zeros(len(records), dtype=_record_dtype(table.dim))
    for k, (kind, ident, vec) in enumerate(records):
        arr[k] = (kind, ident, vec)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<IQ", table.dim, len(records)))
        fh.write(arr.tobytes())


def load_table(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise EmbeddingError(f"{path}: not an embedding cache")
    dim, count = struct.unpack_from("<IQ", data, 4)
    arr = np.frombuffer(data, dtype=_record_dtype(dim), count=count, offset=16)
    table = EmbeddingTable(dim)
    for kind, ident, vec in arr:
        target = table.user_vectors if kind == USER else table.item_vectors
        target[int(ident)] = vec.astype(np.float64)
    return table


def build_embedding_table(
    user_texts: Mapping[int, str],
    item_texts: Mapping[int, str],
    provider,
    user_ids: Sequence[int],
    item_ids: Sequence[int],
    cache_file=None,
) -> EmbeddingTable:
    """Embed every user profile and item text with one provider.

    Vectors are stored rounded to float32 so that a table rebuilt from a warm
    cache is identical to a freshly computed one.
    """
    if cache_file is not None and Path(cache_file).exists():
        table = load_table(cache_file)
        if (table.dim == provider.dim and set(user_ids) <= set(table.user_vectors)
                and set(item_ids) <= set(table.item_vectors)):
            log.info("embedding table loaded from %s", cache_file)
            return EmbeddingTable(
                table.dim,
                {u: table.user_vectors[u] for u in user_ids},
                {i: table.item_vectors[i] for i in item_ids},
            )
    missing_u = [u for u in user_ids if u not in user_texts]
    missing_i = [i for i in item_ids if i not in item_texts]
    if missing_u or missing_i:
        raise IncompleteTableError(missing_u, missing_i)
    users = list(user_ids)
    items = list(item_ids)
    vecs = provider.embed_batch([user_texts[u] for u in users] + [item_texts[i] for i in items])
    vecs = np.asarray(vecs, dtype=np.float32).astype(np.float64)
    if vecs.shape != (len(users) + len(items), provider.dim):
        raise EmbeddingError(f"provider returned shape {vecs.shape}")
    table = EmbeddingTable(
        provider.dim,
        {u: vecs[k] for k, u in enumerate(users)},
        {i: vecs[len(users) + k] for k, i in enumerate(items)},
    )
    if cache_file is not None:
        save_table(cache_file, table)
    return table

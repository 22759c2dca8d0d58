"""
Shared text encoder and exact cosine-similarity index.

Two encoders are available: a deterministic hashed character-n-gram encoder
for tests and offline runs, and a remote batch embedding endpoint.
"""

import logging
import time
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import requests
from sklearn.feature_extraction.text import HashingVectorizer

from errors import EmbeddingError, EncoderError, GraphFrozenError

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6

# Embedding values are plain float64 numpy vectors of unit L2 norm
Embedding = np.ndarray


def as_embedding(values: Iterable[float]) -> Embedding:
    """Validate and L2-normalise a raw vector"""
    vec = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise EmbeddingError(f"embedding must be a non-empty 1-d vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError("embedding contains non-finite values")
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise EmbeddingError("zero vector carries no information and cannot be normalised")
    return vec / norm


def is_unit(vec: np.ndarray, tol: float = NORM_TOLERANCE) -> bool:
    return abs(float(np.linalg.norm(vec)) - 1.0) <= tol


def cosine(u: Embedding, v: Embedding) -> float:
    """Cosine of two unit vectors, clipped to [-1, 1]"""
    if u.shape != v.shape:
        raise EmbeddingError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    return float(min(1.0, max(-1.0, float(np.dot(u, v)))))


class Encoder:
    """Base encoder: subclasses implement encode_batch"""

    dim: int = 0

    def encode(self, text: str) -> Embedding:
        return self.encode_batch([text])[0]

    def encode_batch(self, texts: Sequence[str]) -> List[Embedding]:
        raise NotImplementedError


class HashingEncoder(Encoder):
    """Hashed character n-grams projected to a fixed dimension and L2-normalised.

    Network-free and deterministic: the same text always yields the same
    vector, and strings sharing many n-grams land close together.
    """

    def __init__(self, dim: int = 64, ngram_range: Tuple[int, int] = (2, 4)):
        self.dim = dim
        self.vectorizer = HashingVectorizer(
            analyzer="char_wb",
            ngram_range=ngram_range,
            n_features=dim,
            alternate_sign=True,
            norm=None,
            lowercase=True,
        )

    def encode_batch(self, texts: Sequence[str]) -> List[Embedding]:
        for text in texts:
            if not text or not text.strip():
                raise EncoderError("cannot encode empty text")
        counts = self.vectorizer.transform(list(texts)).toarray().astype(np.float64)
        out = []
        for text, row in zip(texts, counts):
            if not np.any(row):
                raise EncoderError(f"text hashes to the zero vector: {text[:40]!r}")
            out.append(row / np.linalg.norm(row))
        return out


class RemoteEncoder(Encoder):
    """Batch embedding endpoint speaking the common {"data": [{"embedding": ...}]} shape"""

    def __init__(self, url: str, api_key: str = "", model: str = "", batch_size: int = 32,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 1.0):
        if not url:
            raise EncoderError("remote encoder selected but encoder_url is empty")
        self.url = url
        self.model = model
        self.batch_size = max(1, batch_size)
        self.timeout = timeout
        self.max_retries = max(1, max_retries)
        self.backoff = backoff
        self.dim = 0
        self.session = requests.Session()
        self.session.headers.update({"Content-Type": "application/json"})
        if api_key:
            self.session.headers.update({"Authorization": f"Bearer {api_key}"})

    def encode_batch(self, texts: Sequence[str]) -> List[Embedding]:
        for text in texts:
            if not text or not text.strip():
                raise EncoderError("cannot encode empty text")
        out: List[Embedding] = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start:start + self.batch_size])
            rows = self._post_with_retry(batch)
            if len(rows) != len(batch):
                raise EncoderError(f"encoder returned {len(rows)} vectors for {len(batch)} texts")
            for row in rows:
                try:
                    vec = as_embedding(row)
                except EmbeddingError as e:
                    raise EncoderError(f"encoder returned an unusable vector: {e}", cause=e)
                if self.dim and vec.shape[0] != self.dim:
                    raise EncoderError(f"encoder dimension changed from {self.dim} to {vec.shape[0]}")
                self.dim = vec.shape[0]
                out.append(vec)
        return out

    def _post_with_retry(self, batch: List[str]) -> List[List[float]]:
        last_error: Optional[EncoderError] = None
        for attempt in range(self.max_retries):
            try:
                return self._post(batch)
            except EncoderError as e:
                if not e.retryable:
                    raise
                last_error = e
                wait = self.backoff * (2 ** attempt)
                logger.warning("encoder call failed (%s), retry %d/%d in %.1fs",
                               e, attempt + 1, self.max_retries, wait)
                time.sleep(wait)
        raise last_error

    def _post(self, batch: List[str]) -> List[List[float]]:
        payload = {"input": batch}
        if self.model:
            payload["model"] = self.model
        try:
            response = self.session.post(self.url, json=payload, timeout=self.timeout)
        except requests.RequestException as e:
            raise EncoderError(f"encoder request failed: {e}", retryable=True, cause=e)

        if response.status_code == 429 or response.status_code >= 500:
            raise EncoderError(f"encoder HTTP {response.status_code}", retryable=True)
        if response.status_code != 200:
            raise EncoderError(f"encoder HTTP {response.status_code}: {response.text[:200]}")

        try:
            data = response.json()
        except ValueError as e:
            raise EncoderError("encoder response is not JSON", cause=e)
        if isinstance(data, dict) and "data" in data:
            return [item["embedding"] for item in data["data"]]
        if isinstance(data, list):
            return data
        raise EncoderError("unrecognised encoder response shape")


def build_encoder(config) -> Encoder:
    if config.encoder == "remote":
        return RemoteEncoder(
            url=config.encoder_url,
            api_key=config.encoder_api_key,
            model=config.encoder_model,
            batch_size=config.encoder_batch_size,
            timeout=config.llm_timeout,
            max_retries=config.llm_max_retries,
        )
    return HashingEncoder(dim=config.embedding_dim)


class VectorIndex:
    """Exact brute-force cosine index.

    Items are kept sorted by id once the index is frozen, so a stable sort on
    descending similarity breaks ties by ascending id.
    """

    def __init__(self, dim: Optional[int] = None):
        self.dim = dim
        self._pending: Dict[str, Embedding] = {}
        self._ids: List[str] = []
        self._matrix: Optional[np.ndarray] = None
        self.frozen = False

    def __len__(self):
        return len(self._ids) if self.frozen else len(self._pending)

    def add(self, item_id: str, vector: Embedding):
        if self.frozen:
            raise GraphFrozenError("vector index is frozen")
        vec = np.asarray(vector, dtype=np.float64)
        if self.dim is None:
            self.dim = vec.shape[0]
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"dimension mismatch for '{item_id}': expected {self.dim}, got {vec.shape[0]}")
        self._pending[item_id] = vec

    def freeze(self) -> "VectorIndex":
        if self.frozen:
            return self
        self._ids = sorted(self._pending)
        if self._ids:
            self._matrix = np.vstack([self._pending[i] for i in self._ids])
        else:
            self._matrix = np.zeros((0, self.dim or 0))
        self._pending = {}
        self.frozen = True
        return self

    @property
    def ids(self) -> List[str]:
        self.freeze()
        return list(self._ids)

    def similarities(self, query: Embedding) -> np.ndarray:
        """Cosine of the query against every stored item, in id order"""
        self.freeze()
        q = np.asarray(query, dtype=np.float64)
        if self.dim is not None and q.shape != (self.dim,):
            raise EmbeddingError(f"query dimension {q.shape[0]} does not match index dimension {self.dim}")
        return np.clip(self._matrix @ q, -1.0, 1.0)

    def top_k(self, query: Embedding, k: int) -> List[Tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        self.freeze()
        if not self._ids:
            raise EmbeddingError("top_k on an empty index")
        sims = self.similarities(query)
        order = np.argsort(-sims, kind="stable")[:k]
        return [(self._ids[i], float(sims[i])) for i in order]

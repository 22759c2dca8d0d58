import numpy as np
import pytest
import requests
from hypothesis import given
from hypothesis import strategies as st

from config import RunConfig
from errors import EmbeddingError, EncoderError, GraphFrozenError
from vector_space import HashingEncoder, RemoteEncoder, VectorIndex, as_embedding, build_encoder, cosine, is_unit

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_cosine_is_symmetric_and_bounded(a, b):
    try:
        u, v = as_embedding(a), as_embedding(b)
    except EmbeddingError:
        return
    assert -1.0 <= cosine(u, v) <= 1.0
    assert cosine(u, v) == cosine(v, u)


def test_as_embedding_normalises():
    vec = as_embedding([3.0, 4.0])
    assert is_unit(vec)
    assert vec.tolist() == pytest.approx([0.6, 0.8])


@pytest.mark.parametrize("bad", [[0.0, 0.0], [1.0, float("nan")], [], [[1.0, 2.0]]])
def test_as_embedding_rejects_unusable_vectors(bad):
    with pytest.raises(EmbeddingError):
        as_embedding(bad)


def test_cosine_dimension_mismatch():
    with pytest.raises(EmbeddingError):
        cosine(as_embedding([1, 0]), as_embedding([1, 0, 0]))


def test_hashing_encoder_is_deterministic_and_unit_norm():
    enc = HashingEncoder(64)
    a = enc.encode("Metformin lowers hepatic glucose production.")
    b = HashingEncoder(64).encode("Metformin lowers hepatic glucose production.")
    assert a.shape == (64,)
    assert is_unit(a)
    assert np.array_equal(a, b)
    assert cosine(a, enc.encode("metformin LOWERS hepatic glucose production.")) == pytest.approx(1.0)


def test_hashing_encoder_rejects_empty_text():
    with pytest.raises(EncoderError):
        HashingEncoder(64).encode("   ")


def test_build_encoder_picks_hashing_by_default():
    enc = build_encoder(RunConfig(embedding_dim=32))
    assert isinstance(enc, HashingEncoder)
    assert enc.encode("abc").shape == (32,)


def test_index_top_k_breaks_ties_by_id():
    index = VectorIndex()
    index.add("b", as_embedding([1, 0]))
    index.add("a", as_embedding([1, 0]))
    index.add("c", as_embedding([0, 1]))
    hits = index.top_k(as_embedding([1, 0]), 2)
    assert [h[0] for h in hits] == ["a", "b"]
    assert hits[0][1] == pytest.approx(1.0)


def test_hashing_encoder_unit_norm_over_a_corpus():
    enc = HashingEncoder(64)
    rng = np.random.default_rng(3)
    words = ["metformin", "insulin", "diabetes", "glucose", "liver", "risk", "heart", "drug", "approved", "FDA"]
    corpus = [" ".join(rng.choice(words, size=int(rng.integers(1, 12)))) for _ in range(50)]
    for vec in enc.encode_batch(corpus):
        assert abs(float(np.linalg.norm(vec)) - 1.0) < 1e-9


def test_index_top_k_matches_full_sort():
    rng = np.random.default_rng(7)
    index = VectorIndex()
    vectors = {f"v{i:03d}": as_embedding(rng.normal(size=16)) for i in range(500)}
    for item_id, vec in vectors.items():
        index.add(item_id, vec)
    index.freeze()
    for _ in range(5):
        query = as_embedding(rng.normal(size=16))
        oracle = sorted(((float(vec @ query), item_id) for item_id, vec in vectors.items()),
                        key=lambda t: (-t[0], t[1]))[:25]
        hits = index.top_k(query, 25)
        assert [h[0] for h in hits] == [item_id for _, item_id in oracle]
        assert [h[1] for h in hits] == pytest.approx([s for s, _ in oracle], abs=1e-12)


def test_index_is_read_only_after_freeze():
    index = VectorIndex(2)
    index.add("a", as_embedding([1, 0]))
    index.freeze()
    with pytest.raises(GraphFrozenError):
        index.add("b", as_embedding([0, 1]))


def test_index_errors():
    with pytest.raises(EmbeddingError):
        VectorIndex(2).top_k(as_embedding([1, 0]), 1)
    index = VectorIndex(2)
    with pytest.raises(EmbeddingError):
        index.add("a", as_embedding([1, 0, 0]))
    index.add("a", as_embedding([1, 0]))
    with pytest.raises(ValueError):
        index.top_k(as_embedding([1, 0]), 0)
    with pytest.raises(EmbeddingError):
        index.similarities(as_embedding([1, 0, 0]))


class FakeResponse:
    def __init__(self, status_code, payload=None):
        self.status_code = status_code
        self._payload = payload
        self.text = "" if payload is None else str(payload)

    def json(self):
        if self._payload is None:
            raise ValueError("no body")
        return self._payload


def test_remote_encoder_batches_and_retries(monkeypatch):
    replies = [
        FakeResponse(503),
        FakeResponse(200, {"data": [{"embedding": [1, 0]}, {"embedding": [0, 2]}]}),
        FakeResponse(200, [[3, 4]]),
    ]
    sent = []

    def fake_post(url, json=None, timeout=None):
        sent.append(json["input"])
        return replies.pop(0)

    monkeypatch.setattr("vector_space.time.sleep", lambda s: None)
    enc = RemoteEncoder("http://encoder.local/embed", batch_size=2, max_retries=2)
    monkeypatch.setattr(enc.session, "post", fake_post)
    vecs = enc.encode_batch(["one", "two", "three"])
    assert sent == [["one", "two"], ["one", "two"], ["three"]]
    assert [v.tolist() for v in vecs] == [[1.0, 0.0], [0.0, 1.0], pytest.approx([0.6, 0.8])]


def test_remote_encoder_failures(monkeypatch):
    monkeypatch.setattr("vector_space.time.sleep", lambda s: None)
    with pytest.raises(EncoderError):
        RemoteEncoder("")

    enc = RemoteEncoder("http://encoder.local/embed", max_retries=2)
    monkeypatch.setattr(enc.session, "post", lambda *a, **k: FakeResponse(400, {"error": "bad"}))
    with pytest.raises(EncoderError) as err:
        enc.encode("text")
    assert not err.value.retryable

    def offline(*args, **kwargs):
        raise requests.ConnectionError("offline")

    monkeypatch.setattr(enc.session, "post", offline)
    with pytest.raises(EncoderError) as err:
        enc.encode("text")
    assert err.value.retryable

import os

import pytest

import ingest
from aeg_graph import AtomEntityGraph, EntityNode, KnowledgeAtom, Triple, entity_id_for
from config import RunConfig
from llm_gateway import LlmGateway, MockChatBackend, build_gateway
from vector_space import HashingEncoder, as_embedding

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
FIXTURES = os.path.join(ROOT, "fixtures")


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def config():
    return RunConfig(fixtures_path=os.path.join(FIXTURES, "gateway_fixtures.json"), workers=2)


@pytest.fixture
def gateway(config):
    return build_gateway(config)


@pytest.fixture
def encoder():
    return HashingEncoder(64)


@pytest.fixture
def make_gateway():
    """Gateway over an inline list of mock fixture entries"""
    def make(entries):
        return LlmGateway(MockChatBackend(entries))
    return make


@pytest.fixture
def corpus():
    return ingest.load_corpus(os.path.join(FIXTURES, "mini_corpus.jsonl"))


@pytest.fixture
def mini_graph(corpus, gateway, encoder, config):
    graph, _ = ingest.build_graph(corpus, gateway, encoder, config)
    return graph


@pytest.fixture
def toy_graph():
    """Three entities on axis vectors, three atoms across two documents.

    alpha and beta share a relation; the two doc1 atoms overlap in span and
    the doc2 atom has none.
    """
    alpha, beta, gamma = (EntityNode(entity_id_for(n), n, as_embedding(v))
                          for n, v in (("alpha", [1, 0, 0]), ("beta", [0, 1, 0]), ("gamma", [0, 0, 1])))
    atoms = [
        KnowledgeAtom("doc1:0:0", "alpha meets beta", "doc1", (0, 16),
                      frozenset({alpha.id, beta.id}), as_embedding([1, 1, 0])),
        KnowledgeAtom("doc1:0:1", "beta keeps going", "doc1", (10, 30),
                      frozenset({beta.id}), as_embedding([0, 1, 0.2])),
        KnowledgeAtom("doc2:0:0", "gamma stands alone", "doc2", None,
                      frozenset({gamma.id}), as_embedding([0, 0.1, 1])),
    ]
    graph = AtomEntityGraph()
    graph.add_document_extraction("doc1", [alpha, beta], atoms[:2], [Triple(alpha.id, "meets", beta.id)])
    graph.add_document_extraction("doc2", [gamma], atoms[2:], [])
    graph.build_relevance_edges()
    graph.build_synonym_edges()
    return graph.freeze()

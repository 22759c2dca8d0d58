import itertools
import json
import os

import numpy as np
import pytest

from aeg_graph import AtomEntityGraph, EntityNode, KnowledgeAtom, Triple, entity_id_for, normalize_name
from errors import DuplicateAtomError, EmbeddingError, GraphError, GraphFrozenError, SnapshotError, UnknownEntityError
from vector_space import as_embedding


def entity(name, vec=None):
    return EntityNode(entity_id_for(name), name, None if vec is None else as_embedding(vec))


def random_extraction(rng):
    """Random entities clustered around a few directions, atoms and labelled triples"""
    n_ent = int(rng.integers(2, 25))
    centers = rng.standard_normal((int(rng.integers(1, 5)), 8))
    names = [f"entity {i}" for i in range(n_ent)]
    nodes = []
    for name in names:
        base = centers[int(rng.integers(len(centers)))]
        nodes.append(entity(name, base + 0.25 * rng.standard_normal(8)))
    ids = [n.id for n in nodes]
    atoms = []
    for j in range(int(rng.integers(1, 15))):
        members = rng.choice(ids, size=int(rng.integers(1, min(4, n_ent) + 1)), replace=False)
        atoms.append(KnowledgeAtom(f"d:0:{j}", f"atom {j}", "d", entity_ids=frozenset(str(m) for m in members)))
    triples = [
        Triple(ids[int(rng.integers(n_ent))], f"rel_{int(rng.integers(4))}", ids[int(rng.integers(n_ent))], "d")
        for _ in range(int(rng.integers(0, 40)))
    ]
    return nodes, atoms, triples


def test_edge_construction_matches_brute_force_oracles():
    rng = np.random.default_rng(7)
    for _ in range(100):
        nodes, atoms, triples = random_extraction(rng)
        g = AtomEntityGraph()
        g.add_document_extraction("d", nodes, atoms, triples)
        g.build_relevance_edges()
        g.build_synonym_edges(k_neighbors=2047, threshold=0.8)

        assert set(g.containment_edges.values()) <= {1}
        assert set(g.containment_edges) == {(a.id, e) for a in atoms for e in a.entity_ids}

        labels = {}
        for t in triples:
            if t.head != t.tail:
                key = tuple(sorted((t.head, t.tail)))
                labels.setdefault(key, set()).add(t.relation_label)
        assert g.relevance_edges == {k: len(v) for k, v in labels.items()}

        ids = sorted(g.entities)
        expected = {}
        for a, b in itertools.combinations(ids, 2):
            sim = float(np.dot(g.entities[a].embedding, g.entities[b].embedding))
            if sim >= 0.8:
                expected[(a, b)] = min(sim, 1.0)
        assert g.synonym_edges == expected


def test_synonym_top_k_limits_neighbours():
    g = AtomEntityGraph()
    g.add_document_extraction("d", [entity("a", [1, 0]), entity("b", [1, 0.01]), entity("c", [1, 0.02])], [], [])
    g.build_synonym_edges(k_neighbors=1, threshold=0.5)
    a, b, c = (entity_id_for(n) for n in "abc")
    # a and c both pick b; b's single pick is one of them
    assert all(w >= 0.5 for w in g.synonym_edges.values())
    assert (tuple(sorted((a, b))) in g.synonym_edges) and (tuple(sorted((b, c))) in g.synonym_edges)
    assert tuple(sorted((a, c))) not in g.synonym_edges


def test_entities_merge_by_normalised_name():
    g = AtomEntityGraph()
    first = entity("Type 2  Diabetes")
    g.add_document_extraction("d1", [first], [KnowledgeAtom("d1:0:0", "x", "d1", entity_ids={first.id})], [])
    second = EntityNode("local-id", "type 2 diabetes")
    g.add_document_extraction("d2", [second], [KnowledgeAtom("d2:0:0", "y", "d2", entity_ids={"local-id"})], [])
    assert len(g.entities) == 1
    node = g.entities[first.id]
    assert node.canonical_name == "Type 2  Diabetes"
    assert node.mention_count == 2
    assert g.atoms["d2:0:0"].entity_ids == frozenset({first.id})
    assert normalize_name(" Type 2\tDiabetes ") == "type 2 diabetes"


def test_unknown_entity_reference_is_rejected_without_partial_insert():
    g = AtomEntityGraph()
    alpha = entity("alpha", [1, 0])
    with pytest.raises(UnknownEntityError):
        g.add_document_extraction("d", [alpha], [KnowledgeAtom("d:0:0", "x", "d", entity_ids={"e_missing"})], [])
    assert not g.atoms
    assert not g.entities
    assert g.dim is None
    with pytest.raises(UnknownEntityError):
        g.add_document_extraction("d", [alpha], [], [Triple(alpha.id, "r", "e_missing")])
    assert not g.entities and not g.triples

    g.add_document_extraction("d", [alpha], [KnowledgeAtom("d:0:0", "x", "d", entity_ids={alpha.id})], [])
    with pytest.raises(DuplicateAtomError):
        g.add_document_extraction("d", [entity("beta", [0, 1])],
                                  [KnowledgeAtom("d:0:0", "changed", "d", entity_ids={alpha.id})], [])
    assert set(g.entities) == {alpha.id}
    g.build_synonym_edges(k_neighbors=5, threshold=0.5)
    assert g.entities[alpha.id].mention_count == 1


def test_atom_and_entity_ids_must_not_collide():
    alpha = entity("alpha")
    g = AtomEntityGraph()
    with pytest.raises(GraphError, match="already an entity id"):
        g.add_document_extraction("d", [alpha], [KnowledgeAtom(alpha.id, "x", "d", entity_ids={alpha.id})], [])
    assert not g.entities
    g.add_document_extraction("d", [], [KnowledgeAtom("d:0:0", "x", "d")], [])
    with pytest.raises(GraphError, match="already an atom id"):
        g.add_document_extraction("d", [EntityNode("d:0:0", "beta")], [], [])


def test_reingesting_an_identical_document_changes_nothing():
    rng = np.random.default_rng(3)
    nodes, atoms, triples = random_extraction(rng)
    g = AtomEntityGraph().add_document_extraction("d", nodes, atoms, triples)
    before = g.structure()
    g.add_document_extraction("d", nodes, atoms, triples)
    assert g.structure() == before


def test_duplicate_atoms():
    e = entity("a")
    atom = KnowledgeAtom("d:0:0", "text", "d", entity_ids={e.id})
    g = AtomEntityGraph().add_document_extraction("d", [e], [atom], [])
    g.add_document_extraction("d", [], [KnowledgeAtom("d:0:0", "text", "d", entity_ids={e.id})], [])
    assert g.entities[e.id].mention_count == 1
    with pytest.raises(DuplicateAtomError):
        g.add_document_extraction("d", [], [KnowledgeAtom("d:0:0", "other text", "d", entity_ids={e.id})], [])


def test_triples_dedupe_and_self_relations_are_kept_but_not_edges():
    a, b = entity("a"), entity("b")
    triples = [Triple(a.id, "r", b.id), Triple(a.id, "r", b.id), Triple(b.id, "s", a.id), Triple(a.id, "is", a.id)]
    g = AtomEntityGraph().add_document_extraction("d", [a, b], [], triples)
    assert len(g.triples) == 3
    g.build_relevance_edges()
    assert g.relevance_edges == {tuple(sorted((a.id, b.id))): 2}


def test_invalid_records():
    with pytest.raises(GraphError):
        EntityNode("e", "  ")
    with pytest.raises(GraphError):
        KnowledgeAtom("a", "", "d")
    with pytest.raises(GraphError):
        Triple("h", " ", "t")
    g = AtomEntityGraph()
    with pytest.raises(EmbeddingError):
        g.add_document_extraction("d", [EntityNode("e_x", "x", np.array([1.0, 1.0]))], [], [])


def test_frozen_graph_rejects_mutation(toy_graph):
    with pytest.raises(GraphFrozenError):
        toy_graph.add_document_extraction("d3", [], [], [])
    with pytest.raises(GraphFrozenError):
        toy_graph.build_relevance_edges()


def test_views_and_stats(toy_graph):
    ids = toy_graph.node_ids()
    assert ids[:3] == sorted(toy_graph.entities)
    assert ids[3:] == ["doc1:0:0", "doc1:0:1", "doc2:0:0"]
    stats = toy_graph.compute_stats().to_dict()
    assert stats["entities"] == 3 and stats["atoms"] == 3
    assert stats["containment"] == 4 and stats["related"] == 1 and stats["synonym"] == 0
    assert stats["edges"] == 5
    assert stats["avg_degree"] == pytest.approx(2 * 5 / 6)
    beta = entity_id_for("beta")
    kinds = {n["node"]: n["kind"] for n in toy_graph.neighborhood(beta)}
    assert kinds == {"doc1:0:0": "containment", "doc1:0:1": "containment", entity_id_for("alpha"): "relevance"}
    with pytest.raises(GraphError):
        toy_graph.neighborhood("nowhere")


def test_snapshot_roundtrip(toy_graph, tmp_path):
    toy_graph.save(str(tmp_path / "snap"))
    loaded = AtomEntityGraph.load(str(tmp_path / "snap"))
    assert loaded.frozen
    assert loaded.structure() == toy_graph.structure()
    assert loaded.dim == 3

    toy_graph.save(str(tmp_path / "again"))
    for name in os.listdir(tmp_path / "snap"):
        assert (tmp_path / "snap" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_snapshot_version_and_corruption_checks(toy_graph, tmp_path):
    path = tmp_path / "snap"
    toy_graph.save(str(path))
    manifest = json.loads((path / "manifest.json").read_text())

    manifest["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(SnapshotError, match="version"):
        AtomEntityGraph.load(str(path))

    manifest["format_version"] = 1
    (path / "manifest.json").write_text(json.dumps(manifest))
    (path / "containment.jsonl").write_text("")
    with pytest.raises(SnapshotError, match="containment"):
        AtomEntityGraph.load(str(path))

    with pytest.raises(SnapshotError):
        AtomEntityGraph.load(str(tmp_path / "missing"))

    (path / "manifest.json").write_text("[1, 2, 3]")
    with pytest.raises(SnapshotError, match="JSON object"):
        AtomEntityGraph.load(str(path))


def relevance_only_graph(names, pairs):
    g = AtomEntityGraph().add_document_extraction(
        "d", [entity(n) for n in names], [], [Triple(entity_id_for(a), "linked", entity_id_for(b)) for a, b in pairs])
    g.build_relevance_edges()
    return g.freeze()


def test_clustering_of_triangle_and_path():
    triangle = relevance_only_graph("abc", [("a", "b"), ("b", "c"), ("c", "a")]).compute_stats()
    assert triangle.avg_clustering == 1.0
    path = relevance_only_graph("abc", [("a", "b"), ("b", "c")]).compute_stats()
    assert path.avg_clustering == 0.0


def brute_force_clustering(nodes, edges):
    adj = {n: set() for n in nodes}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    total = 0.0
    for n in nodes:
        k = len(adj[n])
        if k < 2:
            continue
        closed = sum(1 for u, v in itertools.combinations(sorted(adj[n]), 2) if v in adj[u])
        total += closed / (k * (k - 1) / 2)
    return total / len(nodes)


def test_clustering_matches_triangle_count_oracle():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = int(rng.integers(3, 201))
        names = [f"n{i}" for i in range(n)]
        m = int(rng.integers(1, 4 * n))
        pairs = {tuple(sorted(rng.choice(n, size=2, replace=False).tolist())) for _ in range(m)}
        pairs = [(names[a], names[b]) for a, b in pairs]
        stats = relevance_only_graph(names, pairs).compute_stats()
        ids = [entity_id_for(x) for x in names]
        edges = [(entity_id_for(a), entity_id_for(b)) for a, b in pairs]
        assert stats.avg_clustering == pytest.approx(brute_force_clustering(ids, edges), abs=1e-12)

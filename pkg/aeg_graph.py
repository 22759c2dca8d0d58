"""
Atom-Entity Graph: atoms, entities and the three weighted edge families.

Containment edges link an atom to every entity it mentions (weight 1).
Relevance edges link two entities with the number of distinct relation labels
seen between them. Synonym edges link two entities whose embeddings have
cosine similarity at or above a threshold.
"""

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import networkx as nx
import numpy as np

from errors import (
    DuplicateAtomError,
    EmbeddingError,
    GraphError,
    GraphFrozenError,
    GraphNotFrozenError,
    SnapshotError,
    UnknownEntityError,
)
from vector_space import NORM_TOLERANCE, VectorIndex, is_unit

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SNAPSHOT_FILES = ("entities", "atoms", "triples", "containment", "relevance", "synonym")

EdgeKey = Tuple[str, str]


def normalize_name(name: str) -> str:
    return re.sub(r"\s+", " ", name).strip().casefold()


def entity_id_for(name: str) -> str:
    """Stable entity id derived from the normalised canonical name"""
    digest = hashlib.sha1(normalize_name(name).encode("utf-8")).hexdigest()[:12]
    return f"e_{digest}"


def _pair(a: str, b: str) -> EdgeKey:
    return (a, b) if a < b else (b, a)


@dataclass
class EntityNode:
    id: str
    canonical_name: str
    embedding: Optional[np.ndarray] = None
    mention_count: int = 0

    def __post_init__(self):
        if not self.canonical_name or not self.canonical_name.strip():
            raise GraphError(f"entity '{self.id}' has an empty canonical name")


@dataclass
class KnowledgeAtom:
    id: str
    text: str
    source_doc: str
    span_hint: Optional[Tuple[int, int]] = None
    entity_ids: FrozenSet[str] = frozenset()
    embedding: Optional[np.ndarray] = None
    chunk_index: int = 0

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise GraphError(f"atom '{self.id}' has empty text")
        self.entity_ids = frozenset(self.entity_ids)
        if self.span_hint is not None:
            start, end = self.span_hint
            self.span_hint = (int(start), int(end))


@dataclass(frozen=True)
class Triple:
    head: str
    relation_label: str
    tail: str
    source_doc: str = ""

    def __post_init__(self):
        if not self.relation_label or not self.relation_label.strip():
            raise GraphError(f"triple ({self.head}, ?, {self.tail}) has an empty relation label")

    @property
    def is_self_relation(self) -> bool:
        return self.head == self.tail


@dataclass
class GraphStats:
    node_count: int
    entity_count: int
    atom_count: int
    edge_count_by_kind: Dict[str, int]
    avg_degree: float
    avg_clustering: float
    projected_edge_count: int = 0

    @property
    def edge_count(self) -> int:
        return sum(self.edge_count_by_kind.values())

    def to_dict(self) -> Dict:
        return {
            "nodes": self.node_count,
            "entities": self.entity_count,
            "atoms": self.atom_count,
            "edges": self.edge_count,
            "containment": self.edge_count_by_kind.get("containment", 0),
            "related": self.edge_count_by_kind.get("relevance", 0),
            "synonym": self.edge_count_by_kind.get("synonym", 0),
            "projected_edges": self.projected_edge_count,
            "avg_degree": self.avg_degree,
            "avg_clustering": self.avg_clustering,
        }


class AtomEntityGraph:
    """Heterogeneous weighted graph over atoms and entities.

    Construction is single-writer; after freeze() every mutating call raises
    GraphFrozenError and the graph may be shared freely between readers.
    """

    def __init__(self):
        self.entities: Dict[str, EntityNode] = {}
        self.atoms: Dict[str, KnowledgeAtom] = {}
        self.triples: List[Triple] = []
        self.relevance_edges: Dict[EdgeKey, int] = {}
        self.synonym_edges: Dict[EdgeKey, float] = {}
        self.hyperparameters: Dict = {}
        self.frozen = False
        self.dim: Optional[int] = None
        self._name_index: Dict[str, str] = {}
        self._triple_set: Set[Triple] = set()
        self._atom_index: Optional[VectorIndex] = None
        self._entity_index: Optional[VectorIndex] = None

    # --- construction ------------------------------------------------------

    def _check_mutable(self):
        if self.frozen:
            raise GraphFrozenError("graph is frozen")

    def _check_embedding(self, owner: str, vec: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if vec is None:
            return None
        vec = np.asarray(vec, dtype=np.float64)
        if self.dim is None:
            self.dim = vec.shape[0]
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"'{owner}' embedding has dimension {vec.shape[0]}, graph uses {self.dim}")
        if not is_unit(vec, NORM_TOLERANCE):
            raise EmbeddingError(f"'{owner}' embedding is not unit-norm")
        return vec

    def _stage_entities(self, entities: List[EntityNode]) -> Tuple[Dict[str, str], Dict[str, EntityNode],
                                                                   Dict[str, np.ndarray]]:
        """Map incoming entity ids onto graph ids without touching the graph.

        Returns (remap, new nodes by id, embeddings to fill in on existing nodes).
        """
        remap: Dict[str, str] = {}
        fresh: Dict[str, EntityNode] = {}
        fresh_names: Dict[str, str] = {}
        fills: Dict[str, np.ndarray] = {}
        for node in entities:
            key = normalize_name(node.canonical_name)
            existing_id = self._name_index.get(key) or fresh_names.get(key)
            if existing_id is not None:
                target = self.entities.get(existing_id) or fresh[existing_id]
                if target.embedding is None and node.embedding is not None and existing_id not in fills:
                    fills[existing_id] = self._check_embedding(existing_id, node.embedding)
                remap[node.id] = existing_id
                continue
            if node.id in self.entities or node.id in fresh:
                owner = (self.entities.get(node.id) or fresh[node.id]).canonical_name
                raise GraphError(f"entity id '{node.id}' already names '{owner}'")
            if node.id in self.atoms:
                raise GraphError(f"entity id '{node.id}' is already an atom id")
            fresh[node.id] = EntityNode(
                id=node.id,
                canonical_name=node.canonical_name.strip(),
                embedding=self._check_embedding(node.id, node.embedding),
            )
            fresh_names[key] = node.id
            remap[node.id] = node.id
        return remap, fresh, fills

    def add_document_extraction(self, doc_id: str, entities: Iterable[EntityNode],
                                atoms: Iterable[KnowledgeAtom],
                                triples: Iterable[Triple]) -> "AtomEntityGraph":
        """Insert one document's extraction, merging entities by canonical name.

        All-or-nothing: a rejected call leaves the graph as it was.
        """
        self._check_mutable()
        entities, atoms, triples = list(entities), list(atoms), list(triples)
        dim_before = self.dim
        try:
            remap, fresh, fills = self._stage_entities(entities)

            def resolve(atom_id: str, eid: str) -> str:
                if eid in remap:
                    return remap[eid]
                if eid in self.entities:
                    return eid
                raise UnknownEntityError(atom_id, eid)

            staged: List[KnowledgeAtom] = []
            staged_ids: Set[str] = set()
            for atom in atoms:
                if atom.id in self.entities or atom.id in fresh:
                    raise GraphError(f"atom id '{atom.id}' is already an entity id")
                resolved = frozenset(resolve(atom.id, eid) for eid in atom.entity_ids)
                candidate = KnowledgeAtom(
                    id=atom.id,
                    text=atom.text,
                    source_doc=atom.source_doc or doc_id,
                    span_hint=atom.span_hint,
                    entity_ids=resolved,
                    embedding=self._check_embedding(atom.id, atom.embedding),
                    chunk_index=atom.chunk_index,
                )
                existing = self.atoms.get(atom.id)
                if existing is None and atom.id in staged_ids:
                    existing = next(a for a in staged if a.id == atom.id)
                if existing is not None:
                    if not _same_atom(existing, candidate):
                        raise DuplicateAtomError(atom.id)
                    continue
                staged.append(candidate)
                staged_ids.add(atom.id)

            staged_triples = []
            for triple in triples:
                head = resolve(f"triple:{triple.relation_label}", triple.head)
                tail = resolve(f"triple:{triple.relation_label}", triple.tail)
                staged_triples.append(Triple(head, triple.relation_label.strip(), tail, triple.source_doc or doc_id))
        except Exception:
            self.dim = dim_before
            raise

        for eid, node in fresh.items():
            self.entities[eid] = node
            self._name_index[normalize_name(node.canonical_name)] = eid
        for eid, vec in fills.items():
            self.entities[eid].embedding = vec

        for atom in staged:
            self.atoms[atom.id] = atom
            for eid in atom.entity_ids:
                self.entities[eid].mention_count += 1

        for triple in staged_triples:
            if triple in self._triple_set:
                continue
            if triple.is_self_relation:
                logger.debug("self-relation kept for audit: (%s, %s, %s)", triple.head, triple.relation_label, triple.tail)
            self._triple_set.add(triple)
            self.triples.append(triple)

        self._atom_index = None
        self._entity_index = None
        return self

    def build_relevance_edges(self) -> Dict[EdgeKey, int]:
        """Recompute entity-entity weights as counts of distinct relation labels"""
        self._check_mutable()
        labels: Dict[EdgeKey, Set[str]] = {}
        for t in self.triples:
            if t.is_self_relation:
                continue
            labels.setdefault(_pair(t.head, t.tail), set()).add(t.relation_label)
        self.relevance_edges = {pair: len(ls) for pair, ls in labels.items() if ls}
        return self.relevance_edges

    def build_synonym_edges(self, k_neighbors: int = 2047, threshold: float = 0.8,
                            block_size: int = 1024) -> Dict[EdgeKey, float]:
        """Link each entity to those of its k nearest neighbours with cosine >= threshold.

        Neighbour ranking ties go to the smaller entity id. The pair set is
        closed under symmetry and every weight is the dot product taken in
        ascending id order, so both directions agree bit for bit.
        """
        self._check_mutable()
        ids = sorted(self.entities)
        for eid in ids:
            if self.entities[eid].embedding is None:
                raise EmbeddingError(f"entity '{eid}' ({self.entities[eid].canonical_name}) has no embedding")
        self.synonym_edges = {}
        self.hyperparameters.update({"synonymy_edge_topk": k_neighbors, "synonymy_edge_sim_threshold": threshold})
        n = len(ids)
        if n < 2 or k_neighbors < 1:
            return self.synonym_edges

        Z = np.vstack([self.entities[eid].embedding for eid in ids])
        candidates: Set[Tuple[int, int]] = set()
        for start in range(0, n, block_size):
            stop = min(n, start + block_size)
            sims = Z[start:stop] @ Z.T
            for row, i in enumerate(range(start, stop)):
                sims[row, i] = -np.inf
                if k_neighbors >= n - 1:
                    neighbours = np.nonzero(sims[row] >= threshold - 1e-9)[0]
                else:
                    neighbours = np.argsort(-sims[row], kind="stable")[:k_neighbors]
                for j in neighbours:
                    candidates.add((i, int(j)) if i < j else (int(j), i))

        for i, j in sorted(candidates):
            weight = float(np.dot(Z[i], Z[j]))
            if weight >= threshold:
                self.synonym_edges[(ids[i], ids[j])] = min(weight, 1.0)
        return self.synonym_edges

    def freeze(self) -> "AtomEntityGraph":
        self.frozen = True
        return self

    def require_frozen(self):
        if not self.frozen:
            raise GraphNotFrozenError("operation needs a frozen graph")

    # --- views -------------------------------------------------------------

    @property
    def containment_edges(self) -> Dict[EdgeKey, int]:
        return {(aid, eid): 1 for aid, atom in self.atoms.items() for eid in atom.entity_ids}

    def atom_index(self) -> VectorIndex:
        if self._atom_index is None or not self.frozen:
            index = VectorIndex(self.dim)
            for aid, atom in self.atoms.items():
                if atom.embedding is None:
                    raise EmbeddingError(f"atom '{aid}' has no embedding")
                index.add(aid, atom.embedding)
            self._atom_index = index.freeze()
        return self._atom_index

    def entity_index(self) -> VectorIndex:
        if self._entity_index is None or not self.frozen:
            index = VectorIndex(self.dim)
            for eid, node in self.entities.items():
                if node.embedding is not None:
                    index.add(eid, node.embedding)
            self._entity_index = index.freeze()
        return self._entity_index

    def node_ids(self) -> List[str]:
        """All node ids: entities then atoms, each block sorted"""
        return sorted(self.entities) + sorted(self.atoms)

    def weighted_edges(self) -> List[Tuple[str, str, float, str]]:
        """Every stored edge as (u, v, weight, kind), in a deterministic order"""
        edges = [(a, e, 1.0, "containment") for (a, e) in sorted(self.containment_edges)]
        edges += [(u, v, float(w), "relevance") for (u, v), w in sorted(self.relevance_edges.items())]
        edges += [(u, v, w, "synonym") for (u, v), w in sorted(self.synonym_edges.items())]
        return edges

    def projection(self) -> nx.Graph:
        """Undirected simple projection over all nodes"""
        g = nx.Graph()
        g.add_nodes_from(self.node_ids())
        g.add_edges_from((u, v) for u, v, _, _ in self.weighted_edges() if u != v)
        return g

    def neighborhood(self, node_id: str) -> List[Dict]:
        """1-hop neighbours of a node with edge kind and weight"""
        if node_id not in self.entities and node_id not in self.atoms:
            raise GraphError(f"unknown node '{node_id}'")
        found = []
        for u, v, w, kind in self.weighted_edges():
            if node_id in (u, v):
                other = v if u == node_id else u
                label = self.entities[other].canonical_name if other in self.entities else self.atoms[other].text
                found.append({"node": other, "label": label, "kind": kind, "weight": w})
        found.sort(key=lambda item: (-item["weight"], item["kind"], item["node"]))
        return found

    def compute_stats(self) -> GraphStats:
        self.require_frozen()
        g = self.projection()
        n = g.number_of_nodes()
        m = g.number_of_edges()
        return GraphStats(
            node_count=n,
            entity_count=len(self.entities),
            atom_count=len(self.atoms),
            edge_count_by_kind={
                "containment": len(self.containment_edges),
                "relevance": len(self.relevance_edges),
                "synonym": len(self.synonym_edges),
            },
            avg_degree=(2.0 * m / n) if n else 0.0,
            avg_clustering=float(nx.average_clustering(g)) if n else 0.0,
            projected_edge_count=m,
        )

    def structure(self) -> Dict:
        """Canonical structural content, used for equality checks"""
        def emb(vec):
            return None if vec is None else np.asarray(vec, dtype="<f8").tobytes()

        return {
            "entities": {eid: (e.canonical_name, e.mention_count, emb(e.embedding)) for eid, e in self.entities.items()},
            "atoms": {
                aid: (a.text, a.source_doc, a.span_hint, tuple(sorted(a.entity_ids)), a.chunk_index, emb(a.embedding))
                for aid, a in self.atoms.items()
            },
            "triples": list(self.triples),
            "containment": self.containment_edges,
            "relevance": dict(self.relevance_edges),
            "synonym": dict(self.synonym_edges),
        }

    # --- persistence -------------------------------------------------------

    def save(self, path: str):
        """Write a snapshot directory; floats go to vectors.bin as little-endian f8"""
        self.require_frozen()
        os.makedirs(path, exist_ok=True)
        blob: List[np.ndarray] = []
        offset = 0

        def put(values) -> Dict:
            nonlocal offset
            arr = np.asarray(values, dtype="<f8").ravel()
            ref = {"offset": offset, "length": int(arr.size)}
            blob.append(arr)
            offset += arr.size
            return ref

        records = {name: [] for name in SNAPSHOT_FILES}
        for eid in sorted(self.entities):
            e = self.entities[eid]
            records["entities"].append({
                "id": eid, "canonical_name": e.canonical_name, "mention_count": e.mention_count,
                "embedding": None if e.embedding is None else put(e.embedding),
            })
        for aid in sorted(self.atoms):
            a = self.atoms[aid]
            records["atoms"].append({
                "id": aid, "text": a.text, "source_doc": a.source_doc, "chunk_index": a.chunk_index,
                "span_hint": list(a.span_hint) if a.span_hint is not None else None,
                "entity_ids": sorted(a.entity_ids),
                "embedding": None if a.embedding is None else put(a.embedding),
            })
        for t in self.triples:
            records["triples"].append({"head": t.head, "relation_label": t.relation_label,
                                       "tail": t.tail, "source_doc": t.source_doc})
        for (aid, eid) in sorted(self.containment_edges):
            records["containment"].append({"atom": aid, "entity": eid, "weight": 1})
        for (u, v), w in sorted(self.relevance_edges.items()):
            records["relevance"].append({"u": u, "v": v, "weight": int(w)})
        for (u, v), w in sorted(self.synonym_edges.items()):
            records["synonym"].append({"u": u, "v": v, "weight": put([w])})

        for name, rows in records.items():
            with open(os.path.join(path, f"{name}.jsonl"), "w", encoding="utf-8", newline="\n") as f:
                for row in rows:
                    f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

        data = np.concatenate(blob) if blob else np.zeros(0, dtype="<f8")
        with open(os.path.join(path, "vectors.bin"), "wb") as f:
            f.write(data.astype("<f8").tobytes())

        manifest = {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "hyperparameters": self.hyperparameters,
            "counts": {name: len(rows) for name, rows in records.items()},
            "vectors": {"file": "vectors.bin", "dtype": "<f8", "length": int(data.size)},
        }
        with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str) -> "AtomEntityGraph":
        manifest_path = os.path.join(path, "manifest.json")
        if not os.path.exists(manifest_path):
            raise SnapshotError(f"no manifest.json in {path}")
        try:
            with open(manifest_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except ValueError as e:
            raise SnapshotError(f"malformed manifest: {e}")
        if not isinstance(manifest, dict) or not isinstance(manifest.get("vectors", {}), dict):
            raise SnapshotError("manifest.json must hold a JSON object")
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise SnapshotError(f"snapshot format version {version} is not supported (expected {FORMAT_VERSION})")

        try:
            blob = np.fromfile(os.path.join(path, "vectors.bin"), dtype="<f8")
        except OSError as e:
            raise SnapshotError(f"cannot read vectors.bin: {e}")
        expected = manifest.get("vectors", {}).get("length")
        if expected is not None and blob.size != expected:
            raise SnapshotError(f"vectors.bin holds {blob.size} floats, manifest says {expected}")

        def take(ref) -> Optional[np.ndarray]:
            if ref is None:
                return None
            start, length = ref["offset"], ref["length"]
            if start < 0 or start + length > blob.size:
                raise SnapshotError(f"vector reference {ref} is out of range")
            return blob[start:start + length].astype(np.float64)

        g = cls()
        g.dim = manifest.get("dim")
        g.hyperparameters = manifest.get("hyperparameters", {})
        try:
            for row in _read_jsonl(path, "entities"):
                node = EntityNode(row["id"], row["canonical_name"], take(row["embedding"]), row["mention_count"])
                g.entities[node.id] = node
                g._name_index[normalize_name(node.canonical_name)] = node.id
            for row in _read_jsonl(path, "atoms"):
                span = tuple(row["span_hint"]) if row["span_hint"] is not None else None
                atom = KnowledgeAtom(row["id"], row["text"], row["source_doc"], span,
                                     frozenset(row["entity_ids"]), take(row["embedding"]), row["chunk_index"])
                g.atoms[atom.id] = atom
            for row in _read_jsonl(path, "triples"):
                t = Triple(row["head"], row["relation_label"], row["tail"], row["source_doc"])
                g.triples.append(t)
                g._triple_set.add(t)
            for row in _read_jsonl(path, "relevance"):
                g.relevance_edges[(row["u"], row["v"])] = int(row["weight"])
            for row in _read_jsonl(path, "synonym"):
                g.synonym_edges[(row["u"], row["v"])] = float(take(row["weight"])[0])
            containment = {(row["atom"], row["entity"]) for row in _read_jsonl(path, "containment")}
        except (KeyError, TypeError, GraphError) as e:
            if isinstance(e, SnapshotError):
                raise
            raise SnapshotError(f"malformed snapshot record: {e}")

        clash = set(g.atoms) & set(g.entities)
        if clash:
            raise SnapshotError(f"ids used for both an atom and an entity: {sorted(clash)}")
        if containment != set(g.containment_edges):
            raise SnapshotError("containment.jsonl disagrees with atom entity lists")
        for aid, atom in g.atoms.items():
            missing = atom.entity_ids - set(g.entities)
            if missing:
                raise SnapshotError(f"atom '{aid}' references unknown entities {sorted(missing)}")
        return g.freeze()


def _same_atom(a: KnowledgeAtom, b: KnowledgeAtom) -> bool:
    if (a.text, a.source_doc, a.span_hint, a.entity_ids, a.chunk_index) != \
            (b.text, b.source_doc, b.span_hint, b.entity_ids, b.chunk_index):
        return False
    if a.embedding is None or b.embedding is None:
        return a.embedding is None and b.embedding is None
    return bool(np.array_equal(a.embedding, b.embedding))


def _read_jsonl(path: str, name: str) -> List[Dict]:
    file_path = os.path.join(path, f"{name}.jsonl")
    if not os.path.exists(file_path):
        raise SnapshotError(f"missing {name}.jsonl in {path}")
    rows = []
    with open(file_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except ValueError as e:
                raise SnapshotError(f"{name}.jsonl line {lineno}: {e}")
    return rows

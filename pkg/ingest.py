"""
Corpus ingestion: chunking, two-pass extraction, embedding and graph assembly.
"""

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from aeg_graph import AtomEntityGraph, EntityNode, KnowledgeAtom, Triple, entity_id_for, normalize_name
from errors import AtomGraphError, BuildError, ExtractionError
from llm_gateway import LlmGateway
from vector_space import Encoder

logger = logging.getLogger(__name__)


@dataclass
class CorpusDocument:
    doc_id: str
    text: str
    metadata: Dict = field(default_factory=dict)


@dataclass
class Chunk:
    doc_id: str
    index: int
    text: str
    start_token: int
    end_token: int
    char_start: int = 0


@dataclass
class ExtractionRecord:
    doc_id: str
    chunk_index: int
    entities: List[str]
    atoms: List[Dict]
    triples: List[Tuple[str, str, str]]

    def validate(self):
        known = {normalize_name(name) for name in self.entities}
        for atom in self.atoms:
            if not atom.get("text", "").strip():
                raise ValueError("atom with empty text")
            for name in atom.get("entities", []):
                if normalize_name(name) not in known:
                    raise ValueError(f"atom mentions '{name}' which is not in the entity list")
        for head, relation, tail in self.triples:
            if not relation.strip():
                raise ValueError(f"triple ({head}, ?, {tail}) has no relation label")
            for name in (head, tail):
                if normalize_name(name) not in known:
                    raise ValueError(f"triple endpoint '{name}' is not in the entity list")
        return self

    def to_dict(self) -> Dict:
        return {
            "doc_id": self.doc_id,
            "chunk_index": self.chunk_index,
            "entities": list(self.entities),
            "atoms": [dict(a) for a in self.atoms],
            "triples": [list(t) for t in self.triples],
        }

    def to_fixture_entries(self, passage: str) -> List[Dict]:
        """Mock-gateway fixture entries that replay this record for a passage"""
        atoms = []
        for atom in self.atoms:
            item = {"text": atom["text"], "entities": list(atom.get("entities", []))}
            if atom.get("span") is not None:
                item["span"] = list(atom["span"])
            atoms.append(item)
        return [
            {"template": "ner", "match": {"passage": passage},
             "response": {"named_entities": list(self.entities)}},
            {"template": "unified_extraction", "match": {"passage": passage},
             "response": {"atoms": atoms, "triples": [list(t) for t in self.triples]}},
        ]


@dataclass
class BuildReport:
    documents: int = 0
    chunks: int = 0
    failed_chunks: List[Dict] = field(default_factory=list)
    failed_documents: List[str] = field(default_factory=list)
    stats: Dict = field(default_factory=dict)
    usage: Dict = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def load_corpus(path: str) -> List[CorpusDocument]:
    """Read newline-delimited {"doc_id", "text", "metadata"} records"""
    docs: List[CorpusDocument] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                doc = CorpusDocument(str(row["doc_id"]), row["text"], row.get("metadata") or {})
            except (ValueError, KeyError, TypeError) as e:
                raise BuildError(f"{path} line {lineno}: malformed corpus record ({e})")
            if not doc.text or not doc.text.strip():
                raise BuildError(f"{path} line {lineno}: document '{doc.doc_id}' has empty text")
            if doc.doc_id in seen:
                raise BuildError(f"{path} line {lineno}: duplicate doc_id '{doc.doc_id}'")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def chunk(document: CorpusDocument, size_tokens: int = 256, overlap_tokens: int = 32) -> List[Chunk]:
    """Sliding window over whitespace tokens; consecutive windows share overlap_tokens"""
    if size_tokens <= overlap_tokens or overlap_tokens < 0:
        raise ValueError("chunking needs size_tokens > overlap_tokens >= 0")
    spans = [(m.start(), m.end()) for m in re.finditer(r"\S+", document.text)]
    n = len(spans)
    if n == 0:
        return []

    chunks = []
    step = size_tokens - overlap_tokens
    start = 0
    while True:
        end = min(start + size_tokens, n)
        char_start, char_end = spans[start][0], spans[end - 1][1]
        chunks.append(Chunk(document.doc_id, len(chunks), document.text[char_start:char_end], start, end, char_start))
        if end == n:
            break
        start += step
    return chunks


def extract(piece: Chunk, gateway: LlmGateway, atomize: bool = True) -> ExtractionRecord:
    """Entity pass, then joint atom/triple pass with the entity list bound"""
    try:
        ner = gateway.complete("ner", {"passage": piece.text})
        entities = _dedupe_names(ner.payload.named_entities)
        unified = gateway.complete("unified_extraction", {"passage": piece.text, "named_entities": list(entities)})
        payload = unified.payload
    except AtomGraphError as e:
        raise ExtractionError(piece.doc_id, piece.index, e)

    known = {normalize_name(n) for n in entities}

    def adopt(name: str):
        # names the model used without listing them join the entity list
        if normalize_name(name) not in known and name.strip():
            logger.debug("%s#%d: adopting unlisted entity '%s'", piece.doc_id, piece.index, name)
            known.add(normalize_name(name))
            entities.append(name.strip())

    if atomize:
        atoms = []
        for item in payload.atoms:
            if not item.text.strip():
                continue
            for name in item.entities:
                adopt(name)
            atoms.append({
                "text": item.text.strip(),
                "entities": _dedupe_names(item.entities),
                "span": list(item.span) if item.span is not None else None,
            })
    else:
        atoms = [{"text": piece.text, "entities": list(entities), "span": [0, len(piece.text)]}]

    triples = []
    for head, relation, tail in payload.triples:
        if not relation.strip() or not head.strip() or not tail.strip():
            logger.warning("%s#%d: dropping incomplete triple (%s, %s, %s)", piece.doc_id, piece.index, head, relation, tail)
            continue
        adopt(head)
        adopt(tail)
        triples.append((head.strip(), relation.strip(), tail.strip()))

    record = ExtractionRecord(piece.doc_id, piece.index, entities, atoms, triples)
    try:
        return record.validate()
    except ValueError as e:
        raise ExtractionError(piece.doc_id, piece.index, e)


def _dedupe_names(names: List[str]) -> List[str]:
    seen, out = set(), []
    for name in names:
        key = normalize_name(name)
        if key and key not in seen:
            seen.add(key)
            out.append(name.strip())
    return out


def build_graph(corpus: List[CorpusDocument], gateway: LlmGateway, encoder: Encoder,
                config) -> Tuple[AtomEntityGraph, BuildReport]:
    """Chunk, extract, embed and assemble the corpus into a frozen graph"""
    if not corpus:
        raise BuildError("corpus is empty")
    started = time.perf_counter()
    report = BuildReport(documents=len(corpus), config=config.public_dict())
    docs = sorted(corpus, key=lambda d: d.doc_id)

    pieces: List[Chunk] = []
    for doc in docs:
        pieces.extend(chunk(doc, config.chunk_size_tokens, config.chunk_overlap_tokens))
    report.chunks = len(pieces)
    print(f"📚 Extracting {len(pieces)} chunks from {len(docs)} documents...")

    def run(piece: Chunk) -> Tuple[Chunk, Optional[ExtractionRecord], Optional[ExtractionError]]:
        try:
            return piece, extract(piece, gateway, atomize=config.atomize), None
        except ExtractionError as e:
            return piece, None, e

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as executor:
        results = list(executor.map(run, pieces))

    records: Dict[str, List[Tuple[Chunk, ExtractionRecord]]] = {doc.doc_id: [] for doc in docs}
    for piece, record, error in results:
        if error is not None:
            logger.warning("skipping chunk: %s", error)
            report.failed_chunks.append({"doc_id": piece.doc_id, "chunk_index": piece.index, "error": str(error.cause)})
            continue
        records[piece.doc_id].append((piece, record))

    for doc in docs:
        if not records[doc.doc_id]:
            report.failed_documents.append(doc.doc_id)
    if len(report.failed_documents) == len(docs):
        raise BuildError(f"extraction failed for every document ({len(docs)})")

    graph = _assemble(records, docs, encoder)
    if not graph.atoms and not graph.entities:
        raise BuildError("extraction produced no atoms and no entities")

    graph.hyperparameters.update({
        "chunk_size_tokens": config.chunk_size_tokens,
        "chunk_overlap_tokens": config.chunk_overlap_tokens,
        "atomize": config.atomize,
        "encoder": config.encoder,
        "embedding_dim": graph.dim,
    })
    graph.build_relevance_edges()
    graph.build_synonym_edges(config.synonymy_edge_topk, config.synonymy_edge_sim_threshold)
    graph.freeze()

    report.stats = graph.compute_stats().to_dict()
    report.usage = gateway.usage.snapshot()
    report.seconds = round(time.perf_counter() - started, 3)
    return graph, report


def _assemble(records: Dict[str, List[Tuple[Chunk, ExtractionRecord]]], docs: List[CorpusDocument],
              encoder: Encoder) -> AtomEntityGraph:
    # first spelling seen (doc_id order) becomes the canonical name
    canonical: Dict[str, str] = {}
    atom_texts: List[str] = []
    for doc in docs:
        for _, record in records[doc.doc_id]:
            for name in record.entities:
                canonical.setdefault(normalize_name(name), name)
            atom_texts.extend(a["text"] for a in record.atoms)

    names = list(canonical.values())
    entity_vecs = dict(zip(names, encoder.encode_batch(names))) if names else {}
    atom_vecs = encoder.encode_batch(atom_texts) if atom_texts else []

    graph = AtomEntityGraph()
    cursor = 0
    for doc in docs:
        for piece, record in records[doc.doc_id]:
            nodes = {}
            for name in record.entities:
                canon = canonical[normalize_name(name)]
                eid = entity_id_for(canon)
                nodes[eid] = EntityNode(eid, canon, entity_vecs[canon])
            atoms = []
            for j, item in enumerate(record.atoms):
                span = None
                if item.get("span") is not None:
                    s, e = item["span"]
                    span = (piece.char_start + int(s), piece.char_start + int(e))
                atoms.append(KnowledgeAtom(
                    id=f"{doc.doc_id}:{piece.index}:{j}",
                    text=item["text"],
                    source_doc=doc.doc_id,
                    span_hint=span,
                    entity_ids=frozenset(entity_id_for(canonical[normalize_name(n)]) for n in item["entities"]),
                    embedding=atom_vecs[cursor],
                    chunk_index=piece.index,
                ))
                cursor += 1
            triples = [
                Triple(entity_id_for(canonical[normalize_name(h)]), r, entity_id_for(canonical[normalize_name(t)]), doc.doc_id)
                for h, r, t in record.triples
            ]
            graph.add_document_extraction(doc.doc_id, nodes.values(), atoms, triples)
    return graph

"""
Evidence sieve: per-query top-K, union merge, LLM relevance filter,
source-level aggregation into citation units, and grounded generation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from aeg_graph import AtomEntityGraph
from errors import MalformedOutputError
from llm_gateway import LlmGateway

logger = logging.getLogger(__name__)


@dataclass
class Candidate:
    atom_id: str
    score: float
    surfaced_by: List[int] = field(default_factory=list)


@dataclass
class CitationUnit:
    atom_ids: List[str]
    source_doc: str
    text: str
    score: float
    span: Optional[Tuple[int, int]] = None

    def to_dict(self) -> Dict:
        return {
            "atom_ids": list(self.atom_ids),
            "source_doc": self.source_doc,
            "text": self.text,
            "score": self.score,
            "span": list(self.span) if self.span else None,
        }


@dataclass
class EvidenceBundle:
    per_query: List[List[Tuple[str, float]]] = field(default_factory=list)
    merged: List[Candidate] = field(default_factory=list)
    filtered: List[Candidate] = field(default_factory=list)
    units: List[CitationUnit] = field(default_factory=list)
    dropped_units: List[CitationUnit] = field(default_factory=list)
    filter_status: str = "applied"

    def to_dict(self) -> Dict:
        return {
            "per_query": [[{"atom_id": a, "score": s} for a, s in rq] for rq in self.per_query],
            "merged": [{"atom_id": c.atom_id, "score": c.score, "surfaced_by": c.surfaced_by} for c in self.merged],
            "filtered": [{"atom_id": c.atom_id, "score": c.score} for c in self.filtered],
            "units": [u.to_dict() for u in self.units],
            "dropped_units": [u.to_dict() for u in self.dropped_units],
            "filter_status": self.filter_status,
        }


def _ranked(items: Dict[str, float]) -> List[Tuple[str, float]]:
    return sorted(items.items(), key=lambda kv: (-kv[1], kv[0]))


def top_k_atoms(scores: Dict[str, float], k: int = 25) -> List[Tuple[str, float]]:
    """The k best positively scored atoms, ties broken by ascending id"""
    if k < 1:
        raise ValueError("k must be >= 1")
    positive = {aid: s for aid, s in scores.items() if s > 0}
    if not positive:
        logger.warning("every atom scored zero, candidate set is empty")
        return []
    return _ranked(positive)[:k]


def merge(candidate_sets: Sequence[Sequence[Tuple[str, float]]]) -> List[Candidate]:
    """Union of per-query candidates keeping each atom's best score"""
    best: Dict[str, Candidate] = {}
    for qi, candidates in enumerate(candidate_sets):
        for atom_id, score in candidates:
            current = best.get(atom_id)
            if current is None:
                best[atom_id] = Candidate(atom_id, score, [qi])
                continue
            current.score = max(current.score, score)
            if qi not in current.surfaced_by:
                current.surfaced_by.append(qi)
    return sorted(best.values(), key=lambda c: (-c.score, c.atom_id))


def filter_atoms(candidates: List[Candidate], query: str, graph: AtomEntityGraph,
                 gateway: LlmGateway) -> Tuple[List[Candidate], str]:
    """Keep the candidates the model judges necessary for the original query.

    Returns (kept, status). A malformed index list fails open: every
    candidate is kept and status is 'fail_open'.
    """
    if not candidates:
        return [], "empty"
    listing = [{"index": i, "text": graph.atoms[c.atom_id].text} for i, c in enumerate(candidates)]
    try:
        response = gateway.complete("atom_filter", {"question": query, "candidates": listing})
    except MalformedOutputError as e:
        logger.warning("atom filter output unusable (%s); keeping all %d candidates", e, len(candidates))
        return list(candidates), "fail_open"

    keep = set()
    for index in response.payload.keep:
        if 0 <= index < len(candidates):
            keep.add(index)
        else:
            logger.warning("atom filter returned out-of-range index %d (have %d candidates)", index, len(candidates))
    return [c for i, c in enumerate(candidates) if i in keep], "applied"


def aggregate(filtered: List[Candidate], graph: AtomEntityGraph) -> List[CitationUnit]:
    """Group atoms by source document and merge overlapping spans into citation units"""
    groups: Dict[str, List[Candidate]] = {}
    for c in filtered:
        groups.setdefault(graph.atoms[c.atom_id].source_doc, []).append(c)

    ordered_groups = sorted(groups.items(), key=lambda kv: (-max(c.score for c in kv[1]), kv[0]))
    units: List[CitationUnit] = []
    for doc_id, members in ordered_groups:
        spanned = sorted(
            (c for c in members if graph.atoms[c.atom_id].span_hint is not None),
            key=lambda c: (graph.atoms[c.atom_id].span_hint, c.atom_id),
        )
        loose = [c for c in members if graph.atoms[c.atom_id].span_hint is None]

        doc_units: List[CitationUnit] = []
        clusters: List[List[Candidate]] = []
        end = None
        for c in spanned:
            start, stop = graph.atoms[c.atom_id].span_hint
            if clusters and start < end:
                clusters[-1].append(c)
                end = max(end, stop)
            else:
                clusters.append([c])
                end = stop
        for cluster in clusters:
            texts: List[str] = []
            for c in cluster:
                text = graph.atoms[c.atom_id].text
                if text not in texts:
                    texts.append(text)
            spans = [graph.atoms[c.atom_id].span_hint for c in cluster]
            doc_units.append(CitationUnit(
                atom_ids=[c.atom_id for c in cluster],
                source_doc=doc_id,
                text=" ".join(texts),
                score=max(c.score for c in cluster),
                span=(min(s[0] for s in spans), max(s[1] for s in spans)),
            ))
        for c in loose:
            doc_units.append(CitationUnit([c.atom_id], doc_id, graph.atoms[c.atom_id].text, c.score))

        doc_units.sort(key=lambda u: (-u.score, u.atom_ids[0]))
        units.extend(doc_units)
    return units


def serialize_evidence(units: List[CitationUnit]) -> List[Dict]:
    """Numbered evidence for the QA prompt, highest-scoring unit first"""
    ordered = sorted(units, key=lambda u: -u.score)
    return [{"number": i + 1, "source_doc": u.source_doc, "text": u.text} for i, u in enumerate(ordered)]


def evidence_tokens(units: List[CitationUnit]) -> int:
    return sum(len(f"[{e['number']}] ({e['source_doc']}) {e['text']}".split()) for e in serialize_evidence(units))


def apply_budget(units: List[CitationUnit], budget_tokens: int) -> Tuple[List[CitationUnit], List[CitationUnit]]:
    """Drop lowest-scored units until the serialized evidence fits the budget"""
    kept = list(units)
    dropped: List[CitationUnit] = []
    while kept and evidence_tokens(kept) > budget_tokens:
        worst = min(range(len(kept)), key=lambda i: (kept[i].score, -i))
        dropped.append(kept.pop(worst))
    if dropped:
        logger.info("context budget %d tokens: dropped %d unit(s)", budget_tokens, len(dropped))
    return kept, dropped


def generate(query: str, units: List[CitationUnit], mode: str, gateway: LlmGateway) -> str:
    """Grounded answer from the citation units; mode is 'abstract' or 'precise'"""
    if mode not in ("abstract", "precise"):
        raise ValueError(f"mode must be 'abstract' or 'precise', got '{mode}'")
    evidence = serialize_evidence(units)
    if not evidence:
        logger.warning("no evidence survived the sieve for: %s", query)
    response = gateway.complete(f"{mode}_qa", {"question": query, "evidence": evidence})
    return response.payload

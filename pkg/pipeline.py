"""
Query pipeline: plan -> seed -> propagate -> sieve -> generate.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import decomposer
import resonance
import sieve
from aeg_graph import AtomEntityGraph
from decomposer import QueryPlan
from llm_gateway import LlmGateway
from resonance import PropagationGraph, PropagationParams
from sieve import EvidenceBundle
from vector_space import Encoder

logger = logging.getLogger(__name__)


@dataclass
class QueryResult:
    query: str
    plan: QueryPlan
    evidence: EvidenceBundle
    answer: str
    strategy: str
    timing: Dict[str, float] = field(default_factory=dict)
    usage: Dict = field(default_factory=dict)
    propagation: List[Dict] = field(default_factory=list)

    def to_record(self) -> Dict:
        return {
            "query": self.query,
            "plan": self.plan.to_dict(),
            "evidence": self.evidence.to_dict(),
            "answer": self.answer,
            "strategy": self.strategy,
            "propagation": self.propagation,
            "timing": self.timing,
            "usage": self.usage,
        }


class QueryEngine:
    """Answers queries against one frozen graph; safe to share across worker threads"""

    def __init__(self, graph: AtomEntityGraph, gateway: LlmGateway, encoder: Encoder, config):
        graph.require_frozen()
        self.graph = graph
        self.gateway = gateway
        self.encoder = encoder
        self.config = config
        self.params = PropagationParams.from_config(config)
        self.pg = PropagationGraph.from_aeg(graph)

    def _mention_vectors(self, text: str, gateway: LlmGateway) -> List[np.ndarray]:
        if not self.config.query_entity_ner:
            return []
        mentions = gateway.complete("ner", {"passage": text}, stage="retrieval").payload.named_entities
        mentions = [m for m in mentions if m.strip()]
        return self.encoder.encode_batch(mentions) if mentions else []

    def retrieve(self, text: str, gateway: Optional[LlmGateway] = None) -> Tuple[List[Tuple[str, float]], Dict]:
        """Score atoms for one (sub-)query and keep the top-K"""
        gateway = gateway or self.gateway
        cfg = self.config
        started = time.perf_counter()
        query_vec = self.encoder.encode(text)

        if not cfg.use_graph:
            sims = self.graph.atom_index().similarities(query_vec)
            scores = {aid: float(max(0.0, s)) for aid, s in zip(self.graph.atom_index().ids, sims)}
            meta = {"strategy": "dense", "seconds": time.perf_counter() - started}
            return sieve.top_k_atoms(scores, cfg.retrieval_top_k), meta

        pv = resonance.seed(
            query_vec, self.graph,
            alpha=cfg.passage_node_weight,
            entity_top_k=cfg.entity_top_k,
            entity_sim_threshold=cfg.entity_sim_threshold,
            entity_node_weight=cfg.entity_node_weight,
            atom_top_k=cfg.retrieval_top_k,
            mention_vecs=self._mention_vectors(text, gateway),
        )
        scores = resonance.propagate(cfg.propagation_method, self.pg, self.pg.to_vector(pv.masses), self.params)
        atom_scores = resonance.score_atoms(scores, self.pg)
        meta = scores.metadata()
        meta.update({
            "atom_seeds": len(pv.atom_seeds),
            "entity_seeds": len(pv.entity_seeds),
            "seed_fallback": pv.fallback,
            "seconds": time.perf_counter() - started,
        })
        return sieve.top_k_atoms(atom_scores, cfg.retrieval_top_k), meta

    def answer(self, query: str) -> QueryResult:
        cfg = self.config
        gateway = self.gateway.scoped()
        timing: Dict[str, float] = {}
        t0 = time.perf_counter()

        plan = decomposer.plan(query, gateway, cfg.complexity_threshold, cfg.max_sub_questions,
                               enabled=cfg.use_decomposition)
        timing["plan"] = time.perf_counter() - t0

        t = time.perf_counter()
        queries = plan.effective_set
        if len(queries) > 1 and cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=min(cfg.workers, len(queries))) as executor:
                retrieved = list(executor.map(lambda q: self.retrieve(q, gateway), queries))
        else:
            retrieved = [self.retrieve(q, gateway) for q in queries]
        timing["retrieval"] = time.perf_counter() - t

        bundle = EvidenceBundle(per_query=[r for r, _ in retrieved])
        bundle.merged = sieve.merge(bundle.per_query)

        t = time.perf_counter()
        if cfg.use_sieve:
            bundle.filtered, bundle.filter_status = sieve.filter_atoms(bundle.merged, query, self.graph, gateway)
        else:
            bundle.filtered, bundle.filter_status = list(bundle.merged), "skipped"
        timing["filter"] = time.perf_counter() - t

        t = time.perf_counter()
        units = sieve.aggregate(bundle.filtered, self.graph)
        bundle.units, bundle.dropped_units = sieve.apply_budget(units, cfg.context_budget_tokens)
        timing["aggregate"] = time.perf_counter() - t

        t = time.perf_counter()
        answer = sieve.generate(query, bundle.units, cfg.answer_mode, gateway)
        timing["generate"] = time.perf_counter() - t
        timing["total"] = time.perf_counter() - t0

        return QueryResult(
            query=query,
            plan=plan,
            evidence=bundle,
            answer=answer,
            strategy=cfg.propagation_method if cfg.use_graph else "dense",
            timing={k: round(v, 6) for k, v in timing.items()},
            usage=gateway.usage.snapshot(),
            propagation=[meta for _, meta in retrieved],
        )

    def run_batch(self, queries: List[str], workers: Optional[int] = None) -> List[QueryResult]:
        """Answer many queries; results come back in input order"""
        workers = max(1, workers or self.config.workers)
        if workers == 1 or len(queries) <= 1:
            return [self.answer(q) for q in queries]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(self.answer, queries))

"""
Complexity-gated query decomposition.

The effective query set always starts with the original query; sub-queries are
added only when the complexity score reaches the threshold.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List

from llm_gateway import LlmGateway

logger = logging.getLogger(__name__)


@dataclass
class SubQuery:
    text: str
    focus: str = "facet"


@dataclass
class QueryPlan:
    query: str
    complexity: float
    sub_queries: List[SubQuery] = field(default_factory=list)
    threshold: float = 6.5
    scored: bool = True

    @property
    def decomposed(self) -> bool:
        return self.scored and self.complexity >= self.threshold

    @property
    def effective_set(self) -> List[str]:
        return [self.query] + [s.text for s in self.sub_queries]

    def to_dict(self) -> Dict:
        return {
            "query": self.query,
            "complexity": self.complexity,
            "threshold": self.threshold,
            "decomposed": self.decomposed,
            "scored": self.scored,
            "sub_queries": [{"text": s.text, "focus": s.focus} for s in self.sub_queries],
            "effective_set": self.effective_set,
        }


def _normalize(text: str) -> str:
    return re.sub(r"[\s?.!]+", " ", text).strip().casefold()


def score_complexity(query: str, gateway: LlmGateway) -> float:
    """Model-assigned structural complexity, clamped to [0, 10]"""
    response = gateway.complete("complexity", {"question": query})
    score = float(response.payload.score)
    if math.isnan(score):
        return 0.0
    return min(10.0, max(0.0, score))


def plan(query: str, gateway: LlmGateway, threshold: float = 6.5, max_sub_questions: int = 3,
         enabled: bool = True) -> QueryPlan:
    """Build the effective query set for one query.

    With enabled=False the complexity call is skipped and the plan is [q].
    """
    if not enabled:
        return QueryPlan(query, 0.0, [], threshold=threshold, scored=False)

    complexity = score_complexity(query, gateway)
    result = QueryPlan(query, complexity, [], threshold=threshold)
    if complexity < threshold:
        return result

    response = gateway.complete("decomposition", {"question": query, "max_sub_questions": max_sub_questions})
    seen = {_normalize(query)}
    subs: List[SubQuery] = []
    for item in response.payload.sub_questions:
        key = _normalize(item.question)
        if not key or key in seen:
            continue
        seen.add(key)
        subs.append(SubQuery(item.question.strip(), item.focus or "facet"))

    if len(subs) > max_sub_questions:
        logger.warning("decomposition returned %d sub-questions, keeping the first %d", len(subs), max_sub_questions)
        subs = subs[:max_sub_questions]
    result.sub_queries = subs
    return result

"""
Answer Accuracy: claim-level F1 blended with answer/reference embedding similarity.
"""

import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from llm_gateway import LlmGateway
from vector_space import Encoder, cosine

logger = logging.getLogger(__name__)


@dataclass
class JudgedClaims:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {value!r}")


@dataclass
class AccResult:
    fc: float
    ss: float
    acc: float
    alpha: float


def factual_correctness(claims: JudgedClaims) -> float:
    """2TP / (2TP + FP + FN); zero when no claims were judged"""
    denominator = 2 * claims.tp + claims.fp + claims.fn
    if denominator == 0:
        logger.warning("no claims on either side, factual correctness defined as 0")
        return 0.0
    return 2 * claims.tp / denominator


def semantic_similarity(answer: str, reference: str, encoder: Encoder) -> float:
    return cosine(encoder.encode(answer), encoder.encode(reference))


def combine(fc: float, ss: float, alpha: float = 0.7) -> AccResult:
    return AccResult(fc=fc, ss=ss, acc=alpha * fc + (1 - alpha) * ss, alpha=alpha)


def answer_accuracy(claims: JudgedClaims, answer: str, reference: str, encoder: Encoder,
                    alpha: float = 0.7) -> AccResult:
    return combine(factual_correctness(claims), semantic_similarity(answer, reference, encoder), alpha)


def judge_claims(answer: str, reference: str, gateway: LlmGateway) -> JudgedClaims:
    """One claim-verification call returning tp/fp/fn counts"""
    payload = gateway.complete("claim_verification", {"answer": answer, "reference": reference}).payload
    return JudgedClaims(payload.tp, payload.fp, payload.fn)


def load_references(path: str) -> Dict[str, str]:
    """Newline-delimited {"query", "reference"} records keyed by query text"""
    references = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                references[row["query"]] = row["reference"]
    return references


def evaluate_results(results: List[Dict], references: Dict[str, str], gateway: LlmGateway,
                     encoder: Encoder, alpha: float = 0.7) -> Dict:
    """Per-query fc/ss/acc plus corpus means over the queries that have a reference"""
    rows = []
    for record in results:
        query = record["query"]
        reference = references.get(query)
        if reference is None:
            logger.warning("no reference for query, skipping: %s", query)
            continue
        claims = judge_claims(record["answer"], reference, gateway)
        result = answer_accuracy(claims, record["answer"], reference, encoder, alpha)
        rows.append({"query": query, **asdict(claims), **asdict(result)})

    summary: Optional[Dict] = None
    if rows:
        n = len(rows)
        summary = {
            "queries": n,
            "fc": sum(r["fc"] for r in rows) / n,
            "ss": sum(r["ss"] for r in rows) / n,
            "acc": sum(r["acc"] for r in rows) / n,
            "alpha": alpha,
        }
    return {"rows": rows, "summary": summary, "usage": gateway.usage.snapshot()}


def format_table(report: Dict) -> str:
    lines = [f"{'query':<60} {'FC':>7} {'SS':>7} {'ACC':>7}", "-" * 84]
    for row in report["rows"]:
        query = row["query"] if len(row["query"]) <= 60 else row["query"][:57] + "..."
        lines.append(f"{query:<60} {row['fc']:>7.4f} {row['ss']:>7.4f} {row['acc']:>7.4f}")
    summary = report.get("summary")
    if summary:
        lines.append("-" * 84)
        lines.append(f"{'MEAN (' + str(summary['queries']) + ' queries)':<60} "
                     f"{summary['fc']:>7.4f} {summary['ss']:>7.4f} {summary['acc']:>7.4f}")
    return "\n".join(lines)

"""
Numerical checks of the retrieval guarantees.

- two-region leakage: closed form vs fixed-point iteration on the macro chain
- misranking of coarse evidence units: concentration bound, exact Gaussian
  value and Monte-Carlo estimate, plus the purity-scaled score gap
- coverage ceiling of overly fine units, by exhaustive enumeration
- knowledge-graph embedding into an Atom-Entity Graph and back
- contextual distinguishability and the cross-region noise sweep
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.stats import norm

import resonance
from aeg_graph import AtomEntityGraph, EntityNode, KnowledgeAtom, Triple, entity_id_for
from errors import InsufficientTrialsError
from resonance import PropagationGraph

logger = logging.getLogger(__name__)

MIN_TRIALS = 10_000
GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


# --- two-region leakage ----------------------------------------------------

@dataclass(frozen=True)
class MacroChain:
    gamma: float
    epsilon: float
    rho: float

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")


def leakage_closed_form(chain: MacroChain) -> float:
    """Stationary relevant-region mass of PPR restarted in the relevant region"""
    rho, gamma, eps = chain.rho, chain.gamma, chain.epsilon
    return (rho + (1 - rho) * eps) / (rho + (1 - rho) * (gamma + eps))


def leakage_simulated(chain: MacroChain, tol: float = 1e-14, max_iter: int = 100_000) -> float:
    """Iterate phi <- rho*e_R + (1-rho)*phi*T on the 2-state chain"""
    rho, gamma, eps = chain.rho, chain.gamma, chain.epsilon
    rel, irr = 1.0, 0.0
    for _ in range(max_iter):
        nrel = rho + (1 - rho) * (rel * (1 - gamma) + irr * eps)
        nirr = (1 - rho) * (rel * gamma + irr * (1 - eps))
        delta = abs(nrel - rel) + abs(nirr - irr)
        rel, irr = nrel, nirr
        if delta < tol:
            break
    return rel


def leakage_grid(values: Sequence[float] = GRID, tol: float = 1e-14, max_iter: int = 100_000) -> Dict[str, np.ndarray]:
    """Closed form and iterated relevant mass over every (rho, gamma, epsilon) in values**3.

    Arrays are indexed [rho, gamma, epsilon]. The iteration runs on the whole
    grid at once with the same update as leakage_simulated.
    """
    v = np.asarray(values, dtype=np.float64)
    rho, gamma, eps = np.meshgrid(v, v, v, indexing="ij")
    closed = (rho + (1 - rho) * eps) / (rho + (1 - rho) * (gamma + eps))
    rel = np.ones_like(rho)
    irr = np.zeros_like(rho)
    for _ in range(max_iter):
        nrel = rho + (1 - rho) * (rel * (1 - gamma) + irr * eps)
        nirr = (1 - rho) * (rel * gamma + irr * (1 - eps))
        delta = np.max(np.abs(nrel - rel) + np.abs(nirr - irr))
        rel, irr = nrel, nirr
        if delta < tol:
            break
    return {"values": v, "closed_form": closed, "simulated": rel}


# --- misranking ------------------------------------------------------------

@dataclass(frozen=True)
class MisrankInstance:
    r: int
    M: int
    delta_mu: float
    sigma: float
    m: Optional[int] = None

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.M < self.r:
            raise ValueError(f"unit size M={self.M} must be >= overlap r={self.r}")
        if self.delta_mu < 0:
            raise ValueError("delta_mu must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    @property
    def purity(self) -> float:
        return self.r / self.M

    def coverage(self) -> Optional[float]:
        return None if not self.m else self.r / self.m


@dataclass
class MisrankEstimate:
    probability: float
    mean_gap: float
    gap_standard_error: float
    expected_gap: float
    trials: int

    @property
    def gap_z(self) -> float:
        if self.gap_standard_error == 0:
            return 0.0 if self.mean_gap == self.expected_gap else math.inf
        return (self.mean_gap - self.expected_gap) / self.gap_standard_error


def misrank_bound(instance: MisrankInstance) -> float:
    """exp(-r^2 dmu^2 / (4 sigma^2 M))"""
    r, M, dmu, sigma = instance.r, instance.M, instance.delta_mu, instance.sigma
    return math.exp(-(r ** 2) * dmu ** 2 / (4 * sigma ** 2 * M))


def misrank_exact(instance: MisrankInstance) -> float:
    """Exact Gaussian misranking probability for mean aggregation"""
    gap = instance.purity * instance.delta_mu
    scale = instance.sigma * math.sqrt(2.0 / instance.M)
    return float(norm.cdf(-gap / scale))


def misrank_simulate(instance: MisrankInstance, trials: int = 100_000,
                     rng: Optional[np.random.Generator] = None, batch: int = 20_000) -> MisrankEstimate:
    """Monte-Carlo misranking rate of a mixed unit against a pure-noise unit.

    U+ holds r necessary atoms (mean delta_mu) and M - r others (mean 0); U-
    holds M atoms of mean 0. Unit scores are member means under Gaussian
    noise of scale sigma; a trial misranks when S(U+) <= S(U-).
    """
    if trials < MIN_TRIALS:
        raise InsufficientTrialsError(f"need at least {MIN_TRIALS} trials, got {trials}")
    rng = rng or np.random.default_rng(0)
    r, M = instance.r, instance.M
    means = np.zeros(M)
    means[:r] = instance.delta_mu

    misranked = 0
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < trials:
        size = min(batch, trials - done)
        plus = (means + instance.sigma * rng.standard_normal((size, M))).mean(axis=1)
        minus = (instance.sigma * rng.standard_normal((size, M))).mean(axis=1)
        gap = plus - minus
        misranked += int(np.count_nonzero(gap <= 0))
        total += float(gap.sum())
        total_sq += float(np.dot(gap, gap))
        done += size

    mean = total / trials
    var = max(0.0, (total_sq - trials * mean ** 2) / (trials - 1))
    return MisrankEstimate(
        probability=misranked / trials,
        mean_gap=mean,
        gap_standard_error=math.sqrt(var / trials),
        expected_gap=instance.purity * instance.delta_mu,
        trials=trials,
    )


def default_misrank_grid() -> List[MisrankInstance]:
    grid = []
    for r, M, dmu, sigma in itertools.product((1, 2, 5), (5, 10), (0.5, 1.0), (0.5, 1.0)):
        if r <= M:
            grid.append(MisrankInstance(r, M, dmu, sigma))
    return grid


# --- coverage --------------------------------------------------------------

@dataclass
class CoverageInstance:
    units: List[FrozenSet[int]]
    necessary: FrozenSet[int]
    k: int
    c: int

    @property
    def m(self) -> int:
        return len(self.necessary)


def coverage_bound(k: int, c: int, m: int) -> float:
    """Best achievable coverage with k units holding at most c necessary atoms each"""
    if m <= 0:
        raise ValueError("m must be >= 1")
    return min(1.0, k * c / m)


def max_covered(instance: CoverageInstance) -> int:
    """Most necessary atoms any k-unit selection covers, by exhaustive enumeration"""
    k = min(instance.k, len(instance.units))
    best = 0
    for chosen in itertools.combinations(instance.units, k):
        covered = len(instance.necessary & frozenset().union(*chosen))
        best = max(best, covered)
    return best


def random_coverage_instance(rng: np.random.Generator, c: int, max_atoms: int = 12) -> CoverageInstance:
    """Random atoms split into units that each hold at most c necessary atoms"""
    n = int(rng.integers(2, max_atoms + 1))
    m = int(rng.integers(1, n + 1))
    necessary = frozenset(int(a) for a in rng.choice(n, size=m, replace=False))
    others = [a for a in range(n) if a not in necessary]
    order = [int(a) for a in rng.permutation(sorted(necessary))]

    units: List[Set[int]] = []
    while order:
        take = int(rng.integers(1, c + 1))
        units.append(set(order[:take]))
        order = order[take:]
    for a in others:
        if units and rng.random() < 0.7:
            units[int(rng.integers(0, len(units)))].add(a)
        else:
            units.append({a})
    k = int(rng.integers(1, min(4, len(units)) + 1))
    return CoverageInstance([frozenset(u) for u in units], necessary, k, c)


def decomposition_coverage(k: int, c: int, sub_demands: Sequence[int], total_demand: int) -> Dict[str, float]:
    """Coverage ceiling for one query vs one top-k per sub-query.

    Each sub-query j needs sub_demands[j] of the total_demand necessary atoms
    and gets its own k units.
    """
    if total_demand <= 0:
        raise ValueError("total_demand must be >= 1")
    single = coverage_bound(k, c, total_demand)
    reachable = sum(min(d, k * c) for d in sub_demands)
    return {
        "single": single,
        "decomposed": min(1.0, reachable / total_demand),
        "sub_queries": len(sub_demands),
    }


# --- knowledge-graph roundtrip ---------------------------------------------

def kg_to_aeg(triples: Iterable[Tuple[str, str, str]]) -> AtomEntityGraph:
    """One atom per distinct triple, mentioning exactly its head and tail"""
    graph = AtomEntityGraph()
    for i, (h, r, t) in enumerate(sorted(set(triples))):
        entities = [EntityNode(entity_id_for(name), name) for name in dict.fromkeys((h, t))]
        atom = KnowledgeAtom(
            id=f"kg:{i}",
            text=json.dumps([h, r, t], ensure_ascii=False),
            source_doc="kg",
            entity_ids=frozenset(e.id for e in entities),
        )
        graph.add_document_extraction("kg", entities, [atom], [Triple(entities[0].id, r, entities[-1].id, "kg")])
    return graph.freeze()


def aeg_to_kg(graph: AtomEntityGraph) -> Set[Tuple[str, str, str]]:
    triples = set()
    for atom in graph.atoms.values():
        h, r, t = json.loads(atom.text)
        if atom.entity_ids != frozenset({entity_id_for(h), entity_id_for(t)}):
            raise ValueError(f"atom '{atom.id}' mentions {sorted(atom.entity_ids)}, not its head and tail")
        triples.add((h, r, t))
    return triples


def kg_roundtrip(triples: Iterable[Tuple[str, str, str]]) -> bool:
    kg = set(triples)
    return aeg_to_kg(kg_to_aeg(kg)) == kg


def random_kg(rng: np.random.Generator, max_entities: int = 30, max_triples: int = 100,
              max_labels: int = 10) -> List[Tuple[str, str, str]]:
    n_ent = int(rng.integers(1, max_entities + 1))
    n_lab = int(rng.integers(1, max_labels + 1))
    n_tri = int(rng.integers(0, max_triples + 1))
    return [
        (f"entity {int(rng.integers(n_ent))}", f"rel_{int(rng.integers(n_lab))}", f"entity {int(rng.integers(n_ent))}")
        for _ in range(n_tri)
    ]


def contextual_distinguishability_demo() -> Dict:
    """Two atoms share one relational core but differ in context"""
    core = ("Metformin", "treats", "type 2 diabetes")
    contexts = [
        "Metformin treats type 2 diabetes as the first-line therapy in adults.",
        "Metformin treats type 2 diabetes only when kidney function is adequate.",
    ]
    graph = AtomEntityGraph()
    entities = [EntityNode(entity_id_for(core[0]), core[0]), EntityNode(entity_id_for(core[2]), core[2])]
    atoms = [
        KnowledgeAtom(f"demo:{i}", text, "demo", entity_ids=frozenset(e.id for e in entities))
        for i, text in enumerate(contexts)
    ]
    triples = [Triple(entities[0].id, core[1], entities[1].id, "demo") for _ in contexts]
    graph.add_document_extraction("demo", entities, atoms, triples)
    graph.freeze()
    projected = {(t.head, t.relation_label, t.tail) for t in graph.triples}
    return {
        "atoms": len(graph.atoms),
        "projected_triples": len(projected),
        "passed": len(graph.atoms) == 2 and len(projected) == 1,
    }


# --- cross-region noise sweep ----------------------------------------------

def noise_sweep(p_values: Sequence[float] = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0),
                relevant: int = 20, irrelevant: int = 60, rho: float = 0.3, seed: int = 0) -> List[Dict]:
    """Relevant-region PPR mass as random cross-region edges are added.

    Both regions are cliques; pair (u, v) across regions is present at noise
    level p when its single uniform draw falls below p, so edge sets are
    nested in p. Seeds are uniform over the relevant region.
    """
    rng = np.random.default_rng(seed)
    rel_ids = [f"R{i}" for i in range(relevant)]
    irr_ids = [f"I{i}" for i in range(irrelevant)]
    nodes = rel_ids + irr_ids
    base = [(a, b, 1.0) for a, b in itertools.combinations(rel_ids, 2)]
    base += [(a, b, 1.0) for a, b in itertools.combinations(irr_ids, 2)]
    draws = rng.random((relevant, irrelevant))

    rows = []
    for p in p_values:
        cross = [(rel_ids[i], irr_ids[j], 1.0) for i, j in zip(*np.nonzero(draws < p))]
        pg = PropagationGraph.from_edges(nodes, base + cross)
        pi = pg.to_vector({nid: 1.0 / relevant for nid in rel_ids})
        scores = resonance.ppr(pg, pi, rho=rho, tol=1e-12)
        rows.append({
            "p_noise": p,
            "cross_edges": len(cross),
            "relevant_mass": float(scores.values[:relevant].sum()),
        })
    return rows


# --- runner ----------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    data: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)


GRID_SPECS = {
    "full": {"trials": 100_000, "coverage_instances": 200, "kgs": 500},
    "quick": {"trials": MIN_TRIALS, "coverage_instances": 50, "kgs": 100},
}


def check_leakage() -> CheckResult:
    grid = leakage_grid()
    err = float(np.max(np.abs(grid["closed_form"] - grid["simulated"])))
    # axis 1 is gamma
    decreasing = bool(np.all(np.diff(grid["simulated"], axis=1) < 0))
    spot = leakage_closed_form(MacroChain(gamma=0.1, epsilon=0.0, rho=0.3))
    return CheckResult(
        "leakage_two_region", err < 1e-10 and decreasing,
        f"max |closed - iterated| = {err:.2e}; strictly decreasing in gamma: {decreasing}; "
        f"rho=0.3,gamma=0.1,eps=0 -> {spot:.5f}",
        {"max_abs_error": err, "decreasing_in_gamma": decreasing, "spot": spot},
    )


def check_misranking(trials: int, seed: int, workers: int = 4) -> Tuple[CheckResult, CheckResult]:
    grid = default_misrank_grid()
    children = np.random.SeedSequence(seed).spawn(len(grid))

    def run(pair):
        inst, child = pair
        return misrank_simulate(inst, trials, np.random.default_rng(child))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        estimates = list(executor.map(run, zip(grid, children)))

    rows = []
    for inst, est in zip(grid, estimates):
        rows.append({
            **asdict(inst),
            "bound": misrank_bound(inst),
            "exact": misrank_exact(inst),
            "empirical": est.probability,
            "mean_gap": est.mean_gap,
            "expected_gap": est.expected_gap,
            "gap_se": est.gap_standard_error,
            "gap_z": est.gap_z,
        })
    bound_ok = all(r["empirical"] <= r["bound"] for r in rows)
    gap_ok = all(abs(r["gap_z"]) <= 3.0 for r in rows)
    spot = misrank_bound(MisrankInstance(5, 10, 1.0, 0.5))
    return (
        CheckResult("misranking_bound", bound_ok,
                    f"{len(rows)} instances x {trials} trials; empirical <= bound everywhere: {bound_ok}; "
                    f"r=5,M=10,dmu=1,sigma=0.5 -> {spot:.5f}",
                    {"rows": rows, "spot": spot}),
        CheckResult("score_gap", gap_ok,
                    f"mean gap within 3 standard errors of purity * dmu: {gap_ok}",
                    {"max_abs_z": max(abs(r["gap_z"]) for r in rows)}),
    )


def check_coverage(instances: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst_slack = None
    violations = 0
    for i in range(instances):
        inst = random_coverage_instance(rng, c=(1, 2, 3)[i % 3])
        covered = max_covered(inst)
        if covered > inst.k * inst.c:
            violations += 1
        slack = inst.k * inst.c - covered
        worst_slack = slack if worst_slack is None else min(worst_slack, slack)
    fine = CoverageInstance([frozenset({a}) for a in range(5)], frozenset(range(5)), k=3, c=1)
    infeasible = coverage_bound(3, 1, 5) < 1.0 and max_covered(fine) < fine.m
    return CheckResult(
        "coverage_ceiling", violations == 0 and infeasible,
        f"{instances} instances, {violations} exceed k*c; k=3,c=1,m=5 full coverage impossible: {infeasible}",
        {"violations": violations, "min_slack": worst_slack, "bound_k3_c1_m5": coverage_bound(3, 1, 5)},
    )


def check_kg_roundtrip(count: int, seed: int) -> Tuple[CheckResult, CheckResult]:
    rng = np.random.default_rng(seed)
    failures = sum(0 if kg_roundtrip(random_kg(rng)) else 1 for _ in range(count))
    demo = contextual_distinguishability_demo()
    return (
        CheckResult("kg_roundtrip", failures == 0, f"{count} random graphs, {failures} mismatches",
                    {"graphs": count, "failures": failures}),
        CheckResult("contextual_distinguishability", demo["passed"],
                    f"{demo['atoms']} atoms vs {demo['projected_triples']} projected triple(s)", demo),
    )


def check_noise_sweep(seed: int) -> CheckResult:
    rows = noise_sweep(seed=seed)
    masses = [r["relevant_mass"] for r in rows]
    ok = all(b <= a + 1e-12 for a, b in zip(masses, masses[1:]))
    return CheckResult("noise_robustness", ok,
                       "relevant mass non-increasing in p_noise: " + ", ".join(f"{m:.4f}" for m in masses),
                       {"rows": rows})


def check_decomposition() -> CheckResult:
    result = decomposition_coverage(k=3, c=1, sub_demands=[3, 2], total_demand=5)
    ok = result["single"] < 1.0 and result["decomposed"] == 1.0
    return CheckResult("decomposition_coverage", ok,
                       f"k=3,c=1,m=5: single {result['single']:.2f}, two sub-queries {result['decomposed']:.2f}",
                       result)


def run_theory_checks(seed: int = 0, grid_spec: str = "full", workers: int = 4) -> List[CheckResult]:
    if grid_spec not in GRID_SPECS:
        raise ValueError(f"grid spec must be one of {sorted(GRID_SPECS)}")
    sizes = GRID_SPECS[grid_spec]
    results = [check_leakage()]
    results.extend(check_misranking(sizes["trials"], seed, workers))
    results.append(check_coverage(sizes["coverage_instances"], seed))
    results.append(check_decomposition())
    results.extend(check_kg_roundtrip(sizes["kgs"], seed))
    results.append(check_noise_sweep(seed))
    return results

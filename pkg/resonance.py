"""
Entity-resonance retrieval: seed distribution and graph propagation.

A query embedding seeds both atoms (dense similarity, attenuated by alpha) and
entities (embedding match above a threshold). Mass then spreads over the
Atom-Entity Graph with personalized PageRank or one of five alternates, and
the stationary mass on atom nodes is the atom relevance score.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path
from scipy.sparse.linalg import spsolve

from aeg_graph import AtomEntityGraph
from errors import ConvergenceError, GraphError, UnknownStrategyError

logger = logging.getLogger(__name__)

STRATEGIES = ("ppr", "rwr", "power_iteration", "katz", "label_propagation", "weighted_bfs")


class PropagationGraph:
    """Node order, symmetric weighted adjacency and the atom mask.

    Every stored edge is used in both directions; parallel edges between the
    same pair (for example relevance and synonym) add their weights.
    """

    def __init__(self, node_ids: Sequence[str], adjacency: sp.csr_matrix, atom_mask: np.ndarray):
        self.node_ids = list(node_ids)
        self.index = {nid: i for i, nid in enumerate(self.node_ids)}
        self.adjacency = adjacency.tocsr()
        self.atom_mask = np.asarray(atom_mask, dtype=bool)
        self.degree = np.asarray(self.adjacency.sum(axis=1)).ravel()
        self.dangling = self.degree == 0
        self.inv_degree = np.zeros_like(self.degree)
        self.inv_degree[~self.dangling] = 1.0 / self.degree[~self.dangling]
        # column-stochastic Páµ without the dangling columns
        self.transition_t = (self.adjacency @ sp.diags(self.inv_degree)).tocsr()

    @property
    def size(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_edges(cls, node_ids: Sequence[str], edges: Iterable[Tuple[str, str, float]],
                   atom_ids: Optional[Iterable[str]] = None) -> "PropagationGraph":
        index = {nid: i for i, nid in enumerate(node_ids)}
        rows, cols, vals = [], [], []
        for u, v, w in edges:
            if w <= 0:
                raise GraphError(f"edge ({u}, {v}) has non-positive weight {w}")
            i, j = index[u], index[v]
            rows.append(i)
            cols.append(j)
            vals.append(float(w))
            if i != j:
                rows.append(j)
                cols.append(i)
                vals.append(float(w))
        n = len(node_ids)
        adjacency = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64).tocsr()
        adjacency.sum_duplicates()
        atoms = set(atom_ids or ())
        mask = np.array([nid in atoms for nid in node_ids], dtype=bool)
        return cls(node_ids, adjacency, mask)

    @classmethod
    def from_aeg(cls, graph: AtomEntityGraph) -> "PropagationGraph":
        graph.require_frozen()
        edges = [(u, v, w) for u, v, w, _ in graph.weighted_edges()]
        return cls.from_edges(graph.node_ids(), edges, graph.atoms.keys())

    def to_vector(self, masses: Dict[str, float]) -> np.ndarray:
        vec = np.zeros(self.size)
        for nid, mass in masses.items():
            vec[self.index[nid]] = mass
        return vec

    def step(self, r: np.ndarray, pi: np.ndarray) -> np.ndarray:
        """One application of Páµ with dangling mass sent back to the seeds"""
        return self.transition_t @ r + r[self.dangling].sum() * pi


@dataclass
class PersonalizationVector:
    masses: Dict[str, float]
    atom_seeds: Dict[str, float] = field(default_factory=dict)
    entity_seeds: Dict[str, float] = field(default_factory=dict)
    fallback: bool = False

    def total(self) -> float:
        return float(sum(self.masses.values()))


@dataclass
class ResonanceScores:
    node_ids: List[str]
    values: np.ndarray
    strategy: str
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    seconds: float = 0.0

    def metadata(self) -> Dict:
        return {
            "strategy": self.strategy,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "seconds": round(self.seconds, 6),
        }


@dataclass
class PropagationParams:
    rho: float = 0.3
    tol: float = 1e-8
    max_iter: int = 1000
    num_walks: int = 1000
    walk_length: int = 10
    num_iter: int = 20
    katz_decay: float = 0.5
    bfs_decay: float = 0.5
    bfs_max_hops: int = 3
    seed: int = 0

    @classmethod
    def from_config(cls, config) -> "PropagationParams":
        return cls(
            rho=config.damping,
            tol=config.ppr_tol,
            max_iter=config.ppr_max_iter,
            num_walks=config.propagation_num_walks,
            walk_length=config.propagation_walk_length,
            num_iter=config.propagation_num_iter,
            katz_decay=config.katz_decay,
            bfs_decay=config.bfs_decay,
            bfs_max_hops=config.bfs_max_hops,
            seed=config.seed,
        )


# --- seeding ---------------------------------------------------------------

def normalize_seeds(raw: Dict[str, float]) -> Dict[str, float]:
    """Scale non-negative seed weights to a probability distribution"""
    for nid, w in raw.items():
        if w < 0 or not np.isfinite(w):
            raise ValueError(f"seed weight for '{nid}' must be finite and >= 0, got {w}")
    total = float(np.sum(np.fromiter(raw.values(), dtype=np.float64))) if raw else 0.0
    if total <= 0.0:
        return {}
    return {nid: w / total for nid, w in raw.items() if w > 0}


def seed(query_vec: np.ndarray, graph: AtomEntityGraph, alpha: float = 0.1, entity_top_k: int = 20,
         entity_sim_threshold: float = 0.3, entity_node_weight: float = 1.0, atom_top_k: int = 25,
         mention_vecs: Optional[List[np.ndarray]] = None) -> PersonalizationVector:
    """Combine attenuated atom seeds and entity seeds into one distribution.

    Entity similarity is the best match over the query itself and any
    entity mentions extracted from it.
    """
    graph.require_frozen()
    atom_hits = graph.atom_index().top_k(query_vec, atom_top_k) if graph.atoms else []
    atom_seeds = {aid: alpha * max(0.0, sim) for aid, sim in atom_hits}

    entity_sims: Dict[str, float] = {}
    entity_index = graph.entity_index()
    if len(entity_index):
        for vec in [query_vec] + list(mention_vecs or []):
            for eid, sim in entity_index.top_k(vec, entity_top_k):
                if sim >= entity_sim_threshold:
                    entity_sims[eid] = max(sim, entity_sims.get(eid, 0.0))
        if len(entity_sims) > entity_top_k:
            ranked = sorted(entity_sims.items(), key=lambda kv: (-kv[1], kv[0]))[:entity_top_k]
            entity_sims = dict(ranked)
    entity_seeds = {eid: entity_node_weight * sim for eid, sim in entity_sims.items()}

    combined = dict(entity_seeds)
    for aid, w in atom_seeds.items():
        combined[aid] = combined.get(aid, 0.0) + w
    masses = normalize_seeds(combined)
    if masses:
        return PersonalizationVector(masses, atom_seeds, entity_seeds)

    if not atom_hits:
        raise GraphError("no seed mass and no atoms to fall back on")
    logger.warning("empty seed mass, falling back to uniform over the %d nearest atoms", len(atom_hits))
    uniform = {aid: 1.0 / len(atom_hits) for aid, _ in atom_hits}
    return PersonalizationVector(uniform, atom_seeds, entity_seeds, fallback=True)


# --- strategies ------------------------------------------------------------

def ppr(pg: PropagationGraph, pi: np.ndarray, rho: float = 0.3, tol: float = 1e-8,
        max_iter: int = 1000) -> ResonanceScores:
    """Fixed point of r = rho*pi + (1-rho)*Páµr by iteration, stopping on L1 residual < tol"""
    pi = np.asarray(pi, dtype=np.float64)
    r = pi.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        nxt = rho * pi + (1.0 - rho) * pg.step(r, pi)
        residual = float(np.abs(nxt - r).sum())
        r = nxt
        if residual < tol:
            return ResonanceScores(pg.node_ids, r, "ppr", it, residual, True)
    raise ConvergenceError(residual, max_iter)


def power_iteration(pg: PropagationGraph, pi: np.ndarray, rho: float = 0.3) -> ResonanceScores:
    """Direct sparse solve of the PPR fixed-point equation.

    (I - (1-rho)Páµ) x = pi without the dangling columns; the dangling term only
    rescales pi, so normalising x gives the same fixed point as ppr().
    """
    pi = np.asarray(pi, dtype=np.float64)
    system = (sp.identity(pg.size, format="csc") - (1.0 - rho) * pg.transition_t.tocsc()).tocsc()
    x = np.atleast_1d(spsolve(system, pi))
    r = x / x.sum()
    residual = float(np.abs(rho * pi + (1.0 - rho) * pg.step(r, pi) - r).sum())
    return ResonanceScores(pg.node_ids, r, "power_iteration", 1, residual, True)


def rwr(pg: PropagationGraph, pi: np.ndarray, rho: float = 0.3, num_walks: int = 1000,
        walk_length: int = 10, seed_value: int = 0) -> ResonanceScores:
    """Monte-Carlo random walks with restart; the endpoint histogram estimates PPR.

    Each walk starts at a node drawn from pi and stops with probability rho per
    step. Walks still running after walk_length steps stop where they are.
    """
    rng = np.random.default_rng(seed_value)
    pi = np.asarray(pi, dtype=np.float64)
    p = pi / pi.sum()
    adj = pg.adjacency
    cum = np.cumsum(adj.data)
    row_start = np.concatenate(([0.0], cum))[adj.indptr[:-1]]

    pos = rng.choice(pg.size, size=num_walks, p=p)
    ends = np.empty(num_walks, dtype=np.int64)
    alive = np.arange(num_walks)
    for _ in range(walk_length):
        if alive.size == 0:
            break
        stop = rng.random(alive.size) < rho
        ends[alive[stop]] = pos[alive[stop]]
        alive = alive[~stop]
        if alive.size == 0:
            break
        cur = pos[alive]
        nxt = np.empty_like(cur)
        dead_end = pg.dangling[cur]
        if dead_end.any():
            nxt[dead_end] = rng.choice(pg.size, size=int(dead_end.sum()), p=p)
        move = ~dead_end
        if move.any():
            src = cur[move]
            target = row_start[src] + rng.random(src.size) * pg.degree[src]
            slot = np.searchsorted(cum, target, side="right")
            slot = np.minimum(slot, adj.indptr[src + 1] - 1)
            nxt[move] = adj.indices[slot]
        pos[alive] = nxt
    ends[alive] = pos[alive]

    values = np.bincount(ends, minlength=pg.size).astype(np.float64) / num_walks
    return ResonanceScores(pg.node_ids, values, "rwr", walk_length, 0.0, True)


def katz(pg: PropagationGraph, pi: np.ndarray, decay: float = 0.5, max_len: int = 20) -> ResonanceScores:
    """Random-walk Katz: sum of decay**L * (Pᵀ)**L pi for L = 0..max_len, normalised.

    Walks are weighted by transition probability rather than raw edge weight,
    so the series converges for any decay < 1 without a spectral-radius bound.
    Mass reaching a dangling node stops there.
    """
    pi = np.asarray(pi, dtype=np.float64)
    term = pi.copy()
    total = pi.copy()
    for _ in range(max_len):
        if decay == 0.0:
            break
        term = decay * (pg.transition_t @ term)
        total += term
    return ResonanceScores(pg.node_ids, total / total.sum(), "katz", max_len, 0.0, True)


def label_propagation(pg: PropagationGraph, pi: np.ndarray, rho: float = 0.3,
                      num_iter: int = 20) -> ResonanceScores:
    """Iterative diffusion F <- (1-rho)Â·SÂ·F + rhoÂ·Y with S = D^-1/2 A D^-1/2"""
    pi = np.asarray(pi, dtype=np.float64)
    inv_sqrt = np.sqrt(pg.inv_degree)
    S = sp.diags(inv_sqrt) @ pg.adjacency @ sp.diags(inv_sqrt)
    f = pi.copy()
    residual = 0.0
    for _ in range(num_iter):
        nxt = (1.0 - rho) * (S @ f) + rho * pi
        residual = float(np.abs(nxt - f).sum())
        f = nxt
    return ResonanceScores(pg.node_ids, f / f.sum(), "label_propagation", num_iter, residual, True)


def weighted_bfs(pg: PropagationGraph, pi: np.ndarray, decay: float = 0.5, max_hops: int = 3) -> ResonanceScores:
    """Hop expansion from every seed, each node credited seed_mass * decay**hops"""
    pi = np.asarray(pi, dtype=np.float64)
    seeds = np.nonzero(pi > 0)[0]
    values = np.zeros(pg.size)
    if seeds.size:
        dist = shortest_path(pg.adjacency, directed=False, unweighted=True, indices=seeds)
        dist = np.atleast_2d(dist)
        reach = np.isfinite(dist) & (dist <= max_hops)
        weights = np.where(reach, np.power(decay, np.where(reach, dist, 0.0)), 0.0)
        values = pi[seeds] @ weights
    return ResonanceScores(pg.node_ids, values / values.sum(), "weighted_bfs", max_hops, 0.0, True)


def propagate(strategy: str, pg: PropagationGraph, pi: np.ndarray,
              params: Optional[PropagationParams] = None) -> ResonanceScores:
    params = params or PropagationParams()
    started = time.perf_counter()
    if strategy == "ppr":
        scores = ppr(pg, pi, params.rho, params.tol, params.max_iter)
    elif strategy == "power_iteration":
        scores = power_iteration(pg, pi, params.rho)
    elif strategy == "rwr":
        scores = rwr(pg, pi, params.rho, params.num_walks, params.walk_length, params.seed)
    elif strategy == "katz":
        scores = katz(pg, pi, params.katz_decay, params.num_iter)
    elif strategy == "label_propagation":
        scores = label_propagation(pg, pi, params.rho, params.num_iter)
    elif strategy == "weighted_bfs":
        scores = weighted_bfs(pg, pi, params.bfs_decay, params.bfs_max_hops)
    else:
        raise UnknownStrategyError(f"unknown propagation strategy '{strategy}' (choose from {', '.join(STRATEGIES)})")
    scores.seconds = time.perf_counter() - started
    return scores


def score_atoms(scores: ResonanceScores, pg: PropagationGraph) -> Dict[str, float]:
    """Restrict node scores to atom nodes"""
    return {pg.node_ids[i]: float(scores.values[i]) for i in np.nonzero(pg.atom_mask)[0]}


# --- inspection ------------------------------------------------------------

def explain_chains(pg: PropagationGraph, graph: AtomEntityGraph, pv: PersonalizationVector, atom_id: str,
                   max_hops: int = 3, limit: int = 5, fanout: int = 10) -> List[Dict]:
    """Strongest seed-to-atom paths, scored by seed mass times transition probabilities"""
    if atom_id not in pg.index:
        raise GraphError(f"unknown atom '{atom_id}'")
    adj = pg.adjacency
    target = pg.index[atom_id]
    seeds = {pg.index[nid]: mass for nid, mass in pv.masses.items()}
    found: List[Tuple[float, List[int]]] = []

    def neighbours(u: int) -> List[Tuple[int, float]]:
        lo, hi = adj.indptr[u], adj.indptr[u + 1]
        pairs = sorted(zip(adj.indices[lo:hi], adj.data[lo:hi]), key=lambda p: (-p[1], p[0]))
        return [(int(v), float(w)) for v, w in pairs[:fanout]]

    # walk backwards from the atom; P(v -> u) = w / deg(v)
    def dfs(path: List[int], prob: float):
        head = path[-1]
        if head in seeds and len(path) > 1:
            found.append((seeds[head] * prob, list(reversed(path))))
        if len(path) > max_hops:
            return
        for v, w in neighbours(head):
            if v in path:
                continue
            dfs(path + [v], prob * w * pg.inv_degree[v])

    if target in seeds:
        found.append((seeds[target], [target]))
    dfs([target], 1.0)
    found.sort(key=lambda item: (-item[0], [pg.node_ids[i] for i in item[1]]))

    def label(nid: str) -> str:
        if nid in graph.entities:
            return graph.entities[nid].canonical_name
        return graph.atoms[nid].text if nid in graph.atoms else nid

    return [
        {"mass": mass, "path": [pg.node_ids[i] for i in path], "labels": [label(pg.node_ids[i]) for i in path]}
        for mass, path in found[:limit]
    ]


def sweep_parameter(pg: PropagationGraph, graph: AtomEntityGraph, query_vec: np.ndarray, name: str,
                    values: Sequence[float], config, top_n: int = 10) -> List[Dict]:
    """Re-run one query across a grid of damping or atom-seed weight values"""
    if name not in ("damping", "passage_node_weight"):
        raise ValueError(f"can only sweep 'damping' or 'passage_node_weight', not '{name}'")
    rows = []
    for value in values:
        cfg = config.replace(**{name: value})
        pv = seed(query_vec, graph, cfg.passage_node_weight, cfg.entity_top_k, cfg.entity_sim_threshold,
                  cfg.entity_node_weight, cfg.retrieval_top_k)
        scores = propagate(cfg.propagation_method, pg, pg.to_vector(pv.masses), PropagationParams.from_config(cfg))
        atoms = score_atoms(scores, pg)
        ranked = sorted(atoms.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
        rows.append({
            "parameter": name,
            "value": value,
            "top_atoms": [aid for aid, _ in ranked],
            "atom_mass": float(sum(atoms.values())),
            "seconds": scores.seconds,
        })
    return rows

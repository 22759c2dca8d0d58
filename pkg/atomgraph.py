#!/usr/bin/env python3
"""
atomgraph - build an Atom-Entity Graph from a corpus and answer questions over it

Commands:
  index         corpus.jsonl -> graph snapshot + build report
  query         questions -> JSONL result records (plan, evidence, answer)
  eval          result records + references -> FC / SS / ACC report
  stats         structural statistics of a snapshot
  theory-check  numerical checks of the retrieval guarantees
  sweep         one query across a grid of damping or atom-seed weights
  explain       strongest seed-to-atom paths for a query
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from colorama import Fore, Style, init

import evaluator
import ingest
import resonance
import theory_lab
from aeg_graph import AtomEntityGraph
from config import PROPAGATION_METHODS, RunConfig, load_config
from errors import AtomGraphError, ConfigError
from llm_gateway import build_gateway
from pipeline import QueryEngine, QueryResult
from vector_space import build_encoder

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2
EXIT_THEORY = 3

GREEN = Fore.GREEN
YELLOW = Fore.YELLOW
RED = Fore.RED
NC = Style.RESET_ALL

logger = logging.getLogger("atomgraph")


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def write_jsonl(path: str, rows: List[Dict]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: str) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def read_queries(path: str) -> List[str]:
    """One question per line, either plain text or {"query": ...}"""
    queries = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if not line.startswith("{"):
                queries.append(line)
                continue
            try:
                queries.append(str(json.loads(line)["query"]))
            except (ValueError, KeyError, TypeError) as e:
                raise UsageError(f"{path} line {lineno}: malformed query record ({e})")
    return queries


def load_snapshot(snapshot: str, config: RunConfig) -> AtomEntityGraph:
    graph = AtomEntityGraph.load(snapshot)
    built_with = graph.hyperparameters.get("encoder")
    if built_with and built_with != config.encoder:
        raise ConfigError(f"snapshot was built with encoder '{built_with}', config selects '{config.encoder}'")
    if config.encoder == "hashing" and graph.dim not in (None, config.embedding_dim):
        raise ConfigError(f"snapshot dimension {graph.dim} does not match embedding_dim {config.embedding_dim}")
    return graph


# --- commands --------------------------------------------------------------

def cmd_index(corpus_path: str, config: RunConfig, out_dir: str):
    corpus = ingest.load_corpus(corpus_path)
    gateway = build_gateway(config)
    encoder = build_encoder(config)
    graph, report = ingest.build_graph(corpus, gateway, encoder, config)

    snapshot_dir = os.path.join(out_dir, "graph")
    graph.save(snapshot_dir)
    with open(os.path.join(out_dir, "build_report.json"), "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)

    stats = report.stats
    print(f"{GREEN}✅ Indexed {report.documents} documents ({report.chunks} chunks){NC}")
    print(f"  Nodes: {stats['nodes']} ({stats['entities']} entities, {stats['atoms']} atoms)")
    print(f"  Edges: {stats['edges']} (containment {stats['containment']}, "
          f"related {stats['related']}, synonym {stats['synonym']})")
    if report.failed_chunks:
        print(f"{YELLOW}⚠️  {len(report.failed_chunks)} chunk(s) failed extraction, see build_report.json{NC}")
    print(f"  Snapshot: {snapshot_dir}")
    return graph, report


def cmd_query(snapshot: str, queries: List[str], config: RunConfig, out_path: Optional[str] = None) -> List[QueryResult]:
    graph = load_snapshot(snapshot, config)
    gateway = build_gateway(config)
    engine = QueryEngine(graph, gateway, build_encoder(config), config)

    print(f"🔎 Answering {len(queries)} question(s) with {config.propagation_method}...")
    results = engine.run_batch(queries)
    for result in results:
        ev = result.evidence
        print(f"  • {result.query[:70]}")
        print(f"    complexity {result.plan.complexity:.1f}, {len(result.plan.effective_set)} quer(ies); "
              f"R={len(ev.merged)} S={len(ev.filtered)} A*={len(ev.units)}; {result.timing['total']:.2f}s")
    if out_path:
        write_jsonl(out_path, [r.to_record() for r in results])
        print(f"  Results: {out_path}")
    usage = gateway.usage.snapshot()
    print(f"📊 Tokens: {usage['prompt_tokens']} prompt / {usage['completion_tokens']} completion "
          f"over {usage['calls']} call(s), est. ${usage['cost_usd']:.4f}")
    logger.info("usage by stage: %s", json.dumps(usage["by_stage"], sort_keys=True))
    return results


def cmd_eval(results_path: str, references_path: str, config: RunConfig, out_prefix: Optional[str] = None) -> Dict:
    results = read_jsonl(results_path)
    references = evaluator.load_references(references_path)
    report = evaluator.evaluate_results(results, references, build_gateway(config), build_encoder(config),
                                        alpha=config.metric_alpha)
    table = evaluator.format_table(report)
    print(table)
    if out_prefix:
        write_jsonl(out_prefix + ".jsonl", report["rows"])
        with open(out_prefix + ".txt", "w", encoding="utf-8") as f:
            f.write(table + "\n")
        print(f"  Report: {out_prefix}.jsonl, {out_prefix}.txt")
    return report


def cmd_stats(snapshot: str) -> Dict:
    stats = AtomEntityGraph.load(snapshot).compute_stats().to_dict()
    print("\n📊 Graph statistics:")
    for key in ("nodes", "entities", "atoms", "edges", "containment", "related", "synonym"):
        print(f"  {key:<14} {stats[key]}")
    print(f"  {'avg_degree':<14} {stats['avg_degree']:.4f}")
    print(f"  {'avg_clustering':<14} {stats['avg_clustering']:.4f}")
    return stats


def cmd_theory_check(seed: int, grid_spec: str, out_path: Optional[str] = None, workers: int = 4) -> bool:
    results = theory_lab.run_theory_checks(seed=seed, grid_spec=grid_spec, workers=workers)
    print(f"\n🧪 Theory checks (seed {seed}, grid '{grid_spec}')")
    for r in results:
        mark = f"{GREEN}✓ PASS{NC}" if r.passed else f"{RED}❌ FAIL{NC}"
        print(f"  {mark}  {r.name:<30} {r.detail}")
    if out_path:
        write_jsonl(out_path, [r.to_dict() for r in results])
    passed = all(r.passed for r in results)
    color = GREEN if passed else RED
    print(f"{color}{sum(r.passed for r in results)}/{len(results)} checks passed{NC}")
    return passed


def cmd_sweep(snapshot: str, query: str, name: str, values: List[float], config: RunConfig) -> List[Dict]:
    graph = load_snapshot(snapshot, config)
    pg = resonance.PropagationGraph.from_aeg(graph)
    rows = resonance.sweep_parameter(pg, graph, build_encoder(config).encode(query), name, values, config)
    print(f"\n📈 Sweep of {name} for: {query}")
    for row in rows:
        print(f"  {name}={row['value']:<6} atom mass {row['atom_mass']:.4f}  {row['seconds'] * 1000:.1f} ms  "
              f"top: {', '.join(row['top_atoms'][:3])}")
    return rows


def cmd_explain(snapshot: str, query: str, config: RunConfig, atom_id: Optional[str] = None) -> List[Dict]:
    graph = load_snapshot(snapshot, config)
    pg = resonance.PropagationGraph.from_aeg(graph)
    vec = build_encoder(config).encode(query)
    pv = resonance.seed(vec, graph, config.passage_node_weight, config.entity_top_k, config.entity_sim_threshold,
                        config.entity_node_weight, config.retrieval_top_k)
    if atom_id is None:
        scores = resonance.propagate(config.propagation_method, pg, pg.to_vector(pv.masses),
                                     resonance.PropagationParams.from_config(config))
        atoms = resonance.score_atoms(scores, pg)
        atom_id = max(sorted(atoms), key=lambda a: atoms[a])
    elif atom_id not in graph.atoms:
        raise UsageError(f"--atom '{atom_id}' is not an atom id in this snapshot")
    chains = resonance.explain_chains(pg, graph, pv, atom_id, max_hops=config.bfs_max_hops)
    print(f"\n🔗 Resonance chains into {atom_id}: {graph.atoms[atom_id].text}")
    for chain in chains:
        print(f"  {chain['mass']:.2e}  " + " → ".join(chain["labels"]))
    return chains


# --- entry point -----------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="atomgraph", description="Atom-Entity Graph retrieval")
    parser.add_argument("--config", default="config.yaml", help="YAML config file")
    parser.add_argument("--backend", choices=["remote", "mock"])
    parser.add_argument("--strategy", choices=PROPAGATION_METHODS)
    parser.add_argument("--top-k", type=int, help="candidate atoms per query")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--budget-tokens", type=int, help="context token cap for evidence")
    parser.add_argument("--mode", choices=["abstract", "precise"])
    parser.add_argument("--workers", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a graph snapshot")
    p.add_argument("corpus")
    p.add_argument("--out", default="output/index")

    p = sub.add_parser("query", help="answer questions")
    p.add_argument("snapshot")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--query")
    group.add_argument("--query-file")
    p.add_argument("--out", default="output/results.jsonl")

    p = sub.add_parser("eval", help="score result records against references")
    p.add_argument("results")
    p.add_argument("references")
    p.add_argument("--out", default="output/eval")

    p = sub.add_parser("stats", help="graph statistics")
    p.add_argument("snapshot")

    p = sub.add_parser("theory-check", help="numerical checks")
    p.add_argument("--grid", choices=sorted(theory_lab.GRID_SPECS), default="full")
    p.add_argument("--out", default="output/theory_check.jsonl")

    p = sub.add_parser("sweep", help="damping / seed-weight sensitivity for one query")
    p.add_argument("snapshot")
    p.add_argument("--query", required=True)
    p.add_argument("--param", choices=["damping", "passage_node_weight"], default="damping")
    p.add_argument("--values", default="0.1,0.2,0.3,0.5,0.7,0.9")

    p = sub.add_parser("explain", help="seed-to-atom resonance chains")
    p.add_argument("snapshot")
    p.add_argument("--query", required=True)
    p.add_argument("--atom")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    init()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{RED}❌ {e}{NC}", file=sys.stderr)
        return EXIT_USAGE

    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        config = load_config(args.config, {
            "backend": args.backend,
            "propagation_method": args.strategy,
            "retrieval_top_k": args.top_k,
            "seed": args.seed,
            "context_budget_tokens": args.budget_tokens,
            "answer_mode": args.mode,
            "workers": args.workers,
        })
    except ConfigError as e:
        print(f"{RED}❌ Config error: {e}{NC}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "index":
            cmd_index(args.corpus, config, args.out)
        elif args.command == "query":
            queries = [args.query] if args.query else read_queries(args.query_file)
            cmd_query(args.snapshot, queries, config, args.out)
        elif args.command == "eval":
            cmd_eval(args.results, args.references, config, args.out)
        elif args.command == "stats":
            cmd_stats(args.snapshot)
        elif args.command == "theory-check":
            if not cmd_theory_check(config.seed, args.grid, args.out, config.workers):
                return EXIT_THEORY
        elif args.command == "sweep":
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                print(f"{RED}❌ --values must be a comma-separated list of numbers{NC}", file=sys.stderr)
                return EXIT_USAGE
            cmd_sweep(args.snapshot, args.query, args.param, values, config)
        elif args.command == "explain":
            cmd_explain(args.snapshot, args.query, config, args.atom)
    except UsageError as e:
        print(f"{RED}❌ {e}{NC}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"{RED}❌ Config error: {e}{NC}", file=sys.stderr)
        return EXIT_USAGE
    except (AtomGraphError, OSError) as e:
        print(f"{RED}❌ {type(e).__name__}: {e}{NC}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

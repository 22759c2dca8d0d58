"""
Run configuration: defaults, config.yaml, environment overrides and CLI flags.

Precedence is CLI flag > environment > file > default.
"""

import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional

import yaml

from errors import ConfigError

ENV_PREFIX = "ATOMGRAPH_"
PROPAGATION_METHODS = ("ppr", "rwr", "power_iteration", "katz", "label_propagation", "weighted_bfs")


@dataclass
class RunConfig:
    # Retrieval hyperparameters (reference defaults)
    retrieval_top_k: int = 25
    synonymy_edge_topk: int = 2047
    synonymy_edge_sim_threshold: float = 0.8
    entity_node_weight: float = 1.0
    entity_top_k: int = 20
    entity_sim_threshold: float = 0.3
    propagation_method: str = "ppr"
    damping: float = 0.3
    passage_node_weight: float = 0.1
    propagation_num_iter: int = 20
    propagation_num_walks: int = 1000
    propagation_walk_length: int = 10
    max_sub_questions: int = 3
    complexity_threshold: float = 6.5

    # Solver knobs
    ppr_tol: float = 1e-8
    ppr_max_iter: int = 1000
    katz_decay: float = 0.5
    bfs_decay: float = 0.5
    bfs_max_hops: int = 3

    # Backends
    backend: str = "mock"
    encoder: str = "hashing"
    embedding_dim: int = 64
    llm_base_url: str = "https://api.openai.com/v1"
    llm_model: str = "gpt-4o-mini"
    llm_api_key: str = ""
    llm_temperature: float = 0.0
    llm_timeout: float = 60.0
    llm_max_concurrency: int = 4
    llm_max_retries: int = 3
    encoder_url: str = ""
    encoder_api_key: str = ""
    encoder_model: str = "BAAI/bge-large-en-v1.5"
    encoder_batch_size: int = 32
    fixtures_path: str = "fixtures/gateway_fixtures.json"
    prompt_price_per_million: float = 0.15
    completion_price_per_million: float = 0.60

    # Corpus
    chunk_size_tokens: int = 256
    chunk_overlap_tokens: int = 32
    atomize: bool = True

    # Query pipeline
    context_budget_tokens: int = 4096
    answer_mode: str = "abstract"
    use_decomposition: bool = True
    use_graph: bool = True
    use_sieve: bool = True
    query_entity_ner: bool = False
    workers: int = 4
    seed: int = 0

    # Evaluation
    metric_alpha: float = 0.7

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.propagation_method not in PROPAGATION_METHODS:
            raise ConfigError(f"propagation_method must be one of {PROPAGATION_METHODS}, got '{self.propagation_method}'")
        if self.backend not in ("remote", "mock"):
            raise ConfigError(f"backend must be 'remote' or 'mock', got '{self.backend}'")
        if self.encoder not in ("remote", "hashing"):
            raise ConfigError(f"encoder must be 'remote' or 'hashing', got '{self.encoder}'")
        if self.answer_mode not in ("abstract", "precise"):
            raise ConfigError(f"answer_mode must be 'abstract' or 'precise', got '{self.answer_mode}'")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("damping (restart probability) must lie in (0, 1]")
        if self.retrieval_top_k < 1:
            raise ConfigError("retrieval_top_k must be >= 1")
        if self.chunk_size_tokens <= self.chunk_overlap_tokens or self.chunk_overlap_tokens < 0:
            raise ConfigError("chunk sizes need chunk_size_tokens > chunk_overlap_tokens >= 0")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = {}
        for key, raw in data.items():
            values[key] = _coerce(key, raw, type(getattr(cls, key)))
        return cls(**values)

    def replace(self, **overrides) -> "RunConfig":
        merged = self.to_dict()
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_mapping(merged)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def public_dict(self) -> Dict[str, Any]:
        """Config without secrets, safe to store in manifests and result records"""
        data = self.to_dict()
        for key in ("llm_api_key", "encoder_api_key"):
            if data.get(key):
                data[key] = "***"
        return data


def _coerce(key: str, raw: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(raw, str) and raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key '{key}' expects a boolean, got {raw!r}")
    try:
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if kind is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' expects {kind.__name__}, got {raw!r}")


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    names = {f.name for f in fields(RunConfig)}
    found = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in names:
                found[key] = value
    return found


def load_config(path: Optional[str] = "config.yaml",
                cli_overrides: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Load config.yaml (if present), then layer env and CLI overrides on top"""
    merged: Dict[str, Any] = {}
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path} is not valid YAML: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a flat key/value mapping")
        merged.update(data)
    elif path and path != "config.yaml":
        raise ConfigError(f"config file not found: {path}")

    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (cli_overrides or {}).items() if v is not None})
    return RunConfig.from_mapping(merged)

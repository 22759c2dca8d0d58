"""
Exception hierarchy shared by every atomgraph module.
"""

from typing import Optional


class AtomGraphError(Exception):
    """Base class for all atomgraph failures"""


class ConfigError(AtomGraphError):
    pass


# --- graph -----------------------------------------------------------------

class GraphError(AtomGraphError):
    pass


class GraphFrozenError(GraphError):
    pass


class GraphNotFrozenError(GraphError):
    pass


class DuplicateAtomError(GraphError):
    def __init__(self, atom_id: str):
        super().__init__(f"atom '{atom_id}' already exists with a different payload")
        self.atom_id = atom_id


class UnknownEntityError(GraphError):
    def __init__(self, atom_id: str, entity_id: str):
        super().__init__(f"atom '{atom_id}' references unknown entity '{entity_id}'")
        self.atom_id = atom_id
        self.entity_id = entity_id


class EmbeddingError(GraphError):
    pass


class SnapshotError(GraphError):
    pass


# --- encoders and LLM ------------------------------------------------------

class EncoderError(AtomGraphError):
    def __init__(self, message: str, retryable: bool = False, cause: Optional[BaseException] = None):
        super().__init__(message)
        self.retryable = retryable
        self.cause = cause


class GatewayError(AtomGraphError):
    pass


class AuthError(GatewayError):
    pass


class TransientGatewayError(GatewayError):
    pass


class FixtureMissError(GatewayError):
    def __init__(self, template_name: str, digest: str):
        super().__init__(f"no mock fixture for template '{template_name}' (bindings digest {digest})")
        self.template_name = template_name
        self.digest = digest


class MalformedOutputError(GatewayError):
    """Model output that is not parseable; keeps the raw text for the caller"""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class SchemaViolationError(MalformedOutputError):
    def __init__(self, field: str, message: str, raw_text: str):
        super().__init__(f"schema violation at '{field}': {message}", raw_text)
        self.field = field


# --- retrieval -------------------------------------------------------------

class ConvergenceError(AtomGraphError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"propagation did not converge after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class UnknownStrategyError(AtomGraphError):
    pass


class ExtractionError(AtomGraphError):
    def __init__(self, doc_id: str, chunk_index: int, cause: BaseException):
        super().__init__(f"extraction failed for {doc_id}#{chunk_index}: {cause}")
        self.doc_id = doc_id
        self.chunk_index = chunk_index
        self.cause = cause


class BuildError(AtomGraphError):
    pass


class InsufficientTrialsError(AtomGraphError):
    pass

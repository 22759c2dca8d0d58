"""
LLM gateway: prompt registry, chat backends and structured output parsing.

Every model call in the pipeline goes through LlmGateway.complete(). The
remote backend speaks the chat-completions wire format; the mock backend
answers from a fixture file and never invents a response.
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import requests
from jinja2 import Environment, FileSystemLoader, StrictUndefined, meta
from jinja2.exceptions import TemplateNotFound, UndefinedError
from pydantic import BaseModel, Field, ValidationError

from errors import (
    AuthError,
    FixtureMissError,
    GatewayError,
    MalformedOutputError,
    SchemaViolationError,
    TransientGatewayError,
)

logger = logging.getLogger(__name__)

TEMPLATES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates", "prompts")

# template name -> expected output schema tag
TEMPLATE_SCHEMAS = {
    "ner": "entity_list",
    "unified_extraction": "extraction",
    "complexity": "complexity",
    "decomposition": "sub_questions",
    "atom_filter": "index_list",
    "abstract_qa": "text",
    "precise_qa": "text",
    "claim_verification": "claim_counts",
}

TEMPLATE_STAGES = {
    "ner": "construction",
    "unified_extraction": "construction",
    "complexity": "decomposition",
    "decomposition": "decomposition",
    "atom_filter": "sieve",
    "abstract_qa": "generation",
    "precise_qa": "generation",
    "claim_verification": "evaluation",
}

SYSTEM_PROMPT = (
    "You are a careful assistant for evidence extraction and grounded question answering. "
    "Follow the requested output format exactly."
)

REPAIR_SUFFIX = (
    "Your previous reply could not be used: {error}. "
    "Reply again with only the requested output, with no commentary."
)


# --- payload schemas -------------------------------------------------------

class EntityListPayload(BaseModel):
    named_entities: List[str]


class AtomPayload(BaseModel):
    text: str
    entities: List[str] = Field(default_factory=list)
    span: Optional[Tuple[int, int]] = None


class ExtractionPayload(BaseModel):
    atoms: List[AtomPayload]
    triples: List[Tuple[str, str, str]] = Field(default_factory=list)


class ComplexityPayload(BaseModel):
    score: float


class SubQuestionPayload(BaseModel):
    question: str
    focus: str = "facet"


class SubQuestionsPayload(BaseModel):
    sub_questions: List[SubQuestionPayload]


class IndexListPayload(BaseModel):
    keep: List[int]


class ClaimCountsPayload(BaseModel):
    tp: int = Field(ge=0)
    fp: int = Field(ge=0)
    fn: int = Field(ge=0)


SCHEMAS = {
    "entity_list": EntityListPayload,
    "extraction": ExtractionPayload,
    "complexity": ComplexityPayload,
    "sub_questions": SubQuestionsPayload,
    "index_list": IndexListPayload,
    "claim_counts": ClaimCountsPayload,
}

# bare top-level lists are accepted for these schemas and wrapped under the key
LIST_WRAPPERS = {
    "entity_list": "named_entities",
    "sub_questions": "sub_questions",
    "index_list": "keep",
}


def _extract_json(raw: str) -> Any:
    text = raw.strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fenced:
        text = fenced.group(1).strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    for open_ch, close_ch in (("{", "}"), ("[", "]")):
        start, end = text.find(open_ch), text.rfind(close_ch)
        if start != -1 and end > start:
            try:
                return json.loads(text[start:end + 1])
            except ValueError:
                continue
    raise MalformedOutputError("model output is not JSON", raw)


def parse_json_payload(response, schema_tag: str):
    """Validate a response (or raw text) against a schema tag.

    Returns the pydantic payload, or the stripped text for the 'text' schema.
    Extraneous keys are ignored; the first violation is reported by field.
    """
    raw = response.raw_text if isinstance(response, LlmResponse) else str(response)

    if schema_tag == "text":
        if not raw.strip():
            raise MalformedOutputError("model returned empty text", raw)
        return raw.strip()

    model = SCHEMAS.get(schema_tag)
    if model is None:
        raise GatewayError(f"unknown schema tag '{schema_tag}'")

    if schema_tag == "complexity":
        bare = re.fullmatch(r"\s*(-?\d+(?:\.\d+)?)\s*", raw)
        if bare:
            return ComplexityPayload(score=float(bare.group(1)))

    data = _extract_json(raw)
    if isinstance(data, list) and schema_tag in LIST_WRAPPERS:
        data = {LIST_WRAPPERS[schema_tag]: data}
    if schema_tag == "sub_questions" and isinstance(data, dict):
        items = data.get("sub_questions")
        if isinstance(items, list):
            data = dict(data, sub_questions=[{"question": s} if isinstance(s, str) else s for s in items])

    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(part) for part in first.get("loc", ())) or "<root>"
        raise SchemaViolationError(loc, first.get("msg", "invalid"), raw)


# --- templates -------------------------------------------------------------

@dataclass
class PromptTemplate:
    name: str
    schema_tag: str
    source: str
    placeholders: frozenset


class PromptRegistry:
    """Loads templates/prompts/<name>.j2 for every registered template name"""

    def __init__(self, templates_dir: str = TEMPLATES_DIR):
        self.env = Environment(
            loader=FileSystemLoader(templates_dir),
            undefined=StrictUndefined,
            keep_trailing_newline=True,
            autoescape=False,
        )
        self.env.filters["tojson_compact"] = lambda value: json.dumps(value, ensure_ascii=False)
        self.templates: Dict[str, PromptTemplate] = {}
        for name, schema_tag in TEMPLATE_SCHEMAS.items():
            try:
                source, _, _ = self.env.loader.get_source(self.env, f"{name}.j2")
            except TemplateNotFound:
                raise GatewayError(f"prompt template '{name}.j2' not found in {templates_dir}")
            placeholders = frozenset(meta.find_undeclared_variables(self.env.parse(source)))
            self.templates[name] = PromptTemplate(name, schema_tag, source, placeholders)

    def get(self, name: str) -> PromptTemplate:
        if name not in self.templates:
            raise GatewayError(f"unknown prompt template '{name}'")
        return self.templates[name]

    def render(self, name: str, bindings: Dict[str, Any]) -> str:
        template = self.get(name)
        missing = sorted(template.placeholders - set(bindings))
        if missing:
            raise GatewayError(f"template '{name}' has unbound placeholder(s): {', '.join(missing)}")
        try:
            return self.env.get_template(f"{name}.j2").render(**bindings)
        except UndefinedError as e:
            raise GatewayError(f"template '{name}' failed to render: {e}")


def bindings_digest(template_name: str, bindings: Dict[str, Any]) -> str:
    canonical = json.dumps({"template": template_name, "bindings": bindings},
                           sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# --- responses and usage ---------------------------------------------------

@dataclass
class LlmResponse:
    template_name: str
    raw_text: str
    payload: Any
    prompt_tokens: int
    completion_tokens: int
    latency: float
    repaired: bool = False


@dataclass
class BackendReply:
    text: str
    prompt_tokens: int
    completion_tokens: int


class UsageLedger:
    """Thread-safe token counters, per template and per pipeline stage"""

    def __init__(self, prompt_price_per_million: float = 0.0, completion_price_per_million: float = 0.0,
                 parent: Optional["UsageLedger"] = None):
        self._lock = threading.Lock()
        self.parent = parent
        self.prompt_price = prompt_price_per_million
        self.completion_price = completion_price_per_million
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.by_template: Dict[str, Dict[str, int]] = {}
        self.by_stage: Dict[str, Dict[str, int]] = {}

    def record(self, template_name: str, stage: str, prompt_tokens: int, completion_tokens: int):
        with self._lock:
            self.calls += 1
            self.prompt_tokens += prompt_tokens
            self.completion_tokens += completion_tokens
            for bucket, key in ((self.by_template, template_name), (self.by_stage, stage)):
                row = bucket.setdefault(key, {"calls": 0, "prompt_tokens": 0, "completion_tokens": 0})
                row["calls"] += 1
                row["prompt_tokens"] += prompt_tokens
                row["completion_tokens"] += completion_tokens
        if self.parent is not None:
            self.parent.record(template_name, stage, prompt_tokens, completion_tokens)

    def cost_usd(self) -> float:
        return (self.prompt_tokens * self.prompt_price + self.completion_tokens * self.completion_price) / 1e6

    def snapshot(self) -> Dict:
        with self._lock:
            return {
                "calls": self.calls,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "cost_usd": round(self.cost_usd(), 6),
                "by_template": json.loads(json.dumps(self.by_template)),
                "by_stage": json.loads(json.dumps(self.by_stage)),
            }


# --- backends --------------------------------------------------------------

class ChatBackend:
    def chat(self, messages: List[Dict[str, str]], template_name: str,
             bindings: Dict[str, Any], repair: bool = False) -> BackendReply:
        raise NotImplementedError


class RemoteChatBackend(ChatBackend):
    """OpenAI-compatible /chat/completions client"""

    def __init__(self, base_url: str, api_key: str, model: str, temperature: float = 0.0,
                 timeout: float = 60.0, max_retries: int = 3, backoff: float = 1.0):
        if not api_key:
            raise AuthError("remote backend selected but no API key is configured (ATOMGRAPH_LLM_API_KEY)")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max(1, max_retries)
        self.backoff = backoff
        self.session = requests.Session()
        self.session.headers.update({
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        })

    def chat(self, messages, template_name, bindings, repair=False) -> BackendReply:
        last_error: Optional[TransientGatewayError] = None
        for attempt in range(self.max_retries):
            try:
                return self._post(messages)
            except TransientGatewayError as e:
                last_error = e
                if attempt + 1 < self.max_retries:
                    wait = self.backoff * (2 ** attempt)
                    logger.warning("%s: transient failure (%s), retry %d/%d in %.1fs",
                                   template_name, e, attempt + 1, self.max_retries - 1, wait)
                    time.sleep(wait)
        raise last_error

    def _post(self, messages) -> BackendReply:
        body = {"model": self.model, "messages": messages, "temperature": self.temperature}
        try:
            response = self.session.post(self.url, json=body, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransientGatewayError(f"request failed: {e}")

        status = response.status_code
        if status in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {status})")
        if status == 429 or status >= 500:
            raise TransientGatewayError(f"HTTP {status}")
        if status != 200:
            raise GatewayError(f"HTTP {status}: {response.text[:200]}")

        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise GatewayError(f"unexpected chat-completion response: {e}")
        usage = data.get("usage") or {}
        return BackendReply(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


class MockChatBackend(ChatBackend):
    """Answers from a fixture file.

    Each fixture entry names a template and either the exact bindings digest
    ("key") or a subset of bindings that must match ("match"). Exact keys win;
    otherwise the first matching entry in file order answers. "repair_response"
    is served when the gateway re-asks after a parse failure.
    """

    def __init__(self, entries: List[Dict[str, Any]]):
        self.by_key: Dict[Tuple[str, str], Dict] = {}
        self.by_match: Dict[str, List[Dict]] = {}
        for entry in entries:
            template = entry.get("template")
            if template not in TEMPLATE_SCHEMAS:
                raise GatewayError(f"fixture entry names unknown template '{template}'")
            if "response" not in entry:
                raise GatewayError(f"fixture entry for '{template}' has no response")
            if "key" in entry:
                self.by_key[(template, entry["key"])] = entry
            else:
                self.by_match.setdefault(template, []).append(entry)

    @classmethod
    def from_file(cls, path: str) -> "MockChatBackend":
        if not os.path.exists(path):
            raise GatewayError(f"mock fixture file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except ValueError as e:
                raise GatewayError(f"mock fixture file {path} is not valid JSON: {e}")
        entries = data.get("entries", []) if isinstance(data, dict) else data
        return cls(entries)

    def lookup(self, template_name: str, bindings: Dict[str, Any]) -> Dict:
        digest = bindings_digest(template_name, bindings)
        entry = self.by_key.get((template_name, digest))
        if entry is not None:
            return entry
        for candidate in self.by_match.get(template_name, []):
            match = candidate.get("match", {})
            if all(k in bindings and bindings[k] == v for k, v in match.items()):
                return candidate
        raise FixtureMissError(template_name, digest[:16])

    def chat(self, messages, template_name, bindings, repair=False) -> BackendReply:
        entry = self.lookup(template_name, bindings)
        response = entry.get("repair_response", entry["response"]) if repair else entry["response"]
        text = response if isinstance(response, str) else json.dumps(response, sort_keys=True, ensure_ascii=False)
        prompt_tokens = sum(len(m["content"].split()) for m in messages)
        return BackendReply(text, prompt_tokens, len(text.split()))


# --- gateway ---------------------------------------------------------------

class LlmGateway:
    """Uniform entry point for all model calls"""

    def __init__(self, backend: ChatBackend, registry: Optional[PromptRegistry] = None,
                 max_concurrency: int = 4, usage: Optional[UsageLedger] = None):
        self.backend = backend
        self.registry = registry or PromptRegistry()
        self.usage = usage or UsageLedger()
        self._slots = threading.BoundedSemaphore(max(1, max_concurrency))

    def scoped(self) -> "LlmGateway":
        """A view sharing backend and concurrency cap, with its own usage ledger that rolls up into this one"""
        view = LlmGateway(self.backend, self.registry, usage=UsageLedger(
            self.usage.prompt_price, self.usage.completion_price, parent=self.usage))
        view._slots = self._slots
        return view

    def complete(self, template_name: str, bindings: Dict[str, Any], stage: Optional[str] = None) -> LlmResponse:
        template = self.registry.get(template_name)
        prompt = self.registry.render(template_name, bindings)
        stage = stage or TEMPLATE_STAGES.get(template_name, "other")
        messages = [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]

        started = time.perf_counter()
        reply = self._call(messages, template_name, bindings, stage, repair=False)
        try:
            payload = parse_json_payload(reply.text, template.schema_tag)
            repaired = False
        except MalformedOutputError as first:
            logger.warning("%s: unusable output (%s), asking once more", template_name, first)
            messages = messages + [
                {"role": "assistant", "content": reply.text},
                {"role": "user", "content": REPAIR_SUFFIX.format(error=first)},
            ]
            reply = self._call(messages, template_name, bindings, stage, repair=True)
            payload = parse_json_payload(reply.text, template.schema_tag)
            repaired = True

        return LlmResponse(
            template_name=template_name,
            raw_text=reply.text,
            payload=payload,
            prompt_tokens=reply.prompt_tokens,
            completion_tokens=reply.completion_tokens,
            latency=time.perf_counter() - started,
            repaired=repaired,
        )

    def _call(self, messages, template_name, bindings, stage, repair) -> BackendReply:
        with self._slots:
            reply = self.backend.chat(messages, template_name, bindings, repair=repair)
        self.usage.record(template_name, stage, reply.prompt_tokens, reply.completion_tokens)
        return reply


def build_gateway(config) -> LlmGateway:
    if config.backend == "remote":
        backend = RemoteChatBackend(
            base_url=config.llm_base_url,
            api_key=config.llm_api_key,
            model=config.llm_model,
            temperature=config.llm_temperature,
            timeout=config.llm_timeout,
            max_retries=config.llm_max_retries,
        )
    else:
        backend = MockChatBackend.from_file(config.fixtures_path)
    usage = UsageLedger(config.prompt_price_per_million, config.completion_price_per_million)
    return LlmGateway(backend, max_concurrency=config.llm_max_concurrency, usage=usage)

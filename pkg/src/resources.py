"""
Resource layer: one abstraction over model backends, tools and data sources.

Handles enforce the descriptor's limits (concurrency gate, timeout, retries
with jittered backoff). Providers are looked up by (kind, uri scheme).
"""
import asyncio
import inspect
import json
import os
import re
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Tuple, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from tenacity import AsyncRetrying, retry_if_exception, stop_after_attempt, wait_random_exponential

from config.settings import settings
from src.errors import AuthMissing, BackendError, NoParseableAnswers, NoProvider, SchemaMismatch, ToolError
from src.llm_clients import (
    YES_NO_INSTRUCTION,
    Completion,
    GenerationParams,
    MockModelProvider,
    ModelProvider,
    SampleSet,
    Usage,
    groq_provider,
    openai_provider,
)

MISSING_LOGIT = -100.0
_YES_NO = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


class ResourceKind(str, Enum):
    DATA = "data"
    MODEL = "model"
    DEVICE = "device"
    TOOL = "tool"


class ResourceLimits(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_concurrent: int = Field(default=4, ge=1)
    timeout: float = Field(default_factory=lambda: settings.default_timeout, gt=0)
    max_retries: int = Field(default_factory=lambda: settings.default_max_retries, ge=0)


class ResourceDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    resource_id: str
    kind: ResourceKind
    uri: str
    auth: Optional[str] = None  # name of the env var holding the secret
    limits: ResourceLimits = Field(default_factory=ResourceLimits)
    model: Optional[str] = None
    supports_logprobs: bool = False
    options: Dict[str, Any] = Field(default_factory=dict)

    @property
    def scheme(self) -> str:
        return self.uri.split("://", 1)[0].lower() if "://" in self.uri else ""


class YesNoEvidence(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str  # "logits" | "samples"
    v_yes: Optional[float] = None
    v_no: Optional[float] = None
    m_yes: int = 0
    m_no: int = 0
    unparseable: int = 0


class ResourceCatalog:
    def __init__(self, descriptors: List[ResourceDescriptor]):
        self.descriptors: Dict[str, ResourceDescriptor] = {}
        for d in descriptors:
            if d.resource_id in self.descriptors:
                raise ValueError(f"duplicate resource_id '{d.resource_id}'")
            self.descriptors[d.resource_id] = d

    @classmethod
    def load(cls, path) -> "ResourceCatalog":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls([ResourceDescriptor.model_validate(d) for d in data])

    @classmethod
    def from_settings(cls) -> "ResourceCatalog":
        if settings.resources_path and Path(settings.resources_path).exists():
            return cls.load(settings.resources_path)
        return cls([])

    def get(self, resource_id: str) -> ResourceDescriptor:
        if resource_id not in self.descriptors:
            raise NoProvider(f"resource '{resource_id}' is not in the catalog")
        return self.descriptors[resource_id]

    def add(self, descriptor: ResourceDescriptor) -> None:
        self.descriptors[descriptor.resource_id] = descriptor


# --- tools & data ------------------------------------------------------------

ToolFn = Callable[[dict], Union[dict, Awaitable[dict]]]


class ToolProvider:
    """Tools & services: callables with a declared input schema {field: type}."""

    _TYPES = {"string": str, "integer": int, "number": (int, float), "boolean": bool, "object": dict, "array": list}

    def __init__(self):
        self.tools: Dict[str, Tuple[ToolFn, Dict[str, str]]] = {}

    def register_tool(self, name: str, fn: ToolFn, input_schema: Dict[str, str]) -> None:
        self.tools[name] = (fn, dict(input_schema))

    def check_args(self, name: str, args: dict) -> None:
        _, schema = self.tools[name]
        bad = []
        for field_name, type_name in schema.items():
            if field_name not in args:
                bad.append(f"missing '{field_name}'")
            elif not isinstance(args[field_name], self._TYPES.get(type_name, object)):
                bad.append(f"'{field_name}' is not {type_name}")
        if bad:
            raise SchemaMismatch(bad)

    async def call(self, name: str, args: dict) -> dict:
        fn, _ = self.tools[name]
        try:
            result = fn(args)
            if inspect.isawaitable(result):
                result = await result
            return result
        except ToolError:
            raise
        except Exception as e:
            raise ToolError(f"tool '{name}' failed: {e}",
                            payload=getattr(e, "payload", None) or {"error": type(e).__name__, "message": str(e)})


def _word_count(args: dict) -> dict:
    return {"count": len(args["text"].split())}


TOOLS = ToolProvider()
TOOLS.register_tool("word-count", _word_count, {"text": "string"})


# --- handles -------------------------------------------------------------------

def _is_retriable(exc: BaseException) -> bool:
    return isinstance(exc, BackendError) and exc.retriable


class ResourceHandle:
    """Gate + timeout + retry wrapper around one provider."""

    def __init__(self, descriptor: ResourceDescriptor, provider: Any):
        self.descriptor = descriptor
        self.provider = provider
        self._gate = asyncio.Semaphore(descriptor.limits.max_concurrent)
        self.in_flight = 0
        self.max_in_flight = 0
        self.backoff = float(descriptor.options.get("backoff", 0.5))

    @property
    def kind(self) -> ResourceKind:
        return self.descriptor.kind

    @property
    def resource_id(self) -> str:
        return self.descriptor.resource_id

    async def _attempt(self, make_call: Callable[[], Awaitable[Any]]) -> Any:
        async with self._gate:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            try:
                return await asyncio.wait_for(make_call(), timeout=self.descriptor.limits.timeout)
            except asyncio.TimeoutError:
                raise BackendError(f"{self.resource_id}: timed out after {self.descriptor.limits.timeout}s",
                                   "timeout", retriable=True)
            finally:
                self.in_flight -= 1

    async def call(self, make_call: Callable[[], Awaitable[Any]], retries: Optional[int] = None) -> Any:
        retries = self.descriptor.limits.max_retries if retries is None else retries
        async for attempt in AsyncRetrying(
            stop=stop_after_attempt(retries + 1),
            wait=wait_random_exponential(multiplier=self.backoff, max=8),
            retry=retry_if_exception(_is_retriable),
            reraise=True,
        ):
            with attempt:
                if attempt.retry_state.attempt_number > 1:
                    logger.warning(f"⚠️ Retrying {self.resource_id} (attempt {attempt.retry_state.attempt_number})")
                result = await self._attempt(make_call)
        return result


ProviderFactory = Callable[[ResourceDescriptor, Optional[str]], Any]


def _data_provider(descriptor: ResourceDescriptor, secret: Optional[str]) -> Path:
    return Path(descriptor.uri.split("://", 1)[1])


def _device_provider(descriptor: ResourceDescriptor, secret: Optional[str]):
    raise NoProvider(f"device resource '{descriptor.resource_id}' is catalogued but has no provider")


class ResourceResolver:
    """Maps (kind, uri scheme) to provider factories and builds handles."""

    def __init__(self):
        self.providers: Dict[Tuple[ResourceKind, str], ProviderFactory] = {
            (ResourceKind.MODEL, "mock"): lambda d, s: MockModelProvider(d),
            (ResourceKind.MODEL, "http"): openai_provider,
            (ResourceKind.MODEL, "https"): openai_provider,
            (ResourceKind.MODEL, "groq"): groq_provider,
            (ResourceKind.TOOL, "tool"): lambda d, s: TOOLS,
            (ResourceKind.DATA, "file"): _data_provider,
            (ResourceKind.DEVICE, "device"): _device_provider,
        }

    def register_provider(self, kind: ResourceKind, scheme: str, factory: ProviderFactory) -> None:
        self.providers[(kind, scheme)] = factory

    @staticmethod
    def _secret(descriptor: ResourceDescriptor) -> Optional[str]:
        if descriptor.auth is None:
            return None
        secret = os.environ.get(descriptor.auth)
        if not secret:
            secret = getattr(settings, descriptor.auth.lower(), None)
        if not secret:
            raise AuthMissing(f"resource '{descriptor.resource_id}' needs secret {descriptor.auth}")
        return secret

    def resolve(self, descriptor: ResourceDescriptor) -> ResourceHandle:
        factory = self.providers.get((descriptor.kind, descriptor.scheme))
        if factory is None:
            raise NoProvider(f"no provider for {descriptor.kind.value} resources with scheme '{descriptor.scheme}'")
        if descriptor.kind == ResourceKind.MODEL and descriptor.scheme in ("http", "https") and not descriptor.model:
            raise NoProvider(f"resource '{descriptor.resource_id}' needs a model name")
        secret = self._secret(descriptor)
        provider = factory(descriptor, secret)
        logger.debug(f"Resolved {descriptor.resource_id} ({descriptor.kind.value}, {descriptor.scheme})")
        return ResourceHandle(descriptor, provider)


def _require(handle: ResourceHandle, kind: ResourceKind) -> None:
    if handle.kind != kind:
        raise NoProvider(f"resource '{handle.resource_id}' is a {handle.kind.value} resource, not {kind.value}")


async def generate(handle: ResourceHandle, prompt: str, params: Optional[GenerationParams] = None) -> Union[Completion, SampleSet]:
    """One completion, or a SampleSet of n independent samples when n_samples > 1."""
    _require(handle, ResourceKind.MODEL)
    params = params or GenerationParams()
    provider: ModelProvider = handle.provider
    if params.n_samples == 1:
        return await handle.call(lambda: provider.complete(prompt, params))

    completions = await asyncio.gather(*[
        handle.call(lambda i=i: provider.complete(prompt, params, sample_index=i))
        for i in range(params.n_samples)
    ])
    return SampleSet(
        texts=tuple(c.text for c in completions),
        usage=Usage(prompt_tokens=sum(c.usage.prompt_tokens for c in completions),
                    completion_tokens=sum(c.usage.completion_tokens for c in completions)),
    )


def parse_yes_no(text: str) -> Optional[bool]:
    match = _YES_NO.match(text or "")
    if not match:
        return None
    return match.group(1).lower() == "yes"


async def ask_yes_no(handle: ResourceHandle, question: str, params: Optional[GenerationParams] = None) -> YesNoEvidence:
    """Yes/No evidence: first-token logits for open-logit backends, sample counts otherwise."""
    _require(handle, ResourceKind.MODEL)
    params = params or GenerationParams(n_samples=settings.yes_no_samples)
    prompt = f"{question}\n{YES_NO_INSTRUCTION}"

    if handle.descriptor.supports_logprobs:
        completion = await generate(handle, prompt, params.model_copy(update={"n_samples": 1, "logprobs": True, "max_tokens": 1}))
        if not completion.token_logits:
            raise BackendError(f"{handle.resource_id}: no token logits returned", "parse", retriable=False)
        values: Dict[bool, float] = {}
        for token, logit in completion.token_logits[0].alternatives:
            verdict = parse_yes_no(token)
            if verdict is not None and verdict not in values:
                values[verdict] = logit
        if not values:
            raise NoParseableAnswers(f"{handle.resource_id}: neither Yes nor No among first-token alternatives")
        return YesNoEvidence(kind="logits", v_yes=values.get(True, MISSING_LOGIT), v_no=values.get(False, MISSING_LOGIT))

    result = await generate(handle, prompt, params)
    texts = result.texts if isinstance(result, SampleSet) else (result.text,)
    verdicts = [parse_yes_no(t) for t in texts]
    m_yes = sum(1 for v in verdicts if v is True)
    m_no = sum(1 for v in verdicts if v is False)
    if m_yes + m_no == 0:
        raise NoParseableAnswers(f"{handle.resource_id}: none of {len(texts)} samples answered Yes or No")
    return YesNoEvidence(kind="samples", m_yes=m_yes, m_no=m_no, unparseable=len(texts) - m_yes - m_no)


async def invoke_tool(handle: ResourceHandle, args: dict) -> dict:
    _require(handle, ResourceKind.TOOL)
    tools: ToolProvider = handle.provider
    name = handle.descriptor.uri.split("://", 1)[1].strip("/")
    if name not in tools.tools:
        raise NoProvider(f"tool '{name}' is not registered")
    tools.check_args(name, args)
    return await handle.call(lambda: tools.call(name, args), retries=0)


async def read_data(handle: ResourceHandle) -> bytes:
    _require(handle, ResourceKind.DATA)
    path: Path = handle.provider
    return await handle.call(lambda: asyncio.to_thread(path.read_bytes), retries=0)

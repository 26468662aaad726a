import asyncio
import hashlib
import json
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Literal, Optional, Tuple

import groq
import openai
from groq import AsyncGroq
from loguru import logger
from openai import AsyncOpenAI
from pydantic import BaseModel, ConfigDict, Field

from src.errors import BackendError, RateLimited

if TYPE_CHECKING:
    from src.resources import ResourceDescriptor

YES_NO_INSTRUCTION = "Answer exactly Yes or No."


class Usage(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt_tokens: int = 0
    completion_tokens: int = 0


class TokenLogits(BaseModel):
    model_config = ConfigDict(frozen=True)

    token: str
    alternatives: Tuple[Tuple[str, float], ...] = ()


class Completion(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str
    finish_reason: Literal["stop", "length", "error"] = "stop"
    token_logits: Optional[Tuple[TokenLogits, ...]] = None
    usage: Usage = Field(default_factory=Usage)


class SampleSet(BaseModel):
    """n independent sampled completions (closed-logit truth estimation)."""

    model_config = ConfigDict(frozen=True)

    texts: Tuple[str, ...]
    usage: Usage = Field(default_factory=Usage)


class GenerationParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    temperature: float = Field(default=0.7, ge=0.0)
    max_tokens: int = Field(default=1024, ge=1)
    seed: Optional[int] = None
    n_samples: int = Field(default=1, ge=1)
    logprobs: bool = False
    top_logprobs: int = Field(default=5, ge=1, le=20)


def prompt_tag(prompt: str) -> str:
    return prompt.split("\n", 1)[0].strip()


class ModelProvider(ABC):
    """A model backend bound to one resource descriptor."""

    def __init__(self, descriptor: "ResourceDescriptor"):
        self.descriptor = descriptor

    @abstractmethod
    async def complete(self, prompt: str, params: GenerationParams, sample_index: Optional[int] = None) -> Completion:
        ...


class MockModelProvider(ModelProvider):
    """
    Scripted backend. Fixture maps prompt-tag (first prompt line) to
    {text | responses | variants | samples | logits}. Unmatched prompts get a
    hash-derived filler so tests never block.
    """

    def __init__(self, descriptor: "ResourceDescriptor"):
        super().__init__(descriptor)
        options = descriptor.options
        if "fixture" in options:
            self.fixture: Dict[str, dict] = dict(options["fixture"])
        else:
            self.fixture = self._load_fixture(descriptor.uri, options.get("fixtures_root", "."))
        self.latency = float(options.get("latency", 0.0))
        self.fault_rate = float(options.get("fault_rate", 0.0))
        self.fault_seed = int(options.get("fault_seed", 0))
        self.fault_burst_max = int(options.get("fault_burst_max", 1))
        self._calls: Dict[Tuple[str, Optional[int]], int] = {}
        self._served: Dict[Tuple[str, Optional[int]], int] = {}
        self._burst: Dict[Tuple[str, Optional[int]], int] = {}
        self.captured_prompts: List[str] = []
        self.faults_injected = 0

    @staticmethod
    def _load_fixture(uri: str, root) -> Dict[str, dict]:
        name = uri.split("://", 1)[1].strip("/")
        path = Path(root) / f"{name}.json"
        if not name or not path.exists():
            logger.warning(f"⚠️ Mock fixture {path} not found, every prompt gets filler output")
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    @staticmethod
    def _digest(*parts) -> str:
        return hashlib.sha256("|".join(str(p) for p in parts).encode()).hexdigest()

    def _filler(self, prompt: str, seed: Optional[int], sample_index: Optional[int]) -> str:
        digest = self._digest(prompt, seed, sample_index)
        if YES_NO_INSTRUCTION in prompt:
            return "Yes" if int(digest[:8], 16) % 2 == 0 else "No"
        return f"mock completion {digest[:16]}"

    def _inject_fault(self, key, count: int) -> bool:
        if self.fault_rate <= 0.0:
            return False
        u = int(self._digest(self.fault_seed, key[0], key[1], count)[:8], 16) / 2 ** 32
        if u < self.fault_rate and self._burst.get(key, 0) < self.fault_burst_max:
            self._burst[key] = self._burst.get(key, 0) + 1
            self.faults_injected += 1
            return True
        self._burst[key] = 0
        return False

    async def complete(self, prompt: str, params: GenerationParams, sample_index: Optional[int] = None) -> Completion:
        if self.latency:
            await asyncio.sleep(self.latency)
        self.captured_prompts.append(prompt)
        tag = prompt_tag(prompt)
        key = (tag, params.seed)
        count = self._calls.get(key, 0)
        self._calls[key] = count + 1
        entry = self.fixture.get(tag)
        usage_in = len(prompt.split())

        if params.logprobs and self.descriptor.supports_logprobs:
            if entry and "logits" in entry:
                v_yes, v_no = float(entry["logits"]["yes"]), float(entry["logits"]["no"])
            else:
                digest = self._digest(prompt, params.seed)
                v_yes, v_no = int(digest[:4], 16) / 65535 * 4.0 - 2.0, 0.0
            token = "Yes" if v_yes >= v_no else "No"
            return Completion(text=token,
                              token_logits=(TokenLogits(token=token, alternatives=(("Yes", v_yes), ("No", v_no))),),
                              usage=Usage(prompt_tokens=usage_in, completion_tokens=1))

        if sample_index is None and self._inject_fault(key, count):
            logger.debug(f"Injected malformed output for tag={tag!r} seed={params.seed}")
            return Completion(text="", finish_reason="error", usage=Usage(prompt_tokens=usage_in))

        served = self._served.get(key, 0)
        self._served[key] = served + 1
        if entry is None:
            text = self._filler(prompt, params.seed, sample_index)
        elif sample_index is not None and "samples" in entry:
            text = entry["samples"][sample_index % len(entry["samples"])]
        elif "responses" in entry:
            text = entry["responses"][min(served, len(entry["responses"]) - 1)]
        elif "variants" in entry:
            text = entry["variants"][(params.seed or 0) % len(entry["variants"])]
        elif "text" in entry:
            text = entry["text"]
        elif "samples" in entry:
            text = entry["samples"][0]
        else:
            text = self._filler(prompt, params.seed, sample_index)
        return Completion(text=text, usage=Usage(prompt_tokens=usage_in, completion_tokens=len(text.split())))


class ChatCompletionProvider(ModelProvider):
    """OpenAI-compatible chat-completion client (OpenAI SDK or Groq SDK)."""

    def __init__(self, descriptor: "ResourceDescriptor", client, sdk):
        super().__init__(descriptor)
        self.client = client
        self.sdk = sdk

    async def complete(self, prompt: str, params: GenerationParams, sample_index: Optional[int] = None) -> Completion:
        kwargs = {
            "model": self.descriptor.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            kwargs["seed"] = params.seed + (sample_index or 0)
        if params.logprobs and self.descriptor.supports_logprobs:
            kwargs["logprobs"] = True
            kwargs["top_logprobs"] = params.top_logprobs

        start = time.time()
        logger.debug(f"🚀 Calling {self.descriptor.resource_id} ({self.descriptor.model}, prompt_length={len(prompt)})")
        try:
            response = await self.client.chat.completions.create(**kwargs)
        except self.sdk.APITimeoutError as e:
            raise BackendError(f"{self.descriptor.resource_id}: timeout ({e})", "timeout", retriable=True)
        except self.sdk.RateLimitError:
            raise RateLimited(f"{self.descriptor.resource_id}: rate limited")
        except self.sdk.APIStatusError as e:
            raise BackendError(f"{self.descriptor.resource_id}: HTTP {e.status_code}", "http",
                               retriable=e.status_code >= 500)
        except self.sdk.APIConnectionError as e:
            raise BackendError(f"{self.descriptor.resource_id}: connection error ({e})", "http", retriable=True)

        try:
            choice = response.choices[0]
            text = choice.message.content or ""
            finish = choice.finish_reason if choice.finish_reason in ("stop", "length") else "error"
            token_logits = None
            if kwargs.get("logprobs") and choice.logprobs is not None and choice.logprobs.content:
                token_logits = tuple(
                    TokenLogits(token=c.token, alternatives=tuple((a.token, float(a.logprob)) for a in c.top_logprobs))
                    for c in choice.logprobs.content
                )
            usage = Usage(prompt_tokens=getattr(response.usage, "prompt_tokens", 0) or 0,
                          completion_tokens=getattr(response.usage, "completion_tokens", 0) or 0)
        except (AttributeError, IndexError, TypeError) as e:
            raise BackendError(f"{self.descriptor.resource_id}: unparseable response ({e})", "parse", retriable=False)

        logger.debug(f"✅ {self.descriptor.resource_id} responded in {time.time() - start:.2f}s")
        return Completion(text=text, finish_reason=finish, token_logits=token_logits, usage=usage)


def openai_provider(descriptor: "ResourceDescriptor", secret: Optional[str]) -> ChatCompletionProvider:
    client = AsyncOpenAI(api_key=secret or "unused", base_url=descriptor.uri,
                         max_retries=0, timeout=descriptor.limits.timeout)
    return ChatCompletionProvider(descriptor, client, openai)


def groq_provider(descriptor: "ResourceDescriptor", secret: Optional[str]) -> ChatCompletionProvider:
    if descriptor.model is None:
        descriptor = descriptor.model_copy(update={"model": descriptor.uri.split("://", 1)[1].strip("/")})
    client = AsyncGroq(api_key=secret, max_retries=0, timeout=descriptor.limits.timeout)
    return ChatCompletionProvider(descriptor, client, groq)

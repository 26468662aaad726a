import asyncio
import math
from types import SimpleNamespace
from unittest.mock import AsyncMock, MagicMock

import openai
import pytest

from src.errors import AuthMissing, BackendError, NoParseableAnswers, NoProvider, SchemaMismatch, ToolError
from src.llm_clients import ChatCompletionProvider, GenerationParams, SampleSet
from src.resources import (
    ResourceDescriptor,
    ResourceHandle,
    ResourceKind,
    ResourceLimits,
    ResourceResolver,
    ToolProvider,
    ask_yes_no,
    generate,
    invoke_tool,
    read_data,
)
from tests.conftest import mock_descriptor, mock_handle


def remote_descriptor(timeout=5.0, **extra):
    return ResourceDescriptor(resource_id="remote", kind=ResourceKind.MODEL, uri="http://localhost:9/v1",
                              model="test-model", limits=ResourceLimits(timeout=timeout, max_retries=0), **extra)


def chat_response(text, finish_reason="stop"):
    choice = SimpleNamespace(message=SimpleNamespace(content=text), finish_reason=finish_reason, logprobs=None)
    return SimpleNamespace(choices=[choice], usage=SimpleNamespace(prompt_tokens=7, completion_tokens=2))


def fake_client(create):
    client = MagicMock()
    client.chat.completions.create = create
    return client


@pytest.mark.asyncio
async def test_mock_variants_follow_seed():
    handle = mock_handle({"goal:alice:ch1": {"variants": ["first", "second"]}})
    out = [(await generate(handle, "goal:alice:ch1\nbody", GenerationParams(seed=s))).text for s in (0, 1, 2)]
    assert out == ["first", "second", "first"]


@pytest.mark.asyncio
async def test_sampling_returns_a_sample_set():
    handle = mock_handle({"Q": {"samples": ["Yes", "No"]}})
    result = await generate(handle, "Q", GenerationParams(n_samples=3))
    assert isinstance(result, SampleSet)
    assert result.texts == ("Yes", "No", "Yes")


@pytest.mark.asyncio
async def test_unscripted_prompt_gets_filler():
    handle = mock_handle({})
    first = await generate(handle, "anything", GenerationParams(seed=3))
    again = await generate(mock_handle({}), "anything", GenerationParams(seed=3))
    assert first.text.startswith("mock completion")
    assert first.text == again.text


@pytest.mark.asyncio
async def test_chat_completion_provider_parses_response():
    create = AsyncMock(return_value=chat_response("The gate opens."))
    handle = ResourceHandle(remote_descriptor(), ChatCompletionProvider(remote_descriptor(), fake_client(create), openai))
    completion = await generate(handle, "Write one line.", GenerationParams(seed=4))
    assert completion.text == "The gate opens."
    assert completion.finish_reason == "stop"
    assert completion.usage.prompt_tokens == 7
    kwargs = create.call_args.kwargs
    assert kwargs["model"] == "test-model"
    assert kwargs["seed"] == 4


@pytest.mark.asyncio
async def test_slow_backend_times_out():
    async def slow(**kwargs):
        await asyncio.sleep(1.0)
        return chat_response("late")

    descriptor = remote_descriptor(timeout=0.05)
    handle = ResourceHandle(descriptor, ChatCompletionProvider(descriptor, fake_client(AsyncMock(side_effect=slow)), openai))
    with pytest.raises(BackendError) as exc:
        await generate(handle, "hello")
    assert exc.value.error_class == "timeout"


@pytest.mark.asyncio
async def test_retriable_errors_are_retried():
    handle = mock_handle({}, limits=ResourceLimits(timeout=5.0, max_retries=2), backoff=0.0)
    attempts = []

    async def flaky():
        attempts.append(1)
        if len(attempts) < 3:
            raise BackendError("blip", "http", retriable=True)
        return "done"

    assert await handle.call(flaky) == "done"
    assert len(attempts) == 3


@pytest.mark.asyncio
async def test_concurrency_gate_bounds_in_flight_calls():
    handle = mock_handle({}, limits=ResourceLimits(max_concurrent=2, timeout=5.0, max_retries=0), latency=0.02)
    await asyncio.gather(*(generate(handle, f"p{i}") for i in range(5)))
    assert handle.max_in_flight == 2


@pytest.mark.asyncio
async def test_yes_no_from_logits():
    handle = mock_handle({"Is it night?": {"logits": {"yes": math.log(3), "no": 0.0}}}, supports_logprobs=True)
    evidence = await ask_yes_no(handle, "Is it night?")
    assert evidence.kind == "logits"
    assert evidence.v_yes == pytest.approx(math.log(3))
    assert evidence.v_no == 0.0


@pytest.mark.asyncio
async def test_yes_no_from_samples():
    handle = mock_handle({"Is it night?": {"samples": ["Yes.", "yes", "No", "Yes, surely"]}})
    evidence = await ask_yes_no(handle, "Is it night?", GenerationParams(n_samples=4))
    assert (evidence.kind, evidence.m_yes, evidence.m_no) == ("samples", 3, 1)


@pytest.mark.asyncio
async def test_yes_no_without_parseable_samples():
    handle = mock_handle({"Is it night?": {"samples": ["maybe", "unclear"]}})
    with pytest.raises(NoParseableAnswers):
        await ask_yes_no(handle, "Is it night?", GenerationParams(n_samples=2))


def tool_handle(resolver=None, name="word-count"):
    resolver = resolver or ResourceResolver()
    return resolver.resolve(ResourceDescriptor(resource_id=name, kind=ResourceKind.TOOL, uri=f"tool://{name}"))


@pytest.mark.asyncio
async def test_word_count_tool():
    assert await invoke_tool(tool_handle(), {"text": "the tower at dawn"}) == {"count": 4}


@pytest.mark.asyncio
async def test_tool_schema_mismatch():
    with pytest.raises(SchemaMismatch) as exc:
        await invoke_tool(tool_handle(), {"text": 5})
    assert exc.value.missing == ["'text' is not string"]


@pytest.mark.asyncio
async def test_tool_failure_becomes_tool_error():
    tools = ToolProvider()

    def explode(args):
        raise RuntimeError("boom")

    tools.register_tool("explode", explode, {})
    resolver = ResourceResolver()
    resolver.register_provider(ResourceKind.TOOL, "tool", lambda d, s: tools)
    with pytest.raises(ToolError) as exc:
        await invoke_tool(tool_handle(resolver, "explode"), {})
    assert exc.value.payload == {"error": "RuntimeError", "message": "boom"}


@pytest.mark.asyncio
async def test_file_data_resource(tmp_path):
    path = tmp_path / "notes.txt"
    path.write_bytes(b"chapter notes")
    handle = ResourceResolver().resolve(ResourceDescriptor(resource_id="notes", kind=ResourceKind.DATA,
                                                           uri=f"file://{path}"))
    assert await read_data(handle) == b"chapter notes"


def test_resolver_rejects_bad_descriptors(monkeypatch):
    resolver = ResourceResolver()
    with pytest.raises(NoProvider):
        resolver.resolve(mock_descriptor({}).model_copy(update={"uri": "ftp://x"}))
    with pytest.raises(NoProvider):
        resolver.resolve(remote_descriptor().model_copy(update={"model": None}))
    monkeypatch.delenv("HAWK_TEST_SECRET", raising=False)
    with pytest.raises(AuthMissing):
        resolver.resolve(remote_descriptor(auth="HAWK_TEST_SECRET"))

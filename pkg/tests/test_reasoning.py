import random

import pytest

from src.errors import UnparseableTrace
from src.reasoning import COT_SUFFIX, ReasoningInput, build_prompt, parse_trace, reason
from tests.conftest import mock_handle


@pytest.mark.asyncio
async def test_steps_and_answer():
    handle = mock_handle({"Is the gate open?": {"text": "1. Alice holds the key\n2. She used it\nANSWER: yes"}})
    trace = await reason(ReasoningInput(question="Is the gate open?"), handle)
    assert trace.steps == ("Alice holds the key", "She used it")
    assert trace.answer == "yes"


@pytest.mark.asyncio
async def test_missing_answer_retries_once_then_fails():
    handle = mock_handle({"Why?": {"text": "I am not sure what to say."}})
    with pytest.raises(UnparseableTrace) as exc:
        await reason(ReasoningInput(question="Why?"), handle)
    assert exc.value.raw == "I am not sure what to say."
    assert len(handle.provider.captured_prompts) == 2


@pytest.mark.asyncio
async def test_direct_mode_takes_text_as_answer():
    handle = mock_handle({"Name one colour.": {"text": "  blue \n"}})
    trace = await reason(ReasoningInput(question="Name one colour.", mode="direct"), handle)
    assert trace.answer == "blue"
    assert trace.steps == ()


def test_prompt_lists_evidence_and_suffix():
    prompt = build_prompt(ReasoningInput(question="Q", evidence=("e1", "e2")))
    assert prompt.splitlines() == ["Q", "Evidence:", "e1", "e2", COT_SUFFIX]


def test_text_after_answer_is_ignored():
    trace = parse_trace("1. a\nANSWER: first\n2. b\nANSWER: second")
    assert trace.steps == ("a",)
    assert trace.answer == "first"


def test_generated_traces_parse_back():
    """Random step lists with noise lines come back in order."""
    rng = random.Random(5)
    words = ["key", "tower", "gate", "road", "night", "door"]
    for _ in range(200):
        steps = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(rng.randint(0, 6))]
        lines = []
        for i, step in enumerate(steps, start=1):
            if rng.random() < 0.3:
                lines.append("some narration without a number")
            lines.append(f"{i}. {step}")
        answer = rng.choice(words)
        lines.append(f"ANSWER: {answer}")
        trace = parse_trace("\n".join(lines))
        assert trace.steps == tuple(steps)
        assert trace.answer == answer
    assert parse_trace("1. only steps") is None

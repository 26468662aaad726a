"""Reasoning operator: chain-of-thought prompting with a fixed line grammar."""
import re
from typing import List, Literal, Optional, Tuple

from loguru import logger
from pydantic import BaseModel, ConfigDict

from src.errors import UnparseableTrace
from src.llm_clients import GenerationParams
from src.resources import ResourceHandle, generate

COT_SUFFIX = "Respond with numbered steps, then a line 'ANSWER: <answer>'."
_STEP = re.compile(r"^\d+\.\s")
_ANSWER = re.compile(r"^ANSWER:\s")


class ReasoningInput(BaseModel):
    model_config = ConfigDict(frozen=True)

    question: str
    evidence: Tuple[str, ...] = ()
    mode: Literal["cot", "direct"] = "cot"


class ReasoningTrace(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: Tuple[str, ...]
    answer: str
    raw: str


def build_prompt(context: ReasoningInput, feedback: Optional[str] = None) -> str:
    parts = [context.question]
    if context.evidence:
        parts.append("Evidence:")
        parts.extend(context.evidence)
    if feedback:
        parts.append(feedback)
    if context.mode == "cot":
        parts.append(COT_SUFFIX)
    return "\n".join(parts)


def parse_trace(raw: str) -> Optional[ReasoningTrace]:
    """Numbered lines are steps; the first ANSWER line ends parsing. None when no answer."""
    steps: List[str] = []
    for line in raw.splitlines():
        line = line.strip()
        if _ANSWER.match(line):
            return ReasoningTrace(steps=tuple(steps), answer=line[len("ANSWER:"):].strip(), raw=raw)
        if _STEP.match(line):
            steps.append(_STEP.sub("", line, count=1).strip())
    return None


async def reason(context: ReasoningInput, handle: ResourceHandle,
                 params: Optional[GenerationParams] = None, retries: int = 1) -> ReasoningTrace:
    params = params or GenerationParams()
    prompt = build_prompt(context)

    if context.mode == "direct":
        completion = await generate(handle, prompt, params)
        return ReasoningTrace(steps=(), answer=completion.text.strip(), raw=completion.text)

    raw = ""
    for attempt in range(retries + 1):
        completion = await generate(handle, prompt, params)
        raw = completion.text
        trace = parse_trace(raw)
        if trace is not None:
            return trace
        logger.warning(f"⚠️ Reasoning trace without ANSWER line (attempt {attempt + 1}/{retries + 1})")
    raise UnparseableTrace(f"no 'ANSWER:' line after {retries + 1} attempt(s)", raw=raw)

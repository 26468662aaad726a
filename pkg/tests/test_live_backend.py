"""Smoke test against a real model backend from the resource catalog (HAWK_RESOURCES)."""
import os

import pytest

from src.resources import ResourceCatalog, ResourceResolver, ask_yes_no, generate

LIVE = os.getenv("HAWK_LIVE_RESOURCE")

pytestmark = [
    pytest.mark.live,
    pytest.mark.skipif(not LIVE, reason="set HAWK_LIVE_RESOURCE to a model resource id to run"),
]


@pytest.fixture
def handle():
    return ResourceResolver().resolve(ResourceCatalog.from_settings().get(LIVE))


@pytest.mark.asyncio
async def test_backend_answers(handle):
    completion = await generate(handle, "Say hello in one word.")
    print(f"✅ {handle.resource_id}: {completion.text!r}")
    assert completion.text.strip()


@pytest.mark.asyncio
async def test_backend_gives_yes_no_evidence(handle):
    evidence = await ask_yes_no(handle, "Is water wet?")
    assert evidence.kind in ("logits", "samples")

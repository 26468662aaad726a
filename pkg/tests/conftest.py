import shutil
from pathlib import Path

import pytest

from config.settings import PROJECT_ROOT
from src.engine import FakeClock
from src.resources import ResourceDescriptor, ResourceKind, ResourceLimits, ResourceResolver

DEMO_PROJECT = PROJECT_ROOT / "data" / "demo_project"
TEMPLATES = PROJECT_ROOT / "data" / "templates"
DNF_DATA = PROJECT_ROOT / "data" / "dnf" / "a_and_b_or_not_c.json"


def mock_descriptor(fixture=None, resource_id="mock", **options) -> ResourceDescriptor:
    if fixture is not None:
        options["fixture"] = fixture
    limits = options.pop("limits", None) or ResourceLimits(timeout=5.0, max_retries=0)
    supports_logprobs = options.pop("supports_logprobs", False)
    return ResourceDescriptor(resource_id=resource_id, kind=ResourceKind.MODEL, uri=f"mock://{resource_id}",
                              limits=limits, supports_logprobs=supports_logprobs, options=options)


def mock_handle(fixture=None, resource_id="mock", **options):
    return ResourceResolver().resolve(mock_descriptor(fixture, resource_id, **options))


@pytest.fixture
def demo_project(tmp_path) -> Path:
    """Writable copy of the scripted demo story."""
    target = tmp_path / "project"
    shutil.copytree(DEMO_PROJECT, target)
    return target


@pytest.fixture
def clock():
    return FakeClock()

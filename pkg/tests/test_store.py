import asyncio
import hashlib
import json

import pytest

from src.errors import InvalidKey, KeyExists, KeyNotFound, StaleParent, VersionNotFound
from src.store import (
    FileVersionStore,
    InMemoryVersionStore,
    MemoryFilter,
    MemoryRecord,
    MemoryStore,
    VersionTag,
)


@pytest.fixture(params=["memory", "file"])
def store(request, tmp_path):
    return InMemoryVersionStore() if request.param == "memory" else FileVersionStore(tmp_path / "store")


def test_init_then_get(store):
    assert store.env_init("world", b"{}").value == "v0"
    doc = store.env_get("world")
    assert doc.body == b"{}"
    assert doc.version.value == "v0"
    assert store.head("world").value == "v0"


def test_init_twice_rejected(store):
    store.env_init("world", b"{}")
    with pytest.raises(KeyExists):
        store.env_init("world", b"{}")


def test_missing_key_and_version(store):
    with pytest.raises(KeyNotFound):
        store.env_get("nothing")
    store.env_init("world", b"{}")
    with pytest.raises(VersionNotFound):
        store.env_get("world", "v3")


@pytest.mark.asyncio
async def test_commit_advances_head(store):
    store.env_init("world", b"a")
    tag = await store.env_commit("world", b"b", "v0")
    assert tag == VersionTag(value="v1", parent="v0")
    assert store.env_get("world", "v0").body == b"a"
    assert store.env_get("world").body == b"b"


@pytest.mark.asyncio
async def test_stale_parent_rejected(store):
    store.env_init("world", b"a")
    await store.env_commit("world", b"b", "v0")
    with pytest.raises(StaleParent) as exc:
        await store.env_commit("world", b"c", "v0")
    assert exc.value.head == "v1"
    assert store.head("world").value == "v1"


@pytest.mark.asyncio
async def test_concurrent_commits_from_same_parent(store):
    """Exactly one writer wins a race on the same parent."""
    store.env_init("world", b"a")
    results = await asyncio.gather(*(store.env_commit("world", f"w{i}".encode(), "v0") for i in range(5)),
                                   return_exceptions=True)
    assert sum(1 for r in results if isinstance(r, VersionTag)) == 1
    assert sum(1 for r in results if isinstance(r, StaleParent)) == 4
    assert [e.version for e in store.env_history("world")] == ["v0", "v1"]


@pytest.mark.asyncio
async def test_file_store_layout_and_reload(tmp_path):
    root = tmp_path / "store"
    store = FileVersionStore(root)
    store.env_init("char/alice", b'{"name": "Alice"}')
    await store.env_commit("char/alice", b'{"name": "Alice", "hp": 3}', "v0")

    manifest = json.loads((root / "char" / "alice" / "manifest.json").read_text())
    assert [e["version"] for e in manifest] == ["v0", "v1"]
    assert manifest[1]["parent"] == "v0"
    assert manifest[1]["sha256"] == hashlib.sha256(b'{"name": "Alice", "hp": 3}').hexdigest()

    reopened = FileVersionStore(root)
    assert reopened.keys() == ["char/alice"]
    assert reopened.env_get("char/alice").json() == {"name": "Alice", "hp": 3}


@pytest.mark.parametrize("key", ["../escape", "char/../../escape", "/abs", "a//b", "", ".hidden", "a/"])
def test_file_store_rejects_keys_outside_root(tmp_path, key):
    store = FileVersionStore(tmp_path / "store")
    with pytest.raises(InvalidKey):
        store.env_init(key, b"{}")
    assert not (tmp_path / "escape").exists()
    assert not list(tmp_path.rglob("manifest.json"))


def test_bad_version_tag():
    with pytest.raises(ValueError):
        VersionTag(value="latest")


def record(kind, body, chapter_version=None):
    return MemoryRecord(agent_id="", kind=kind, body=body, chapter_version=chapter_version)


def test_memory_sequence_numbers_are_per_agent():
    memory = MemoryStore()
    assert memory.memory_append("alice", record("observation", "a1")) == 1
    assert memory.memory_append("alice", record("goal", "a2")) == 2
    assert memory.memory_append("bob", record("observation", "b1")) == 1
    assert [r.body for r in memory.memory_query("alice")] == ["a1", "a2"]
    assert memory.memory_query("nobody") == []


def test_memory_filters():
    memory = MemoryStore()
    memory.memory_append("alice", record("observation", "o1", "v0"))
    memory.memory_append("alice", record("goal", "g1", "v1"))
    memory.memory_append("alice", record("observation", "o2", "v1"))

    assert [r.body for r in memory.memory_query("alice", MemoryFilter(kind="observation"))] == ["o1", "o2"]
    assert [r.body for r in memory.memory_query("alice", MemoryFilter(since_seq=1))] == ["g1", "o2"]
    assert [r.body for r in memory.memory_query("alice", MemoryFilter(chapter_version="v1"))] == ["g1", "o2"]


def test_staged_memory_stays_private_until_flush():
    memory = MemoryStore()
    memory.memory_append("alice", record("observation", "seen"))
    staged = memory.stage()

    assert staged.memory_append("alice", record("goal", "reach the tower")) == 2
    assert [r.body for r in staged.memory_query("alice")] == ["seen", "reach the tower"]
    assert len(memory.memory_query("alice")) == 1

    assert staged.flush(chapter_version="v1") == 1
    flushed = memory.memory_query("alice")
    assert [r.body for r in flushed] == ["seen", "reach the tower"]
    assert flushed[1].chapter_version == "v1"
    assert staged.pending() == {}


def test_discarded_stage_leaves_no_trace():
    memory = MemoryStore()
    winner, loser = memory.stage(), memory.stage()
    winner.memory_append("bob", record("plan", "find key"))
    loser.memory_append("bob", record("plan", "sleep"))
    winner.flush()
    assert [r.body for r in memory.memory_query("bob")] == ["find key"]

"""
Versioned environment store and per-agent memory store.

Version chains are linear (v0, v1, ...) with optimistic concurrency on commit:
the caller names the parent it read, and a stale parent is rejected.
"""
import asyncio
import hashlib
import json
import os
import re
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, List, Literal, Optional

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.errors import InvalidKey, KeyExists, KeyNotFound, StaleParent, VersionNotFound

# slash-separated segments; a segment never starts with a dot, so "." and ".." are out
SAFE_KEY = re.compile(r"^[A-Za-z0-9_-][A-Za-z0-9_.-]*(?:/[A-Za-z0-9_-][A-Za-z0-9_.-]*)*$")


class VersionTag(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: str
    parent: Optional[str] = None

    @field_validator("value")
    @classmethod
    def _shape(cls, v):
        if not (v.startswith("v") and v[1:].isdigit()):
            raise ValueError(f"version tag must look like v<N>, got {v!r}")
        return v

    @property
    def n(self) -> int:
        return int(self.value[1:])

    @classmethod
    def of(cls, n: int) -> "VersionTag":
        return cls(value=f"v{n}", parent=f"v{n - 1}" if n > 0 else None)

    def __str__(self) -> str:
        return self.value


def as_tag(version) -> VersionTag:
    return version if isinstance(version, VersionTag) else VersionTag.of(int(str(version).lstrip("v")))


class VersionedDocument(BaseModel):
    model_config = ConfigDict(frozen=True)

    key: str
    version: VersionTag
    body: bytes
    committed_at: float

    def json(self) -> dict:
        return json.loads(self.body.decode("utf-8"))


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: str
    file: str
    sha256: str
    parent: Optional[str] = None
    ts: float


class VersionStore(ABC):
    """Shared contract of the in-memory and file-backed stores."""

    def __init__(self):
        self._locks: Dict[str, asyncio.Lock] = {}

    def _lock(self, key: str) -> asyncio.Lock:
        if key not in self._locks:
            self._locks[key] = asyncio.Lock()
        return self._locks[key]

    @abstractmethod
    def _entries(self, key: str) -> Optional[List[ManifestEntry]]:
        ...

    @abstractmethod
    def _read(self, key: str, entry: ManifestEntry) -> bytes:
        ...

    @abstractmethod
    def _write(self, key: str, n: int, body: bytes, parent: Optional[str]) -> ManifestEntry:
        ...

    @abstractmethod
    def keys(self) -> List[str]:
        ...

    def _chain(self, key: str) -> List[ManifestEntry]:
        entries = self._entries(key)
        if not entries:
            raise KeyNotFound(f"no version chain for key '{key}'")
        return entries

    def head(self, key: str) -> VersionTag:
        entry = self._chain(key)[-1]
        return VersionTag(value=entry.version, parent=entry.parent)

    def env_init(self, key: str, body: bytes) -> VersionTag:
        if self._entries(key):
            raise KeyExists(f"key '{key}' already has a version chain")
        entry = self._write(key, 0, body, None)
        logger.debug(f"Initialized {key}@{entry.version}")
        return VersionTag(value=entry.version)

    def env_get(self, key: str, version=None) -> VersionedDocument:
        chain = self._chain(key)
        if version is None:
            entry = chain[-1]
        else:
            n = as_tag(version).n
            if n >= len(chain):
                raise VersionNotFound(f"{key}@v{n} does not exist (head is {chain[-1].version})")
            entry = chain[n]
        return VersionedDocument(key=key, version=VersionTag(value=entry.version, parent=entry.parent),
                                 body=self._read(key, entry), committed_at=entry.ts)

    async def env_commit(self, key: str, body: bytes, parent) -> VersionTag:
        parent = as_tag(parent)
        async with self._lock(key):
            head = self.head(key)
            if head.value != parent.value:
                raise StaleParent(key, parent.value, head.value)
            entry = self._write(key, head.n + 1, body, head.value)
        logger.debug(f"Committed {key}@{entry.version} (parent {parent.value})")
        return VersionTag(value=entry.version, parent=entry.parent)

    def env_history(self, key: str) -> List[ManifestEntry]:
        return list(self._chain(key))


class InMemoryVersionStore(VersionStore):
    def __init__(self):
        super().__init__()
        self._chains: Dict[str, List[ManifestEntry]] = {}
        self._bodies: Dict[str, List[bytes]] = {}

    def _entries(self, key):
        return self._chains.get(key)

    def _read(self, key, entry):
        return self._bodies[key][int(entry.version[1:])]

    def _write(self, key, n, body, parent):
        entry = ManifestEntry(version=f"v{n}", file=f"v{n}.bin", sha256=hashlib.sha256(body).hexdigest(),
                              parent=parent, ts=time.time())
        self._chains.setdefault(key, []).append(entry)
        self._bodies.setdefault(key, []).append(bytes(body))
        return entry

    def keys(self):
        return sorted(self._chains)


class FileVersionStore(VersionStore):
    """<root>/<key>/manifest.json plus one v<N>.bin per version. Keys may contain '/'."""

    def __init__(self, root):
        super().__init__()
        self.root = Path(root)

    def _dir(self, key: str) -> Path:
        if not SAFE_KEY.fullmatch(key):
            raise InvalidKey(f"key {key!r} is not a safe store path")
        return self.root / key

    def _entries(self, key):
        manifest = self._dir(key) / "manifest.json"
        if not manifest.exists():
            return None
        return [ManifestEntry.model_validate(e) for e in json.loads(manifest.read_text(encoding="utf-8"))]

    def _read(self, key, entry):
        return (self._dir(key) / entry.file).read_bytes()

    def _write(self, key, n, body, parent):
        directory = self._dir(key)
        directory.mkdir(parents=True, exist_ok=True)
        entry = ManifestEntry(version=f"v{n}", file=f"v{n}.bin", sha256=hashlib.sha256(body).hexdigest(),
                              parent=parent, ts=time.time())
        (directory / entry.file).write_bytes(body)
        entries = (self._entries(key) or []) + [entry]
        tmp = directory / "manifest.json.tmp"
        tmp.write_text(json.dumps([e.model_dump() for e in entries], indent=2), encoding="utf-8")
        os.replace(tmp, directory / "manifest.json")
        return entry

    def keys(self):
        if not self.root.exists():
            return []
        return sorted(p.parent.relative_to(self.root).as_posix() for p in self.root.rglob("manifest.json"))


def dump_body(document: dict) -> bytes:
    return json.dumps(document, sort_keys=True, indent=2).encode("utf-8")


# --- memory ---------------------------------------------------------------------

MemoryKind = Literal["observation", "goal", "plan", "outcome"]


class MemoryRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: str
    seq: int = 0
    kind: MemoryKind
    body: str
    chapter_version: Optional[str] = None


class MemoryFilter(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Optional[MemoryKind] = None
    since_seq: int = 0
    chapter_version: Optional[str] = None


def _matches(record: MemoryRecord, flt: MemoryFilter) -> bool:
    return ((flt.kind is None or record.kind == flt.kind)
            and record.seq > flt.since_seq
            and (flt.chapter_version is None or record.chapter_version == flt.chapter_version))


class MemoryStore:
    """Append-only per-agent records; seq starts at 1 per agent."""

    def __init__(self):
        self._records: Dict[str, List[MemoryRecord]] = {}

    def memory_append(self, agent_id: str, record: MemoryRecord) -> int:
        records = self._records.setdefault(agent_id, [])
        seq = len(records) + 1
        records.append(record.model_copy(update={"agent_id": agent_id, "seq": seq}))
        return seq

    def memory_query(self, agent_id: str, flt: Optional[MemoryFilter] = None) -> List[MemoryRecord]:
        flt = flt or MemoryFilter()
        return [r for r in self._records.get(agent_id, []) if _matches(r, flt)]

    def agents(self) -> List[str]:
        return sorted(self._records)

    def stage(self) -> "StagedMemory":
        return StagedMemory(self)


class StagedMemory:
    """Overlay for one candidate branch: reads base + own records, writes stay private until flush."""

    def __init__(self, base: MemoryStore):
        self.base = base
        self._pending: Dict[str, List[MemoryRecord]] = {}

    def memory_append(self, agent_id: str, record: MemoryRecord) -> int:
        pending = self._pending.setdefault(agent_id, [])
        seq = len(self.base.memory_query(agent_id)) + len(pending) + 1
        pending.append(record.model_copy(update={"agent_id": agent_id, "seq": seq}))
        return seq

    def memory_query(self, agent_id: str, flt: Optional[MemoryFilter] = None) -> List[MemoryRecord]:
        flt = flt or MemoryFilter()
        own = [r for r in self._pending.get(agent_id, []) if _matches(r, flt)]
        return self.base.memory_query(agent_id, flt) + own

    def pending(self) -> Dict[str, List[MemoryRecord]]:
        return {k: list(v) for k, v in self._pending.items()}

    def flush(self, chapter_version: Optional[str] = None) -> int:
        count = 0
        for agent_id in sorted(self._pending):
            for record in self._pending[agent_id]:
                update = {"chapter_version": chapter_version} if chapter_version else {}
                self.base.memory_append(agent_id, record.model_copy(update=update))
                count += 1
        self._pending.clear()
        return count

"""
Agent registry: specification, publication, registration and discovery.

Reads go through an immutable snapshot tuple; every mutation builds a new
tuple and swaps it in, then rewrites the registry file when one is configured.
"""
import asyncio
import fnmatch
import json
import os
import re
import time
from enum import Enum
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, Iterable, List, Optional, Tuple

import aiohttp
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config.settings import settings
from src.errors import DuplicateAgent, EndpointUnreachable, InvalidSpec, LifecycleError, UnknownAgent

SEMVER = re.compile(r"^(0|[1-9]\d*)\.(0|[1-9]\d*)\.(0|[1-9]\d*)(?:-([0-9A-Za-z.-]+))?(?:\+[0-9A-Za-z.-]+)?$")
INPROC = "inproc://"

AgentHandler = Callable[..., Awaitable[Any]]


class AgentStatus(str, Enum):
    PUBLISHED = "published"
    REGISTERED = "registered"
    RETIRED = "retired"


class Health(str, Enum):
    UNKNOWN = "unknown"
    HEALTHY = "healthy"
    UNHEALTHY = "unhealthy"

    @property
    def rank(self) -> int:
        return {"healthy": 2, "unknown": 1, "unhealthy": 0}[self.value]


_NEXT_STATUS = {
    AgentStatus.PUBLISHED: AgentStatus.REGISTERED,
    AgentStatus.REGISTERED: AgentStatus.RETIRED,
}


class AgentSpecification(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    version: str
    capabilities: Tuple[str, ...] = ()
    input_schema: Optional[str] = None
    output_schema: Optional[str] = None
    required_resources: Tuple[str, ...] = ()
    config: Dict[str, Any] = Field(default_factory=dict)

    @property
    def agent_id(self) -> str:
        return f"{self.name}@{self.version}"


class AgentDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: str
    spec: AgentSpecification
    endpoint: Optional[str] = None
    status: AgentStatus = AgentStatus.PUBLISHED
    registered_at: Optional[float] = None
    health: Health = Health.UNKNOWN


def _prerelease_key(identifier: str) -> tuple:
    if identifier.isdigit():
        return (0, int(identifier))
    # digit runs compare as numbers, so rc10 follows rc9
    parts = re.split(r"(\d+)", identifier)
    return (1, tuple(int(p) if i % 2 else p for i, p in enumerate(parts)))


def version_key(version: str) -> tuple:
    """Semver precedence; a release outranks its prereleases, build metadata is ignored."""
    m = SEMVER.match(version)
    major, minor, patch, pre = int(m.group(1)), int(m.group(2)), int(m.group(3)), m.group(4)
    if not pre:
        return (major, minor, patch, 1, ())
    return (major, minor, patch, 0, tuple(_prerelease_key(i) for i in pre.split(".")))


def rank_agents(agents: Iterable[AgentDescriptor], capabilities: Iterable[str]) -> List[AgentDescriptor]:
    """Health desc, fewest extra capabilities, newest version, then name."""
    wanted = set(capabilities)
    ordered = sorted(agents, key=lambda d: d.spec.name)
    ordered.sort(key=lambda d: version_key(d.spec.version), reverse=True)
    ordered.sort(key=lambda d: (-d.health.rank, len(set(d.spec.capabilities) - wanted)))
    return ordered


class AgentRegistry:
    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self._snapshot: Tuple[AgentDescriptor, ...] = ()
        self._inproc: Dict[str, AgentHandler] = {}
        self._lock = asyncio.Lock()

    # --- persistence -------------------------------------------------------

    @classmethod
    def load(cls, path) -> "AgentRegistry":
        registry = cls(path)
        if registry.path.exists():
            data = json.loads(registry.path.read_text(encoding="utf-8"))
            registry._snapshot = tuple(AgentDescriptor.model_validate(d) for d in data)
            logger.debug(f"Loaded {len(registry._snapshot)} agent(s) from {path}")
        return registry

    def _save(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_text(json.dumps([d.model_dump(mode="json") for d in self._snapshot], indent=2), encoding="utf-8")
        os.replace(tmp, self.path)

    def _swap(self, descriptors: Tuple[AgentDescriptor, ...]) -> None:
        self._snapshot = descriptors
        self._save()

    def _replace(self, updated: AgentDescriptor) -> None:
        self._swap(tuple(updated if d.agent_id == updated.agent_id else d for d in self._snapshot))

    # --- lifecycle -----------------------------------------------------------

    @property
    def agents(self) -> Tuple[AgentDescriptor, ...]:
        return self._snapshot

    def get(self, agent_id: str) -> AgentDescriptor:
        for d in self._snapshot:
            if d.agent_id == agent_id:
                return d
        raise UnknownAgent(f"no agent '{agent_id}'")

    def specify(self, spec: AgentSpecification) -> AgentSpecification:
        violations: List[str] = []
        if not spec.name.strip():
            violations.append("name is empty")
        if not SEMVER.match(spec.version):
            violations.append(f"version '{spec.version}' is not semver")
        capabilities = sorted({c.strip().lower() for c in spec.capabilities if c.strip()})
        if not capabilities:
            violations.append("capabilities are empty")
        if any(d.spec.name == spec.name and d.spec.version == spec.version for d in self._snapshot):
            violations.append(f"duplicate ({spec.name}, {spec.version})")
        if violations:
            raise InvalidSpec(violations)
        return spec.model_copy(update={"capabilities": tuple(capabilities)})

    def publish(self, spec: AgentSpecification) -> AgentDescriptor:
        if any(d.agent_id == spec.agent_id for d in self._snapshot):
            raise DuplicateAgent(f"agent '{spec.agent_id}' is already published")
        canonical = self.specify(spec)
        descriptor = AgentDescriptor(agent_id=canonical.agent_id, spec=canonical)
        self._swap(self._snapshot + (descriptor,))
        logger.info(f"📦 Published {descriptor.agent_id}")
        return descriptor

    def provide(self, name: str, handler: AgentHandler) -> None:
        """Bind an in-process callable reachable as inproc://<name>."""
        self._inproc[name] = handler

    def handler(self, endpoint: str) -> AgentHandler:
        return self._inproc[endpoint[len(INPROC):]]

    async def _ping(self, endpoint: str) -> bool:
        if endpoint.startswith(INPROC):
            return endpoint[len(INPROC):] in self._inproc
        try:
            timeout = aiohttp.ClientTimeout(total=settings.health_check_timeout)
            async with aiohttp.ClientSession(timeout=timeout) as session:
                async with session.get(endpoint.rstrip("/") + "/health") as response:
                    return response.status == 200
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            logger.debug(f"Health ping to {endpoint} failed: {e}")
            return False

    def _advance(self, descriptor: AgentDescriptor, target: AgentStatus) -> None:
        if _NEXT_STATUS.get(descriptor.status) != target:
            raise LifecycleError(f"{descriptor.agent_id}: cannot go from {descriptor.status.value} to {target.value}")

    async def register(self, agent_id: str, endpoint: str, handler: Optional[AgentHandler] = None) -> AgentDescriptor:
        descriptor = self.get(agent_id)
        self._advance(descriptor, AgentStatus.REGISTERED)
        if handler is not None and endpoint.startswith(INPROC):
            self.provide(endpoint[len(INPROC):], handler)
        if not await self._ping(endpoint):
            raise EndpointUnreachable(f"{agent_id}: endpoint {endpoint} did not answer")
        async with self._lock:
            descriptor = self.get(agent_id)
            self._advance(descriptor, AgentStatus.REGISTERED)
            updated = descriptor.model_copy(update={
                "endpoint": endpoint, "status": AgentStatus.REGISTERED,
                "registered_at": time.time(), "health": Health.HEALTHY,
            })
            self._replace(updated)
        logger.success(f"✅ Registered {agent_id} at {endpoint}")
        return updated

    def retire(self, agent_id: str) -> AgentDescriptor:
        descriptor = self.get(agent_id)
        self._advance(descriptor, AgentStatus.RETIRED)
        updated = descriptor.model_copy(update={"status": AgentStatus.RETIRED})
        self._replace(updated)
        logger.info(f"Retired {agent_id}")
        return updated

    def discover(self, capabilities: Iterable[str] = (), name_pattern: Optional[str] = None,
                 min_health: Optional[Health] = None) -> List[AgentDescriptor]:
        wanted = {c.lower() for c in capabilities}
        snapshot = self._snapshot
        matches = [
            d for d in snapshot
            if d.status == AgentStatus.REGISTERED
            and wanted <= set(d.spec.capabilities)
            and (name_pattern is None or fnmatch.fnmatchcase(d.spec.name, name_pattern))
            and (min_health is None or d.health.rank >= Health(min_health).rank)
        ]
        return rank_agents(matches, wanted)

    # --- health --------------------------------------------------------------

    async def probe_health(self) -> Dict[str, Health]:
        """Ping every registered remote agent; in-process agents stay healthy."""
        results: Dict[str, Health] = {}
        remote = [d for d in self._snapshot if d.status == AgentStatus.REGISTERED and d.endpoint
                  and not d.endpoint.startswith(INPROC)]
        pings = await asyncio.gather(*[self._ping(d.endpoint) for d in remote])
        async with self._lock:
            for d, ok in zip(remote, pings):
                health = Health.HEALTHY if ok else Health.UNHEALTHY
                results[d.agent_id] = health
                current = self.get(d.agent_id)
                if current.status == AgentStatus.REGISTERED and current.health != health:
                    self._replace(current.model_copy(update={"health": health}))
                    if health == Health.UNHEALTHY:
                        logger.warning(f"⚠️ {d.agent_id} is unhealthy")
        return results

    async def run_health_checks(self, interval: Optional[float] = None, stop: Optional[asyncio.Event] = None) -> None:
        interval = interval or settings.health_check_interval
        stop = stop or asyncio.Event()
        while not stop.is_set():
            await self.probe_health()
            try:
                await asyncio.wait_for(stop.wait(), timeout=interval)
            except asyncio.TimeoutError:
                pass


def load_agent_spec(path) -> AgentSpecification:
    try:
        return AgentSpecification.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise InvalidSpec([err["msg"] for err in e.errors()])

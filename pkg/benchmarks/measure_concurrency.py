import asyncio
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from loguru import logger

from config.settings import PROJECT_ROOT
from src.creagentive import RunConfig, StoryRunner

logger.remove()
logger.add(sys.stderr, level="WARNING")

LATENCY = 0.02  # seconds per mock model call
STORIES = 5


def prepare(workdir: Path) -> Path:
    project = workdir / "project"
    shutil.copytree(PROJECT_ROOT / "data" / "demo_project", project)
    descriptor = {"resource_id": "mock-story", "kind": "model", "uri": "mock://mock-story",
                  "limits": {"max_concurrent": 16, "timeout": 5.0, "max_retries": 0},
                  "options": {"latency": LATENCY}}
    (project / "resources.json").write_text(json.dumps([descriptor]))
    return project


async def story(project: Path, out: Path, seed: int, concurrent: bool):
    config = RunConfig(project_dir=project, out_dir=out, seed=seed, concurrent_candidates=concurrent)
    return await StoryRunner(config).run()


async def benchmark():
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        project = prepare(workdir)

        # Candidates one at a time vs concurrently, one story
        start = time.time()
        await story(project, workdir / "seq", 0, concurrent=False)
        sequential_time = time.time() - start

        start = time.time()
        await story(project, workdir / "par", 0, concurrent=True)
        parallel_time = time.time() - start

        print(f"Sequential candidates: {sequential_time:.2f}s")
        print(f"Concurrent candidates: {parallel_time:.2f}s")
        print(f"Speedup: {sequential_time / parallel_time:.2f}x")

        # Several stories side by side
        start = time.time()
        for s in range(STORIES):
            await story(project, workdir / f"one-{s}", s, concurrent=True)
        one_by_one = time.time() - start

        start = time.time()
        await asyncio.gather(*(story(project, workdir / f"many-{s}", s, concurrent=True) for s in range(STORIES)))
        side_by_side = time.time() - start

        print(f"{STORIES} stories one by one: {one_by_one:.2f}s")
        print(f"{STORIES} stories side by side: {side_by_side:.2f}s")
        print(f"Speedup: {one_by_one / side_by_side:.2f}x")


if __name__ == "__main__":
    asyncio.run(benchmark())

import asyncio
import csv
import json
import os
import shutil
import sys
import tempfile
import time
from datetime import datetime
from pathlib import Path

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from loguru import logger

from config.settings import PROJECT_ROOT
from src.creagentive import RunConfig, StoryRunner

logger.remove()
logger.add(sys.stderr, level="INFO")
logger.add("benchmarks/benchmark.log", rotation="1 day")

FAULT_RATES = [0.0, 0.1, 0.3, 0.6, 1.0]
SEEDS = [0, 1, 2]


async def run_once(workdir: Path, fault_rate: float, seed: int) -> dict:
    project = workdir / f"project-{fault_rate}-{seed}"
    shutil.copytree(PROJECT_ROOT / "data" / "demo_project", project)
    descriptor = {"resource_id": "mock-story", "kind": "model", "uri": "mock://mock-story",
                  "limits": {"timeout": 5.0, "max_retries": 0},
                  "options": {"fault_rate": fault_rate, "fault_seed": seed}}
    (project / "resources.json").write_text(json.dumps([descriptor]))

    runner = StoryRunner(RunConfig(project_dir=project, out_dir=project / "out", seed=seed))
    start = time.time()
    try:
        result = await runner.run()
        status, chapters = result.status, len(result.chapters)
    except Exception as e:
        logger.error(f"❌ fault_rate={fault_rate} seed={seed}: {e}")
        status, chapters = f"error: {type(e).__name__}", 0
    elapsed = time.time() - start

    events = runner.event_log.events
    return {
        "fault_rate": fault_rate,
        "seed": seed,
        "status": status,
        "chapters": chapters,
        "faults_injected": runner.handles["mock-story"].provider.faults_injected,
        "agent_violations": sum(1 for e in events if e.kind == "violation" and e.payload.get("scope") == "agent"),
        "events": len(events),
        "seconds": round(elapsed, 3),
    }


async def run_benchmark():
    timestamp = datetime.now().strftime("%Y_%m_%d_%H_%M")
    results_dir = Path("benchmarks/results")
    results_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    logger.info(f"🚀 Running demo story over {len(FAULT_RATES)} fault rates x {len(SEEDS)} seeds...")
    with tempfile.TemporaryDirectory() as tmp:
        for rate in FAULT_RATES:
            for seed in SEEDS:
                row = await run_once(Path(tmp), rate, seed)
                logger.info(f"fault_rate={rate} seed={seed}: {row['status']}, "
                            f"{row['faults_injected']} fault(s), {row['agent_violations']} violation(s)")
                rows.append(row)

    csv_path = results_dir / f"demo_{timestamp}.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    recovered = sum(1 for r in rows if r["status"] == "done")
    logger.success(f"✅ {recovered}/{len(rows)} runs reached the ending. Results saved to {csv_path}")


if __name__ == "__main__":
    asyncio.run(run_benchmark())

"""Desk-scale comparison runs with an on-disk cache keyed by config fingerprint."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from cderail.agents import AgentConfig
from cderail.dqn import DqnConfig
from cderail.curriculum import Curriculum, RunConfig, RunResult, builtin_curriculum, permute, run_curriculum
from cderail.errors import MetricsIOError
from cderail.harness.metrics import MetricsWriter, read_metrics

log = logging.getLogger(__name__)

DESK_SCALE = 0.05
DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_HIDDEN = (256, 256)


@dataclass(frozen=True)
class Arm:
    algo: str
    curriculum: str = "custom"
    order: str = "PMD"

    @property
    def name(self) -> str:
        base = f"{self.algo}-{self.curriculum}"
        return base if self.curriculum == "none" or self.order == "PMD" else f"{base}-{self.order}"

    def build(self, scale: float) -> Curriculum:
        cur = builtin_curriculum(self.curriculum, scale)
        return cur if self.curriculum == "none" else permute(cur, self.order)


ARMS = {
    a.name: a
    for a in (
        Arm("dqn", "none"),
        Arm("dqn"),
        Arm("dqn_ewc"),
        Arm("dqn_pau"),
        Arm("cde"),
        Arm("dqn", order="MPD"),
        Arm("dqn", order="MDP"),
        Arm("cde", order="MPD"),
        Arm("cde", order="MDP"),
    )
}


def desk_run_config(scale: float = DESK_SCALE, hidden=DESK_HIDDEN, **overrides) -> RunConfig:
    """Settings for scaled-down comparison runs.

    Exploration and the target-network blend are both stretched by ``1/scale``
    so that their profiles over the whole curriculum match a full-length run.
    Retention probes are off; the final evaluation uses 50 episodes.
    """
    agent = AgentConfig(hidden=tuple(hidden), epsilon_time_scale=1.0 / scale)
    dqn = DqnConfig(target_tau=min(1.0, DqnConfig().target_tau / scale))
    base = RunConfig(agent=agent, dqn=dqn, probe_every=0.0, eval_episodes=50)
    return replace(base, **overrides)


def run_arm(arm: Arm, seed: int, results_dir, scale: float = DESK_SCALE, run: RunConfig | None = None,
            recompute: bool = False) -> RunResult:
    """Result for one (arm, seed), reusing a cached metrics file whose
    fingerprint matches the requested configuration."""
    run = run or desk_run_config(scale)
    run = replace(run, agent=replace(run.agent, algo=arm.algo))
    curriculum = arm.build(scale)
    path = Path(results_dir) / f"{arm.name}_s{seed}.jsonl"
    want = run.fingerprint(curriculum, seed)
    if path.exists() and not recompute:
        try:
            cached = read_metrics(path)
            if cached.fingerprint == want:
                return cached
            log.info("%s: stale fingerprint, recomputing", path)
        except MetricsIOError as exc:
            log.info("%s: unreadable (%s), recomputing", path, exc)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".partial")
    with MetricsWriter(tmp) as sink:
        result = run_curriculum(arm.algo, curriculum, seed, sink, run)
    tmp.replace(path)
    return result


def final_table(results: dict[str, list[RunResult]]) -> list[dict]:
    rows = []
    for name, runs in results.items():
        comps = [r.final["completion_mean"] for r in runs]
        scores = [r.final["score_mean"] for r in runs]
        rows.append(
            {
                "arm": name,
                "seeds": [r.seed for r in runs],
                "completion": comps,
                "score": scores,
                "median_completion": float(np.median(comps)),
                "median_score": float(np.median(scores)),
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'arm':<22} {'med.compl':>9} {'med.score':>9}  per-seed completion"]
    for r in rows:
        per = " ".join(f"{c:.2f}" for c in r["completion"])
        lines.append(f"{r['arm']:<22} {r['median_completion']:9.3f} {r['median_score']:9.3f}  {per}")
    return "\n".join(lines)

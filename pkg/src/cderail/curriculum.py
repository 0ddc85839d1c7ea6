"""Curricula (built-in tables and a text format) and the training loop that walks them."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from cderail.agents import Agent, AgentConfig, make_agent
from cderail.dqn import DqnConfig
from cderail.errors import BadOrderError, ParseError, ValidationError
from cderail.harness.evaluation import EvalResult, evaluate, run_episode
from cderail.observation import ObsConfig, obs_dim
from cderail.railsim import Family, StageSpec

log = logging.getLogger(__name__)

KINDS = ("none", "naive", "custom", "custom_rehearsal")
FAMILY_TOKENS = {
    "sparse": Family.SPARSE,
    "pathfinding": Family.PATHFINDING,
    "malfunction": Family.MALFUNCTION,
    "deadlock": Family.DEADLOCK,
}
ORDER_LETTERS = {"P": Family.PATHFINDING, "M": Family.MALFUNCTION, "D": Family.DEADLOCK}

# crossovers per adjacent track pair in the four deadlock rows: fewer as traffic grows
DEADLOCK_SWITCHES = (8, 6, 4, 3)

# full-task evaluation environment
EVAL_SPEC = StageSpec(Family.SPARSE, 16, 16, 3, (25, 25, 25, 25), Fraction(1, 1000), 1)

# one representative environment per family for skill-retention probes
PROBE_SPECS = {
    Family.PATHFINDING: StageSpec(Family.PATHFINDING, 16, 16, 1, (0, 0, 0, 100), Fraction(0), 1),
    Family.MALFUNCTION: StageSpec(Family.MALFUNCTION, 12, 5, 8, (25, 25, 25, 25), Fraction(1, 100), 1),
    Family.DEADLOCK: StageSpec(Family.DEADLOCK, 32, 4, 8, (50, 0, 25, 25), Fraction(1, 64), 1, DEADLOCK_SWITCHES[2]),
}
PROBE_SEED = 900_000
EVAL_SEED = 1_000_000


@dataclass
class Curriculum:
    name: str
    stages: list[StageSpec]

    @property
    def task_boundaries(self) -> list[int]:
        """Stage indices that start a new environment family."""
        return [i for i in range(1, len(self.stages)) if self.stages[i].family != self.stages[i - 1].family]

    def __len__(self):
        return len(self.stages)


def _row(family, size, agents, mix, rate, steps, switches=None) -> StageSpec:
    w, h = size
    return StageSpec(family, w, h, agents, mix, Fraction(rate), steps, switches)


MIXES = ((0, 0, 0, 100), (50, 0, 0, 50), (50, 0, 25, 25), (25, 25, 25, 25))


def _custom_blocks(steps: int):
    pf = [_row(Family.PATHFINDING, (n, n), 1, MIXES[0], 0, steps) for n in (4, 8, 16, 32)]
    mf = [_row(Family.MALFUNCTION, (12, 5), k, MIXES[i], Fraction(1, 100), steps) for i, k in enumerate((5, 6, 7, 8))]
    dl = [
        _row(Family.DEADLOCK, size, k, MIXES[i], Fraction(1, 64), steps, DEADLOCK_SWITCHES[i])
        for i, (size, k) in enumerate((((32, 2), 2), ((32, 2), 4), ((32, 4), 8), ((32, 4), 16)))
    ]
    return pf, mf, dl


def builtin_curriculum(kind: str, scale: float = 1.0) -> Curriculum:
    """The four training schedules, with every step budget multiplied by ``scale``."""
    kind = kind.replace("-", "_")
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if kind == "none":
        stages = [_row(Family.SPARSE, (64, 64), 14, MIXES[3], Fraction(1, 1000), 960_000)]
    elif kind == "naive":
        rows = [((16, 18), 1, MIXES[0], 0), ((28, 28), 3, MIXES[1], Fraction(1, 1000)),
                ((40, 40), 6, MIXES[2], Fraction(1, 1000)), ((52, 52), 10, MIXES[3], Fraction(1, 1000)),
                ((64, 64), 14, MIXES[3], Fraction(1, 1000))]
        stages = [_row(Family.SPARSE, size, k, mix, rate, 192_000) for size, k, mix, rate in rows]
    elif kind == "custom":
        pf, mf, dl = _custom_blocks(80_000)
        stages = pf + mf + dl
    elif kind == "custom_rehearsal":
        pf, mf, dl = _custom_blocks(64_000)
        stages = pf + mf + [pf[3]] + dl + [pf[3], mf[3]]
    else:
        raise ValueError(f"unknown curriculum {kind!r}; expected one of {KINDS}")
    return Curriculum(kind, [s.scaled(scale) for s in stages])


def permute(curriculum: Curriculum, order: str) -> Curriculum:
    """Reorder the Pathfinding/Malfunction/Deadlock blocks, e.g. ``"MPD"``."""
    order = order.upper()
    if sorted(order) != sorted("PMD"):
        raise BadOrderError(f"order must be a permutation of PMD, got {order!r}")
    blocks: dict[Family, list[StageSpec]] = {}
    seen: list[Family] = []
    for s in curriculum.stages:
        if s.family not in ORDER_LETTERS.values():
            raise BadOrderError(f"{curriculum.name} contains {s.family.value} stages; only P/M/D curricula can be permuted")
        if s.family in blocks and seen[-1] != s.family:
            raise BadOrderError(f"{curriculum.name} revisits {s.family.value}; rehearsal curricula cannot be permuted")
        if s.family not in blocks:
            seen.append(s.family)
            blocks[s.family] = []
        blocks[s.family].append(s)
    if set(blocks) != set(ORDER_LETTERS.values()):
        raise BadOrderError(f"{curriculum.name} lacks one of the three families")
    stages = [s for letter in order for s in blocks[ORDER_LETTERS[letter]]]
    suffix = "" if order == "PMD" else f"_{order}"
    return Curriculum(curriculum.name + suffix, stages)


# Curriculum text format: one stage per line,
#   family width height agents s1/s2/s3/s4 malf_num/malf_den steps [switches]
# with '#' starting a comment.


def format_stage(s: StageSpec) -> str:
    rate = Fraction(s.malfunction_rate)
    fields = [s.family.value, str(s.width), str(s.height), str(s.agents), "/".join(map(str, s.speed_mix)),
              f"{rate.numerator}/{rate.denominator}", str(s.network_steps)]
    if s.switches is not None:
        fields.append(str(s.switches))
    return " ".join(fields)


def dump_curriculum(curriculum: Curriculum) -> str:
    return f"# {curriculum.name}\n" + "".join(format_stage(s) + "\n" for s in curriculum.stages)


def save_curriculum(curriculum: Curriculum, path) -> None:
    Path(path).write_text(dump_curriculum(curriculum))


def _int(token: str, what: str, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {token!r}", line=lineno) from None


def parse_stage(line: str, lineno: int = 1) -> StageSpec:
    tokens = line.split()
    if len(tokens) not in (7, 8):
        raise ParseError(f"expected 7 or 8 fields, got {len(tokens)}", line=lineno)
    fam = FAMILY_TOKENS.get(tokens[0].lower())
    if fam is None:
        raise ParseError(f"unknown family {tokens[0]!r}", line=lineno)
    width, height, agents = (_int(t, n, lineno) for t, n in zip(tokens[1:4], ("width", "height", "agents")))
    mix = tokens[4].split("/")
    if len(mix) != 4:
        raise ParseError("speed mix needs four '/'-separated values", line=lineno)
    mix = tuple(_int(v, "speed fraction", lineno) for v in mix)
    rate = tokens[5].split("/")
    if len(rate) != 2:
        raise ParseError("malfunction rate must be num/den", line=lineno)
    num, den = (_int(v, "malfunction rate", lineno) for v in rate)
    if den == 0:
        raise ParseError("zero denominator", line=lineno)
    steps = _int(tokens[6], "steps", lineno)
    switches = _int(tokens[7], "switches", lineno) if len(tokens) == 8 else None
    spec = StageSpec(fam, width, height, agents, mix, Fraction(num, den), steps, switches)
    try:
        return spec.validate()
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def parse_curriculum(text: str, name: str = "file") -> Curriculum:
    stages = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            stages.append(parse_stage(line, lineno))
    if not stages:
        raise ParseError("curriculum has no stages")
    return Curriculum(name, stages)


def load_curriculum(path) -> Curriculum:
    path = Path(path)
    return parse_curriculum(path.read_text(), path.stem)


@dataclass(frozen=True)
class RunConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    reset_buffer: str = "family"  # or "row"
    probe_every: float = 0.1  # fraction of a stage's budget; 0 disables probes
    probe_episodes: int = 10
    eval_episodes: int = 50
    eval_spec: StageSpec = EVAL_SPEC

    def fingerprint(self, curriculum: Curriculum, seed: int) -> str:
        blob = json.dumps(
            {"config": asdict(self), "curriculum": dump_curriculum(curriculum), "seed": seed},
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    episodes: list[dict]
    probes: list[dict]
    final: dict
    fingerprint: str
    seed: int
    wall_clock: float
    boundaries: list[dict] = field(default_factory=list)
    header: dict = field(default_factory=dict)
    agent: Agent | None = field(default=None, repr=False, compare=False)


class ListSink:
    def __init__(self):
        self.records: list[dict] = []

    def emit(self, record: dict) -> None:
        self.records.append(record)


def _probe(agent: Agent, families, run: RunConfig, stage: int, steps: int, sink) -> list[dict]:
    out = []
    targets = [(f.value, PROBE_SPECS[f]) for f in families] + [("eval", run.eval_spec)]
    for name, spec in targets:
        res = evaluate(agent.greedy, spec, run.probe_episodes, PROBE_SEED, run.obs)
        rec = {"type": "probe", "stage": stage, "env_steps": steps, "env": name, **res.as_dict()}
        sink.emit(rec)
        out.append(rec)
    return out


def run_curriculum(algo: str, curriculum: Curriculum, seed: int, sink=None, run: RunConfig | None = None) -> RunResult:
    """Train ``algo`` through every stage, handling task boundaries, then evaluate."""
    run = run or RunConfig()
    run = replace(run, agent=replace(run.agent, algo=algo))
    sink = sink if sink is not None else ListSink()
    started = time.perf_counter()
    fingerprint = run.fingerprint(curriculum, seed)
    header = {
        "type": "header",
        "algo": algo,
        "curriculum": curriculum.name,
        "stages": len(curriculum.stages),
        "seed": seed,
        "fingerprint": fingerprint,
    }
    sink.emit(header)
    agent = make_agent(obs_dim(run.obs), run.agent, run.dqn, seed)
    env_rng = np.random.default_rng([seed, 0xC0881])
    families = [f for f in ORDER_LETTERS.values() if any(s.family == f for s in curriculum.stages)]
    episodes, probes, boundaries = [], [], []
    total_steps = 0
    for index, spec in enumerate(curriculum.stages):
        prev = curriculum.stages[index - 1] if index else None
        if prev is not None and (run.reset_buffer == "row" or spec.family != prev.family):
            agent.task_boundary()
            rec = {"type": "boundary", "stage": index, "buffer_size": len(agent.buffer), **agent.summary()}
            sink.emit(rec)
            boundaries.append(rec)
        stage_steps, episode = 0, 0
        probe_stride = int(spec.network_steps * run.probe_every) if run.probe_every > 0 else 0
        next_probe = probe_stride
        while stage_steps < spec.network_steps:
            env_seed = int(env_rng.integers(2**31 - 1))
            ticks, score, completion = run_episode(agent, spec, env_seed, run.obs, train=True)
            agent.end_episode(score, completion)
            stage_steps += ticks
            total_steps += ticks
            rec = {
                "type": "episode",
                "stage": index,
                "family": spec.family.value,
                "episode": episode,
                "ticks": ticks,
                "score": score,
                "completion": completion,
                "epsilon": agent.epsilon,
                "loss": None if np.isnan(agent.last_loss) else agent.last_loss,
                **agent.summary(),
            }
            sink.emit(rec)
            episodes.append(rec)
            episode += 1
            while probe_stride and run.probe_episodes and stage_steps >= next_probe:
                probes += _probe(agent, families, run, index, total_steps, sink)
                next_probe += probe_stride
        log.info("stage %d (%s) done: %d episodes, %d steps", index, spec.family.value, episode, stage_steps)
    agent.finish()
    result: EvalResult = evaluate(agent.greedy, run.eval_spec, run.eval_episodes, EVAL_SEED, run.obs)
    final = {"type": "eval", "env": "eval", **result.as_dict(), **agent.summary()}
    sink.emit(final)
    wall = time.perf_counter() - started
    sink.emit({"type": "footer", "episodes": len(episodes), "env_steps": total_steps, "wall_clock": wall})
    return RunResult(episodes, probes, final, fingerprint, seed, wall, boundaries, header, agent)

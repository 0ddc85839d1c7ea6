"""Newline-delimited JSON metrics files.

Each line is one object with a ``type`` field:

``header``    run identity (algo, curriculum, seed, config fingerprint, schema)
``boundary``  a task boundary (stage index, buffer size after reset, anchors)
``episode``   one training episode (stage, episode, ticks, score, completion, epsilon, loss, anchors)
``probe``     a retention probe (stage, env_steps, env, score/completion mean and std)
``eval``      the final evaluation
``footer``    totals and wall-clock seconds
"""

from __future__ import annotations

import json
from pathlib import Path

from cderail.curriculum import RunResult
from cderail.errors import MetricsIOError

SCHEMA = "cderail.metrics"
SCHEMA_VERSION = 1


class MetricsWriter:
    """Sink that appends each record to a file as it arrives."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = self.path.open("w")

    def emit(self, record: dict) -> None:
        if record.get("type") == "header":
            record = {**record, "schema": SCHEMA, "version": SCHEMA_VERSION}
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def result_records(result: RunResult) -> list[dict]:
    header = {**result.header, "type": "header", "schema": SCHEMA, "version": SCHEMA_VERSION,
              "seed": result.seed, "fingerprint": result.fingerprint}
    footer = {"type": "footer", "episodes": len(result.episodes),
              "env_steps": sum(e["ticks"] for e in result.episodes), "wall_clock": result.wall_clock}
    return [header, *result.boundaries, *result.episodes, *result.probes, result.final, footer]


def write_metrics(result: RunResult, path) -> None:
    try:
        with Path(path).open("w") as fh:
            for rec in result_records(result):
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise MetricsIOError(f"cannot write {path}: {exc}") from exc


def read_records(path) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise MetricsIOError(f"cannot read {path}: {exc}") from exc
    records = []
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MetricsIOError(f"malformed record: {exc.msg}", record=i) from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise MetricsIOError("record has no type", record=i)
        records.append(rec)
    if not records or records[0]["type"] != "header":
        raise MetricsIOError("missing header", record=0)
    head = records[0]
    if head.get("schema") != SCHEMA or head.get("version") != SCHEMA_VERSION:
        raise MetricsIOError(f"unsupported schema {head.get('schema')} v{head.get('version')}", record=0)
    if records[-1]["type"] != "footer":
        raise MetricsIOError("file ends without a footer (truncated run?)", record=len(records))
    return records


def read_metrics(path) -> RunResult:
    records = read_records(path)
    head, foot = records[0], records[-1]
    by_type: dict[str, list[dict]] = {}
    for rec in records[1:-1]:
        by_type.setdefault(rec["type"], []).append(rec)
    finals = by_type.get("eval", [])
    if len(finals) != 1:
        raise MetricsIOError(f"expected one eval record, found {len(finals)}", record=len(records) - 1)
    header = {k: v for k, v in head.items() if k not in ("schema", "version")}
    return RunResult(
        episodes=by_type.get("episode", []),
        probes=by_type.get("probe", []),
        final=finals[0],
        fingerprint=head["fingerprint"],
        seed=head["seed"],
        wall_clock=foot["wall_clock"],
        boundaries=by_type.get("boundary", []),
        header=header,
    )

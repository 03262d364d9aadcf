"""Line-delimited trace ingestion and counterfactual replay.

This is the integration boundary for real deployments: a pipeline that
runs actual models exports one JSON record per line per (prompt, block),
carrying the per-frame rewards it measured and, optionally, its observed
component timings. The replay machinery then re-runs the routing decision
at any threshold against those recorded scores, filling in missing
timings from fitted latency parameters.

Record format (one JSON object per line, unknown keys rejected):

    required  prompt_id          string
    required  block_index        integer >= 0
    required  frame_scores       non-empty array of finite numbers
    optional  draft_time_s       number >= 0
    optional  target_time_s      number >= 0 (cost of a target regeneration
                                  for this block; 0/absent if never rejected)
    optional  decode_time_s      number >= 0
    optional  score_time_s       number >= 0
    optional  producer_observed  "draft" | "target"

Records stream one line at a time, so multi-gigabyte traces never need
to be buffered whole.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import (
    BlockTrace,
    FrameScoreVector,
    Producer,
    RunSummary,
)
from .costmodel import LatencyParams
from .router import AggregationMode, Policy, ThresholdPolicy, aggregate

__all__ = [
    "TraceFormatError",
    "ExternalTraceRecord",
    "parse_trace",
    "parse_trace_text",
    "parse_trace_file",
    "serialize_record",
    "serialize_records",
    "write_trace_file",
    "records_from_traces",
    "ReplayedRun",
    "replay",
]

_REQUIRED_KEYS = {"prompt_id", "block_index", "frame_scores"}
_OPTIONAL_KEYS = {
    "draft_time_s",
    "target_time_s",
    "decode_time_s",
    "score_time_s",
    "producer_observed",
}

RECORDED = "recorded"
MODELED = "modeled"
MIXED = "mixed"


class TraceFormatError(ValueError):
    """Malformed or invalid trace content; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number


@dataclass(frozen=True)
class ExternalTraceRecord:
    """Per-block observation exported by a real (or simulated) pipeline."""

    prompt_id: str
    block_index: int
    frame_scores: tuple[float, ...]
    draft_time_s: float | None = None
    target_time_s: float | None = None
    decode_time_s: float | None = None
    score_time_s: float | None = None
    producer_observed: Producer | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_scores", tuple(float(s) for s in self.frame_scores))
        if not self.frame_scores:
            raise ValueError("frame_scores must be non-empty")
        if any(not math.isfinite(s) for s in self.frame_scores):
            raise ValueError("frame_scores must be finite")
        if self.block_index < 0:
            raise ValueError(f"block_index must be >= 0, got {self.block_index}")
        for name in ("draft_time_s", "target_time_s", "decode_time_s", "score_time_s"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val < 0):
                raise ValueError(f"{name} must be a non-negative finite number")


def _record_from_obj(obj: object, line_number: int) -> ExternalTraceRecord:
    if not isinstance(obj, dict):
        raise TraceFormatError("record must be a JSON object", line_number)
    unknown = set(obj) - _REQUIRED_KEYS - _OPTIONAL_KEYS
    if unknown:
        raise TraceFormatError(f"unknown fields {sorted(unknown)}", line_number)
    missing = _REQUIRED_KEYS - set(obj)
    if missing:
        raise TraceFormatError(f"missing required fields {sorted(missing)}", line_number)
    if not isinstance(obj["prompt_id"], str) or not obj["prompt_id"]:
        raise TraceFormatError("prompt_id must be a non-empty string", line_number)
    if not isinstance(obj["block_index"], int) or isinstance(obj["block_index"], bool):
        raise TraceFormatError("block_index must be an integer", line_number)
    scores = obj["frame_scores"]
    if not isinstance(scores, list) or not scores:
        raise TraceFormatError("frame_scores must be a non-empty array", line_number)
    if not all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores):
        raise TraceFormatError("frame_scores must contain only numbers", line_number)

    producer = None
    if obj.get("producer_observed") is not None:
        try:
            producer = Producer(obj["producer_observed"])
        except ValueError:
            raise TraceFormatError(
                f"producer_observed must be 'draft' or 'target', got {obj['producer_observed']!r}",
                line_number,
            ) from None

    def opt_time(key: str) -> float | None:
        val = obj.get(key)
        if val is None:
            return None
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise TraceFormatError(f"{key} must be a number", line_number)
        return float(val)

    try:
        return ExternalTraceRecord(
            prompt_id=obj["prompt_id"],
            block_index=obj["block_index"],
            frame_scores=tuple(float(s) for s in scores),
            draft_time_s=opt_time("draft_time_s"),
            target_time_s=opt_time("target_time_s"),
            decode_time_s=opt_time("decode_time_s"),
            score_time_s=opt_time("score_time_s"),
            producer_observed=producer,
        )
    except ValueError as exc:
        raise TraceFormatError(str(exc), line_number) from exc


def parse_trace(lines: Iterable[str]) -> list[ExternalTraceRecord]:
    """Parse a stream of trace lines; errors carry the offending line number."""
    records = []
    for line_number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"invalid JSON ({exc.msg})", line_number) from exc
        records.append(_record_from_obj(obj, line_number))
    return records


def parse_trace_text(text: str) -> list[ExternalTraceRecord]:
    return parse_trace(text.splitlines())


def parse_trace_file(path: str | Path) -> list[ExternalTraceRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh)


def serialize_record(record: ExternalTraceRecord) -> str:
    """Canonical single-line form: sorted keys, no spaces, Nones omitted."""
    obj: dict = {
        "prompt_id": record.prompt_id,
        "block_index": record.block_index,
        "frame_scores": list(record.frame_scores),
    }
    for key in ("draft_time_s", "target_time_s", "decode_time_s", "score_time_s"):
        val = getattr(record, key)
        if val is not None:
            obj[key] = val
    if record.producer_observed is not None:
        obj["producer_observed"] = record.producer_observed.value
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def serialize_records(records: Sequence[ExternalTraceRecord]) -> str:
    return "".join(serialize_record(r) + "\n" for r in records)


def write_trace_file(path: str | Path, records: Sequence[ExternalTraceRecord]) -> None:
    Path(path).write_text(serialize_records(records), encoding="utf-8")


def records_from_traces(
    prompt_id: str, traces: Sequence[BlockTrace]
) -> list[ExternalTraceRecord]:
    """Export an engine run's block traces in the external record format.

    Every block must carry frame scores (run with score_forced_rejections
    enabled if the policy force-rejects block 0), because the record format
    requires them for counterfactual re-routing.
    """
    records = []
    for t in traces:
        if t.frame_scores is None:
            raise ValueError(
                f"block {t.block_index} has no frame scores; export needs runs "
                "configured with score_forced_rejections=True"
            )
        producer = Producer.DRAFT if t.decision.accepted else Producer.TARGET
        records.append(
            ExternalTraceRecord(
                prompt_id=prompt_id,
                block_index=t.block_index,
                frame_scores=t.frame_scores.scores,
                draft_time_s=t.draft_time_s,
                target_time_s=t.target_time_s if t.target_time_s > 0 else None,
                decode_time_s=t.decode_time_s,
                score_time_s=t.score_time_s,
                producer_observed=producer,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Counterfactual replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayedRun:
    """Replay outcome for one prompt, with per-block timing provenance."""

    summary: RunSummary
    timing_provenance: tuple[str, ...]


def _group_by_prompt(
    records: Sequence[ExternalTraceRecord],
) -> dict[str, list[ExternalTraceRecord]]:
    groups: dict[str, list[ExternalTraceRecord]] = {}
    for r in records:
        groups.setdefault(r.prompt_id, []).append(r)
    return groups


def _check_contiguous(prompt_id: str, blocks: Sequence[ExternalTraceRecord]) -> None:
    seen = sorted(r.block_index for r in blocks)
    expected = list(range(seen[-1] + 1)) if seen else []
    if seen != expected:
        gaps = sorted(set(expected) - set(seen))
        dupes = sorted({b for b in seen if seen.count(b) > 1})
        detail = []
        if gaps:
            detail.append(f"missing blocks {gaps}")
        if dupes:
            detail.append(f"duplicate blocks {dupes}")
        raise TraceFormatError(f"prompt {prompt_id!r}: " + ", ".join(detail))


def replay(
    records: Sequence[ExternalTraceRecord],
    tau: float,
    aggregation: AggregationMode = AggregationMode.MIN_FRAME,
    force_reject_block0: bool = True,
    policy: Policy | None = None,
    latency: LatencyParams | None = None,
    quality_fn: Callable[[Sequence[BlockTrace]], float] | None = None,
) -> list[ReplayedRun]:
    """Re-route recorded blocks at a counterfactual threshold.

    Decisions come from the recorded frame scores; timings come from the
    recorded values where present and from `latency` otherwise (an error
    if a needed timing is missing and no params were given). Passing
    `policy` overrides the default threshold policy built from `tau`.

    Pure over its inputs: two replays of the same records agree exactly.
    """
    if policy is None:
        policy = ThresholdPolicy(tau=tau, force_reject_block0=force_reject_block0)
    runs = []
    for prompt_id, group in _group_by_prompt(records).items():
        _check_contiguous(prompt_id, group)
        group = sorted(group, key=lambda r: r.block_index)
        traces: list[BlockTrace] = []
        provenance: list[str] = []
        for record in group:
            scores = FrameScoreVector(record.block_index, record.frame_scores)
            q = aggregate(scores, aggregation)
            decision = policy.decide(record.block_index, q)
            used_modeled = False
            used_recorded = False

            def pick(recorded: float | None, modeled_name: str) -> float:
                nonlocal used_modeled, used_recorded
                if recorded is not None:
                    used_recorded = True
                    return recorded
                if latency is None:
                    raise TraceFormatError(
                        f"prompt {prompt_id!r} block {record.block_index}: "
                        f"no recorded {modeled_name} and no latency params for fallback"
                    )
                used_modeled = True
                return getattr(latency, modeled_name)

            draft_time = pick(record.draft_time_s, "c_draft")
            decode_time = pick(record.decode_time_s, "c_decode")
            score_time = pick(record.score_time_s, "c_score")
            if decision.accepted:
                target_time = 0.0
            else:
                usable = record.target_time_s if record.target_time_s else None
                target_time = pick(usable, "c_target")

            traces.append(
                BlockTrace(
                    block_index=record.block_index,
                    decision=decision,
                    aggregate_score=q,
                    frame_scores=scores,
                    draft_time_s=draft_time,
                    score_time_s=score_time,
                    target_time_s=target_time,
                    decode_time_s=decode_time,
                )
            )
            if used_modeled and used_recorded:
                provenance.append(MIXED)
            elif used_modeled:
                provenance.append(MODELED)
            else:
                provenance.append(RECORDED)

        num_blocks = len(traces)
        accepted = sum(1 for t in traces[1:] if t.decision.accepted)
        rate = accepted / (num_blocks - 1) if num_blocks > 1 else 0.0
        # Scoring is assumed overlapped (factor 0) when no params are given,
        # matching the engine's default accounting.
        factor = latency.overlap_factor if latency is not None else 0.0
        total = sum(
            t.draft_time_s + t.decode_time_s + t.score_time_s * factor + t.target_time_s
            for t in traces
        )
        summary = RunSummary(
            prompt_id=prompt_id,
            accept_rate_excl_block0=rate,
            total_time_s=total,
            quality_proxy=quality_fn(traces) if quality_fn is not None else float("nan"),
            block_traces=tuple(traces),
        )
        runs.append(ReplayedRun(summary=summary, timing_provenance=tuple(provenance)))
    return runs

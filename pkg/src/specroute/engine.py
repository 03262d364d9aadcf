"""The per-block inference loop: draft, decode, score, route, commit or regenerate.

One run walks the blocks of a single video in order. For each block the
drafter proposes a candidate from the block's noise seed and the drafter
KV cache is committed unconditionally, so the drafter always conditions
on its own prior outputs regardless of routing. The candidate is decoded
(after snapshotting the decoder cache) and scored; the policy then either
accepts the draft into the target KV cache and emits its frames, or
restores the decoder cache and has the target regenerate the block from
the same noise seed.

Runs are strictly sequential within a video (block b+1 depends on block
b's decision). Runs over different prompts share no mutable state and may
execute in parallel.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .caches import CacheOwner, KVCache, RestorableState, decode_restore, decode_snapshot
from .core import (
    BlockTrace,
    DecodedFrames,
    FrameScoreVector,
    GenerationConfig,
    LatentBlock,
    Producer,
    PromptSpec,
    RunSummary,
    Verdict,
    noise_seed_for_block,
    pixel_frame_count,
    summary_to_dict,
)
from .costmodel import LatencyParams, simulate_time
from .router import AggregationMode, Policy, aggregate

__all__ = [
    "GeneratorInterface",
    "DecoderInterface",
    "ScorerInterface",
    "BlockExecutionError",
    "RunResult",
    "run_video",
    "run_video_detailed",
    "append_run_record",
]

QualityFn = Callable[[Sequence[BlockTrace]], float]


class GeneratorInterface(ABC):
    """A block generator (drafter or target).

    Implementations must be deterministic: identical (noise_seed, kv
    contents, block_index, prompt) produce identical output.
    """

    @property
    @abstractmethod
    def cost_class(self) -> Producer: ...

    @abstractmethod
    def generate(
        self, noise_seed: int, kv: KVCache, block_index: int, prompt: PromptSpec
    ) -> LatentBlock: ...


class DecoderInterface(ABC):
    """Causal frame decoder with explicit, snapshottable temporal state."""

    @abstractmethod
    def fresh_state(self) -> RestorableState: ...

    @abstractmethod
    def decode(self, latent: LatentBlock, state: RestorableState) -> DecodedFrames: ...


class ScorerInterface(ABC):
    """Per-frame reward model; deterministic per (frame, prompt)."""

    @abstractmethod
    def score(self, frame, prompt: PromptSpec) -> float: ...


class BlockExecutionError(RuntimeError):
    """A generator, decoder, or scorer failed; carries the failing block."""

    def __init__(self, block_index: int, stage: str, cause: Exception):
        super().__init__(f"block {block_index}: {stage} failed: {cause}")
        self.block_index = block_index
        self.stage = stage


@dataclass(frozen=True)
class RunResult:
    """Full artifacts of one run; summary is the JSON-facing subset."""

    summary: RunSummary
    emitted_frames: tuple[DecodedFrames, ...]
    drafter_kv: KVCache
    target_kv: KVCache


def _guard(block_index: int, stage: str, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:
        raise BlockExecutionError(block_index, stage, exc) from exc


def run_video_detailed(
    config: GenerationConfig,
    prompt: PromptSpec,
    drafter: GeneratorInterface | None,
    target: GeneratorInterface,
    decoder: DecoderInterface,
    scorer: ScorerInterface | None,
    policy: Policy,
    aggregation: AggregationMode = AggregationMode.MIN_FRAME,
    latency: LatencyParams | None = None,
    quality_fn: QualityFn | None = None,
    draft_enabled: bool = True,
) -> RunResult:
    """Run one video and keep every artifact (frames, caches, traces).

    With draft_enabled=False the drafter never runs and every block is
    generated by the target directly; this is the pure target-only
    deployment used as the speedup baseline, and its per-block cost is
    c_target alone (emission decode is folded into c_target by the fit).
    """
    if latency is None:
        raise ValueError("run_video requires latency params to attribute block timings")
    if draft_enabled and drafter is None:
        raise ValueError("draft_enabled runs need a drafter")
    if draft_enabled and scorer is None:
        raise ValueError("draft_enabled runs need a scorer")

    drafter_kv = KVCache(CacheOwner.DRAFTER)
    target_kv = KVCache(CacheOwner.TARGET)
    state = decoder.fresh_state()
    traces: list[BlockTrace] = []
    emitted: list[DecodedFrames] = []

    for b in range(config.num_blocks):
        nseed = noise_seed_for_block(config.seed, prompt.prompt_id, b)
        if draft_enabled:
            trace, frames = _run_block_drafted(
                config, prompt, drafter, target, decoder, scorer, policy,
                aggregation, latency, b, nseed, drafter_kv, target_kv, state,
            )
        else:
            trace, frames = _run_block_target_only(
                config, prompt, target, decoder, policy, latency, b, nseed,
                target_kv, state,
            )
        expected = pixel_frame_count(config, b)
        if len(frames.frames) != expected:
            raise BlockExecutionError(
                b, "decode", ValueError(f"expected {expected} frames, got {len(frames.frames)}")
            )
        traces.append(trace)
        emitted.append(frames)

    accepted = sum(1 for t in traces[1:] if t.decision.accepted)
    rate = accepted / (config.num_blocks - 1) if config.num_blocks > 1 else 0.0
    summary = RunSummary(
        prompt_id=prompt.prompt_id,
        accept_rate_excl_block0=rate,
        total_time_s=simulate_time(traces, latency),
        quality_proxy=quality_fn(traces) if quality_fn is not None else float("nan"),
        block_traces=tuple(traces),
    )
    return RunResult(summary, tuple(emitted), drafter_kv, target_kv)


def _run_block_drafted(
    config, prompt, drafter, target, decoder, scorer, policy, aggregation,
    latency, b, nseed, drafter_kv, target_kv, state,
) -> tuple[BlockTrace, DecodedFrames]:
    draft = _guard(b, "drafter", drafter.generate, nseed, drafter_kv, b, prompt)
    # Unconditional: the drafter conditions on its own outputs, never on routing.
    drafter_kv.commit(draft)

    snapshot = decode_snapshot(state, b)
    draft_frames = _guard(b, "decode", decoder.decode, draft, state)

    forced = policy.forces_rejection(b)
    scores: FrameScoreVector | None = None
    q: float | None = None
    score_time = 0.0
    if not forced or config.score_forced_rejections:
        raw = [
            _guard(b, "scorer", scorer.score, frame, prompt)
            for frame in draft_frames.frames
        ]
        scores = FrameScoreVector(b, tuple(raw))
        q = aggregate(scores, aggregation)
        score_time = latency.c_score

    decision = policy.decide(b, q)
    if decision.verdict is Verdict.ACCEPT:
        target_kv.commit(draft)
        emitted = draft_frames
        target_time = 0.0
    else:
        decode_restore(state, snapshot)
        regen = _guard(b, "target", target.generate, nseed, target_kv, b, prompt)
        target_kv.commit(regen)
        emitted = _guard(b, "decode", decoder.decode, regen, state)
        target_time = latency.c_target

    trace = BlockTrace(
        block_index=b,
        decision=decision,
        aggregate_score=q,
        frame_scores=scores,
        draft_time_s=latency.c_draft,
        score_time_s=score_time,
        target_time_s=target_time,
        decode_time_s=latency.c_decode,
    )
    return trace, emitted


def _run_block_target_only(
    config, prompt, target, decoder, policy, latency, b, nseed, target_kv, state,
) -> tuple[BlockTrace, DecodedFrames]:
    decision = policy.decide(b, None)
    if decision.verdict is not Verdict.REJECT:
        raise ValueError("draft_enabled=False requires a policy that rejects every block")
    block = _guard(b, "target", target.generate, nseed, target_kv, b, prompt)
    target_kv.commit(block)
    frames = _guard(b, "decode", decoder.decode, block, state)
    trace = BlockTrace(
        block_index=b,
        decision=decision,
        target_time_s=latency.c_target,
    )
    return trace, frames


def run_video(
    config: GenerationConfig,
    prompt: PromptSpec,
    drafter: GeneratorInterface | None,
    target: GeneratorInterface,
    decoder: DecoderInterface,
    scorer: ScorerInterface | None,
    policy: Policy,
    aggregation: AggregationMode = AggregationMode.MIN_FRAME,
    latency: LatencyParams | None = None,
    quality_fn: QualityFn | None = None,
    draft_enabled: bool = True,
) -> RunSummary:
    return run_video_detailed(
        config, prompt, drafter, target, decoder, scorer, policy,
        aggregation, latency, quality_fn, draft_enabled,
    ).summary


def append_run_record(path: str | Path, summary: RunSummary) -> None:
    """Append one run's JSON record to a JSONL results file."""
    line = json.dumps(summary_to_dict(summary), sort_keys=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line + "\n")

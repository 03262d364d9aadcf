from __future__ import annotations

import math

import numpy as np
import pytest

from specroute.core import (
    GenerationConfig,
    Producer,
    PromptSpec,
    Verdict,
    noise_seed_for_block,
    pixel_frame_count,
    summary_to_dict,
)
from specroute.engine import (
    BlockExecutionError,
    append_run_record,
    run_video,
    run_video_detailed,
)
from specroute.router import (
    AggregationMode,
    AlwaysAcceptPolicy,
    AlwaysRejectPolicy,
    RandomPolicy,
    ThresholdPolicy,
)
from specroute.synthmodels import SyntheticScorer, build_synthetic_stack


def run(stack, calibration, config, policy, prompt_id="p0", **kwargs):
    return run_video_detailed(
        config,
        PromptSpec(prompt_id),
        stack.drafter,
        stack.target,
        stack.decoder,
        stack.scorer,
        policy,
        latency=calibration.latency,
        **kwargs,
    )


class TestBaselinePolicies:
    def test_always_reject_yields_target_only_content(self, stack, calibration, config):
        res = run(stack, calibration, config, AlwaysRejectPolicy())
        assert res.target_kv.producers() == (Producer.TARGET,) * 9
        assert res.summary.accept_rate_excl_block0 == 0.0

    def test_always_accept_without_force_is_draft_only(self, stack, calibration, config):
        res = run(stack, calibration, config, AlwaysAcceptPolicy())
        assert res.target_kv.producers() == (Producer.DRAFT,) * 9
        assert res.summary.accept_rate_excl_block0 == 1.0

    def test_default_policy_forces_target_block0(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy())
        assert res.target_kv.producers()[0] is Producer.TARGET
        assert res.summary.block_traces[0].decision.reason.value == "forced_first_block"


class TestRunShape:
    def test_both_caches_filled_regardless_of_routing(self, stack, calibration, config):
        for policy in (ThresholdPolicy(), AlwaysRejectPolicy(), AlwaysAcceptPolicy()):
            res = run(stack, calibration, config, policy)
            assert len(res.drafter_kv) == 9
            assert len(res.target_kv) == 9
            assert res.drafter_kv.producers() == (Producer.DRAFT,) * 9

    @pytest.mark.parametrize("num_blocks", [1, 2, 9])
    def test_emitted_frame_counts(self, stack, calibration, num_blocks):
        config = GenerationConfig(num_blocks=num_blocks)
        stack = build_synthetic_stack(calibration, config)
        res = run(stack, calibration, config, ThresholdPolicy())
        emitted = sum(len(f.frames) for f in res.emitted_frames)
        assert emitted == 9 + (num_blocks - 1) * 12

    def test_target_kv_matches_decision_sequence(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy())
        for trace, producer in zip(res.summary.block_traces, res.target_kv.producers()):
            expected = Producer.DRAFT if trace.decision.accepted else Producer.TARGET
            assert producer is expected

    def test_target_time_iff_rejected(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy(), prompt_id="p3")
        for trace in res.summary.block_traces:
            assert (trace.target_time_s > 0) == (trace.decision.verdict is Verdict.REJECT)

    def test_accept_rate_counts_blocks_after_the_first(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy())
        accepted = sum(1 for t in res.summary.block_traces[1:] if t.decision.accepted)
        assert res.summary.accept_rate_excl_block0 == accepted / 8

    def test_single_block_accept_rate_is_zero(self, stack, calibration):
        config = GenerationConfig(num_blocks=1)
        stack = build_synthetic_stack(calibration, config)
        res = run(stack, calibration, config, ThresholdPolicy())
        assert res.summary.accept_rate_excl_block0 == 0.0

    def test_total_time_matches_cost_model_aggregation(self, stack, calibration, config):
        from specroute.costmodel import simulate_time

        res = run(stack, calibration, config, ThresholdPolicy())
        assert res.summary.total_time_s == simulate_time(
            res.summary.block_traces, calibration.latency
        )


class TestScoringRules:
    def test_forced_block0_unscored_by_default(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy())
        first = res.summary.block_traces[0]
        assert first.aggregate_score is None
        assert first.frame_scores is None
        assert first.score_time_s == 0.0

    def test_forced_block0_scored_when_configured(self, calibration, config):
        config = config.with_overrides(score_forced_rejections=True)
        stack = build_synthetic_stack(calibration, config)
        res = run(stack, calibration, config, ThresholdPolicy())
        first = res.summary.block_traces[0]
        assert first.aggregate_score is not None
        assert first.decision.reason.value == "forced_first_block"

    def test_unforced_blocks_always_scored(self, stack, calibration, config):
        res = run(stack, calibration, config, AlwaysRejectPolicy())
        for trace in res.summary.block_traces:
            assert trace.frame_scores is not None
            assert trace.aggregate_score == min(trace.frame_scores.scores)

    def test_mean_aggregation_accepts_no_less_than_min(self, stack, calibration, config):
        res_min = run(stack, calibration, config, ThresholdPolicy(tau=-0.7))
        res_mean = run(
            stack, calibration, config, ThresholdPolicy(tau=-0.7),
            aggregation=AggregationMode.MEAN_FRAME,
        )
        assert res_mean.summary.accept_rate_excl_block0 >= res_min.summary.accept_rate_excl_block0


class TestDrafterInvariance:
    def test_drafter_digests_identical_across_policies(self, stack, calibration, config):
        policies = [
            ThresholdPolicy(tau=-0.7),
            ThresholdPolicy(tau=-2.5),
            AlwaysAcceptPolicy(),
            AlwaysRejectPolicy(),
            RandomPolicy(accept_prob=0.5, rng_seed=1),
        ]
        digests = {
            run(stack, calibration, config, policy, prompt_id="inv").drafter_kv.digests()
            for policy in policies
        }
        assert len(digests) == 1

    def test_rejected_blocks_regenerate_from_the_same_noise(self, stack, calibration, config):
        res = run(stack, calibration, config, ThresholdPolicy(), prompt_id="noise")
        for trace in res.summary.block_traces:
            draft_entry = res.drafter_kv.entries[trace.block_index]
            target_entry = res.target_kv.entries[trace.block_index]
            expected = noise_seed_for_block(config.seed, "noise", trace.block_index)
            assert draft_entry.block.noise_seed == expected
            assert target_entry.block.noise_seed == expected


class TestDecodeConsistency:
    @pytest.mark.parametrize("label,policy", [
        ("threshold", ThresholdPolicy()),
        ("random", RandomPolicy(accept_prob=0.5, rng_seed=3)),
        ("reject", AlwaysRejectPolicy()),
    ])
    def test_committed_path_replay_reproduces_emitted_frames(
        self, stack, calibration, config, label, policy
    ):
        res = run(stack, calibration, config, policy, prompt_id=f"replay-{label}")
        state = stack.decoder.fresh_state()
        for entry, emitted in zip(res.target_kv.entries, res.emitted_frames):
            again = stack.decoder.decode(entry.block, state)
            assert len(again.frames) == len(emitted.frames)
            for a, b in zip(again.frames, emitted.frames):
                assert np.array_equal(a, b)


class TestDeterminism:
    def test_identical_inputs_give_identical_summaries(self, stack, calibration, config):
        a = run(
            stack, calibration, config, ThresholdPolicy(), prompt_id="det",
            quality_fn=calibration.proxy.run_quality,
        ).summary
        b = run(
            stack, calibration, config, ThresholdPolicy(), prompt_id="det",
            quality_fn=calibration.proxy.run_quality,
        ).summary
        assert a == b
        assert summary_to_dict(a) == summary_to_dict(b)

    def test_random_policy_runs_reproduce_under_same_seed(self, stack, calibration, config):
        a = run(
            stack, calibration, config, RandomPolicy(accept_prob=0.6, rng_seed=5),
            quality_fn=calibration.proxy.run_quality,
        ).summary
        b = run(
            stack, calibration, config, RandomPolicy(accept_prob=0.6, rng_seed=5),
            quality_fn=calibration.proxy.run_quality,
        ).summary
        assert a == b

    def test_prompt_changes_results(self, stack, calibration, config):
        a = run(stack, calibration, config, ThresholdPolicy(), prompt_id="p1").summary
        b = run(stack, calibration, config, ThresholdPolicy(), prompt_id="p2").summary
        assert a.block_traces != b.block_traces


class TestTargetOnlyMode:
    def test_skips_drafter_entirely(self, stack, calibration, config):
        res = run(
            stack, calibration, config, AlwaysRejectPolicy(),
            draft_enabled=False,
        )
        assert len(res.drafter_kv) == 0
        assert res.target_kv.producers() == (Producer.TARGET,) * 9
        for trace in res.summary.block_traces:
            assert trace.draft_time_s == 0.0
            assert trace.decode_time_s == 0.0
            assert trace.score_time_s == 0.0
            assert trace.target_time_s == calibration.latency.c_target
        assert res.summary.total_time_s == pytest.approx(9 * calibration.latency.c_target)

    def test_requires_rejecting_policy(self, stack, calibration, config):
        with pytest.raises(ValueError):
            run(stack, calibration, config, AlwaysAcceptPolicy(), draft_enabled=False)

    def test_emits_all_frames(self, stack, calibration, config):
        res = run(stack, calibration, config, AlwaysRejectPolicy(), draft_enabled=False)
        assert sum(len(f.frames) for f in res.emitted_frames) == 105


class TestErrorHandling:
    def test_scorer_failure_carries_block_index(self, stack, calibration, config):
        class FailingScorer(SyntheticScorer):
            def score(self, frame, prompt):
                raise RuntimeError("reward model offline")

        with pytest.raises(BlockExecutionError) as err:
            run_video(
                config,
                PromptSpec("p0"),
                stack.drafter,
                stack.target,
                stack.decoder,
                FailingScorer(),
                ThresholdPolicy(),
                latency=calibration.latency,
            )
        assert err.value.block_index == 0 or err.value.block_index == 1
        assert err.value.stage == "scorer"

    def test_missing_latency_rejected(self, stack, config):
        with pytest.raises(ValueError):
            run_video(
                config,
                PromptSpec("p0"),
                stack.drafter,
                stack.target,
                stack.decoder,
                stack.scorer,
                ThresholdPolicy(),
                latency=None,
            )

    def test_quality_defaults_to_nan(self, stack, calibration, config):
        summary = run(stack, calibration, config, ThresholdPolicy()).summary
        assert math.isnan(summary.quality_proxy)


def test_append_run_record(tmp_path, stack, calibration, config):
    import json

    path = tmp_path / "runs.jsonl"
    for pid in ("a", "b"):
        summary = run(stack, calibration, config, ThresholdPolicy(), prompt_id=pid).summary
        append_run_record(path, summary)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    docs = [json.loads(line) for line in lines]
    assert [d["prompt_id"] for d in docs] == ["a", "b"]
    assert all(len(d["block_traces"]) == 9 for d in docs)

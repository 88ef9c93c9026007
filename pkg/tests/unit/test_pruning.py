"""
两阶段剪枝测试
"""

import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from core.models import (
    ActiveSet, CalibrationWarning, ConfigurationError, ConsistencyError, KeepFirstAudio,
    KeepFirstFrames, Layout, Modality, PositionCutoff, PruneConfig, RolloutThreshold,
)
from core.pruning import (
    CalibrationSample, TwoStagePruner, ImportanceScores, aggregate_cutoffs, apply_fine,
    apply_global, calibrate_global, calibrate_sample, fine_scores, project_schedule,
    removal_count,
)
from core.synthetic import SequenceRecipe, gen_sequence
from core.toy_model import AttentionAudit, generate, init_model


class TestFineScores:

    def test_rejects_unnormalized_row(self):
        with pytest.raises(ConsistencyError):
            fine_scores([0.6, 0.5])

    def test_accepts_uniform_row(self):
        scores = fine_scores([0.25, 0.25, 0.25, 0.25])
        assert scores.positions == (0, 1, 2, 3)

    def test_rejects_negative(self):
        with pytest.raises(ConsistencyError):
            fine_scores([1.5, -0.5])

    def test_length_must_match_active(self):
        with pytest.raises(ConsistencyError):
            fine_scores([0.5, 0.5], ActiveSet((0, 3, 5)))

    def test_binds_active_positions(self):
        scores = fine_scores([0.2, 0.3, 0.5], ActiveSet((0, 3, 5)))
        assert scores.for_positions([5, 0]) == [0.5, 0.2]


class TestApplyFine:

    def test_removes_lowest_score(self):
        active = ActiveSet.full(5)
        scores = fine_scores([0.1, 0.4, 0.05, 0.25, 0.2], active)
        result = apply_fine(scores, active, PruneConfig(fine_ratio=0.2))
        assert result.indices == (0, 1, 3, 4)

    def test_equal_scores_remove_latest(self):
        active = ActiveSet.full(5, protected={4})
        scores = fine_scores([0.2] * 5, active)
        result = apply_fine(scores, active, PruneConfig(fine_ratio=0.5))
        assert result.indices == (0, 1, 4)

    def test_zero_ratio_is_noop(self):
        active = ActiveSet.full(6, protected={5})
        scores = fine_scores(np.full(6, 1 / 6), active)
        assert apply_fine(scores, active, PruneConfig(fine_ratio=0.0)) is active

    def test_protected_never_removed(self):
        active = ActiveSet.full(6, protected={0, 1, 5})
        scores = fine_scores([0.0, 0.0, 0.3, 0.3, 0.4, 0.0], active)
        result = apply_fine(scores, active, PruneConfig(fine_ratio=0.5))
        assert result.indices == (0, 1, 2, 4, 5)

    def test_min_active_caps_removal(self):
        active = ActiveSet.full(10, protected={9})
        scores = fine_scores(np.full(10, 0.1), active)
        result = apply_fine(scores, active, PruneConfig(fine_ratio=0.9), min_active=8)
        assert len(result) == 8

    def test_floor_defaults_to_text_plus_one(self):
        sequence = gen_sequence(SequenceRecipe(visual=6, audio=0, text=4), seed=0)
        active = ActiveSet.full(10)
        scores = fine_scores(np.full(10, 0.1), active)
        cfg = PruneConfig(fine_ratio=0.9)
        assert len(apply_fine(scores, active, cfg, sequence=sequence)) == 5
        assert len(apply_fine(scores, active, PruneConfig(fine_ratio=0.9, min_active=3),
                              sequence=sequence)) == 3

    def test_floor_without_sequence_counts_protected(self):
        active = ActiveSet.full(10, protected={7, 8, 9})
        scores = fine_scores(np.full(10, 0.1), active)
        result = apply_fine(scores, active, PruneConfig(fine_ratio=0.9))
        assert len(result) == 4
        assert set(result.indices) >= {7, 8, 9}

    def test_positions_must_match(self):
        with pytest.raises(ConsistencyError):
            apply_fine(fine_scores([0.5, 0.5]), ActiveSet((0, 2)), PruneConfig())

    def test_matches_sort_and_drop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            size = int(rng.integers(1, 65))
            indices = sorted(rng.choice(200, size=size, replace=False).tolist())
            protected = {p for p in indices if rng.random() < 0.3} | {indices[-1]}
            active = ActiveSet(tuple(indices), frozenset(protected))
            values = np.round(rng.random(size), 2)
            ratio = [0.1, 0.2, 0.25, 0.5, 0.75][int(rng.integers(0, 5))]
            floor_size = int(rng.integers(1, size + 1))

            result = apply_fine(ImportanceScores(tuple(indices), values), active,
                                PruneConfig(fine_ratio=ratio), min_active=floor_size)

            prunable = [p for p in indices if p not in protected]
            score = dict(zip(indices, values.tolist()))
            count = max(0, min(math.floor(Fraction(str(ratio)) * len(prunable)), size - floor_size))
            dropped = sorted(prunable, key=lambda p: (score[p], -p))[:count]
            assert result.indices == tuple(p for p in indices if p not in set(dropped))


def test_removal_count():
    assert removal_count(10, 11, 0.3, 1) == 3
    assert removal_count(10, 11, 0.5, 9) == 2
    assert removal_count(4, 5, 0.2, 1) == 0
    assert removal_count(0, 3, 0.5, 1) == 0


class TestApplyGlobal:

    def test_keep_first_audio_retains_ten(self):
        sequence = gen_sequence(SequenceRecipe(visual=1536, audio=1496, text=32), seed=0)
        active = apply_global(sequence, 1001, PruneConfig())
        audio = set(sequence.positions_of(Modality.AUDIO))
        kept_audio = [p for p in active.indices if p in audio]
        assert kept_audio == list(range(1536, 1546))
        assert len(active) == 1043
        assert len(active.protected) == 42

    def test_cutoff_spares_text(self):
        sequence = gen_sequence(SequenceRecipe(visual=8, audio=4, text=3), seed=1)
        active = apply_global(sequence, 4, PruneConfig(retention=None))
        assert active.indices == (0, 1, 2, 3, 12, 13, 14)

    def test_keep_first_frames(self):
        recipe = SequenceRecipe(visual=24, audio=12, text=4, layout=Layout.FRAME_INTERLEAVED, frames=12)
        sequence = gen_sequence(recipe, seed=2)
        cfg = PruneConfig(retention=KeepFirstFrames(4))
        active = apply_global(sequence, len(sequence), cfg)
        assert active.indices == tuple(range(12)) + (36, 37, 38, 39)

    def test_keep_first_frames_needs_interleaved(self):
        sequence = gen_sequence(SequenceRecipe(visual=4, audio=4, text=2), seed=0)
        with pytest.raises(ConfigurationError):
            apply_global(sequence, 4, PruneConfig(retention=KeepFirstFrames(1)))

    def test_cutoff_beyond_sequence(self):
        sequence = gen_sequence(SequenceRecipe(visual=4, audio=4, text=2), seed=0)
        with pytest.raises(ConfigurationError):
            apply_global(sequence, 11, PruneConfig())

    def test_cutoff_at_end_keeps_everything(self):
        sequence = gen_sequence(SequenceRecipe(visual=4, audio=4, text=2), seed=0)
        active = apply_global(sequence, PositionCutoff(10), PruneConfig(retention=None))
        assert active.indices == tuple(range(10))

    def test_min_active_restores_tokens(self):
        sequence = gen_sequence(SequenceRecipe(visual=6, audio=0, text=1), seed=0)
        active = apply_global(sequence, 0, PruneConfig(retention=None), min_active=3)
        assert active.indices == (0, 1, 6)


def _concentrated(n: int, focus: int) -> np.ndarray:
    rows = np.zeros((n, n))
    for i in range(n):
        width = min(i + 1, focus)
        rows[i, :width] = 1.0 / width
    return rows


class TestCalibration:

    def test_concentrated_influence_gives_cutoff(self, rows_attention):
        attn = rows_attention(_concentrated(10, 5))
        cfg = PruneConfig(global_rule=RolloutThreshold(0.005))
        result = calibrate_global([CalibrationSample(attn, 8), CalibrationSample(attn, 8)], cfg)
        assert result.cutoff.position == 5
        assert result.per_sample == [5, 5]

    def test_uniform_influence_keeps_everything(self, rows_attention):
        n = 10
        rows = np.tril(np.ones((n, n)))
        rows /= rows.sum(axis=1, keepdims=True)
        sample = calibrate_sample(rows_attention(rows), tau=0.5 / n, alpha=1.0, middle_layer=1)
        assert sample.cutoff == n

    def test_nothing_kept_gives_zero(self, rows_attention):
        attn = rows_attention(_concentrated(6, 1))
        sample = calibrate_sample(CalibrationSample(attn, 4), tau=0.6, alpha=0.5, middle_layer=1)
        assert sample.cutoff == 0

    def test_median_rounds_up(self):
        assert aggregate_cutoffs([3, 4]) == 4
        assert aggregate_cutoffs([2, 9, 5]) == 5

    def test_tau_above_scores_warns(self, rows_attention):
        attn = rows_attention(_concentrated(10, 5))
        cfg = PruneConfig(global_rule=RolloutThreshold(5.0))
        with pytest.warns(CalibrationWarning):
            result = calibrate_global([CalibrationSample(attn, 8)], cfg)
        assert result.warnings

    def test_empty_traces(self):
        with pytest.raises(ConfigurationError):
            calibrate_global([], PruneConfig())

    def test_position_rule_needs_tau(self, rows_attention):
        attn = rows_attention(_concentrated(10, 5))
        with pytest.raises(ConfigurationError):
            calibrate_global([attn], PruneConfig(global_rule=PositionCutoff(3)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CalibrationWarning)
            result = calibrate_global([CalibrationSample(attn, 8)],
                                      PruneConfig(global_rule=PositionCutoff(3)), tau=0.005)
        assert result.cutoff.position == 5

    def test_middle_layer_beyond_trace(self, rows_attention):
        with pytest.raises(ConfigurationError):
            calibrate_sample(rows_attention(_concentrated(4, 2)), 0.01, 0.5, middle_layer=3)


class TestTwoStagePruner:

    def test_noop_config_matches_vanilla(self, small_config):
        weights = init_model(small_config)
        recipe = SequenceRecipe(visual=24, audio=16, text=8)
        cfg = PruneConfig(retention=None, fine_ratio=0.0)
        for seed in range(20):
            sequence = gen_sequence(recipe, seed, small_config.vocab_size)
            vanilla = generate(weights, sequence, 8)
            pruned = generate(weights, sequence, 8, TwoStagePruner(cfg, len(sequence)))
            assert pruned.tokens == vanilla.tokens
            assert np.array_equal(pruned.first_logits, vanilla.first_logits)

    def test_schedule_and_protection(self, small_config, small_recipe):
        weights = init_model(small_config)
        sequence = gen_sequence(small_recipe, 0, small_config.vocab_size)
        pruner = TwoStagePruner(PruneConfig(retention=KeepFirstAudio(4)), 10)
        result = generate(weights, sequence, 2, pruner)

        counts = result.layer_counts
        assert counts[0] == counts[1] == len(sequence)
        assert counts[2] == 10 + 4 + 4
        assert all(b <= a for a, b in zip(counts, counts[1:]))
        stages = [d["stage"] for d in pruner.decisions]
        assert stages == ["global", "fine", "fine"]
        assert pruner.decisions[-1]["applied"] is False
        for active in result.final_actives:
            assert set(sequence.positions_of(Modality.TEXT)) <= set(active.indices)

    def test_no_square_attention_blocks(self, small_config, small_recipe):
        weights = init_model(small_config)
        sequence = gen_sequence(small_recipe, 5, small_config.vocab_size)
        audit = AttentionAudit()
        generate(weights, sequence, 4, TwoStagePruner(PruneConfig(), 12), audit)
        assert audit.blocks
        assert audit.max_query_rows == 1
        audit.assert_no_full_maps()

    def test_ablation_removes_same_count(self, small_config, small_recipe):
        weights = init_model(small_config)
        sequence = gen_sequence(small_recipe, 1, small_config.vocab_size)
        cfg = PruneConfig()
        baseline = TwoStagePruner(cfg, 10)
        generate(weights, sequence, 1, baseline)
        for name in ("random", "top_attentive", "low_attentive"):
            pruner = TwoStagePruner(cfg, 10, global_strategy=name, seed=4)
            generate(weights, sequence, 1, pruner)
            assert pruner.decisions[0]["active_after"] == baseline.decisions[0]["active_after"]

    def test_informative_ablation_needs_influence(self):
        with pytest.raises(ConfigurationError):
            TwoStagePruner(PruneConfig(), 5, global_strategy="top_informative")

    def test_fine_stage_rejects_informative(self):
        with pytest.raises(ConfigurationError):
            TwoStagePruner(PruneConfig(), 5, fine_strategy="low_informative")

    def test_generation_pruning_keeps_cache_consistent(self, small_config, small_recipe):
        weights = init_model(small_config)
        sequence = gen_sequence(small_recipe, 2, small_config.vocab_size)
        cfg = PruneConfig(retention=None, prune_during_generation=True)
        pruner = TwoStagePruner(cfg, len(sequence))
        result = generate(weights, sequence, 4, pruner)
        if len(result.tokens) > 1:
            assert any(d["stage"] == "generation" for d in pruner.decisions)
        for upper, lower in zip(result.final_actives, result.final_actives[1:]):
            assert set(lower.indices) <= set(upper.indices)


class TestProjectSchedule:

    def test_videollama2_like(self):
        from core.flops import schedule_flops
        from core.models import ModelConfig

        sequence = gen_sequence(SequenceRecipe(visual=1536, audio=1496, text=32), seed=0)
        active = apply_global(sequence, 1001, PruneConfig())
        schedule = project_schedule(len(sequence), len(active), len(active.protected),
                                    PruneConfig(), 28)
        config = ModelConfig(layers=28, heads=28, model_dim=3584, ffn_dim=18944)
        relative = schedule_flops(schedule, config).relative
        assert 50 <= relative <= 62

    def test_salmonn_like(self):
        from core.flops import schedule_flops
        from core.models import ModelConfig

        cfg = PruneConfig(retention=None)
        schedule = project_schedule(3064, 1396, 32, cfg, 28)
        config = ModelConfig(layers=28, heads=28, model_dim=3584, ffn_dim=18944)
        relative = schedule_flops(schedule, config).relative
        assert 52 <= relative <= 64

    def test_invalid_parameters(self):
        with pytest.raises(ConfigurationError):
            project_schedule(10, 12, 2, PruneConfig(), 4)
        with pytest.raises(ConfigurationError):
            project_schedule(10, 5, 6, PruneConfig(), 4)

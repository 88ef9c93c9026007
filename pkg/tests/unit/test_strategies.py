"""
选择策略测试
"""

import pytest

from core.models import ConfigurationError, ConsistencyError
from core.strategies import STRATEGIES, strategy_variant


def test_known_strategies():
    assert sorted(STRATEGIES) == [
        "low_attentive", "low_informative", "random", "top_attentive", "top_informative",
    ]


def test_unknown_strategy():
    with pytest.raises(ConfigurationError, match="可选值"):
        strategy_variant("lowest")


def test_low_attentive_removes_lowest():
    policy = strategy_variant("low_attentive")
    assert policy.select([0, 1, 2, 3], [0.4, 0.1, 0.3, 0.2], 2) == [1, 3]


def test_ties_remove_later_positions():
    policy = strategy_variant("low_attentive")
    assert policy.select([0, 1, 2, 3], [0.25] * 4, 2) == [2, 3]


def test_top_attentive_removes_highest():
    policy = strategy_variant("top_attentive")
    assert policy.select([5, 6, 7], [0.1, 0.7, 0.2], 1) == [6]


def test_random_is_seeded():
    first = strategy_variant("random", seed=9).select(list(range(20)), None, 5, layer=3)
    second = strategy_variant("random", seed=9).select(list(range(20)), None, 5, layer=3)
    assert first == second
    assert len(set(first)) == 5
    assert first == sorted(first)


def test_informative_needs_full_attention():
    assert strategy_variant("low_informative").requires_full_attention
    assert strategy_variant("top_informative").requires_full_attention
    assert not strategy_variant("low_attentive").requires_full_attention
    assert not strategy_variant("random").requires_full_attention


def test_missing_scores():
    with pytest.raises(ConsistencyError):
        strategy_variant("low_attentive").select([0, 1], None, 1)


def test_count_exceeds_candidates():
    with pytest.raises(ConsistencyError):
        strategy_variant("random").select([0, 1], None, 3)


def test_zero_count():
    assert strategy_variant("top_informative").select([0, 1], [0.5, 0.5], 0) == []

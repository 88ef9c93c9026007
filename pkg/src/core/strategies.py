"""
token选择策略

定义剪枝选择策略的标准接口和五种命名策略：
random、top_attentive、low_attentive、top_informative、low_informative。
策略只决定"移除哪些token"，移除数量由剪枝流水线决定。
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import ConfigurationError, ConsistencyError


class SelectionPolicy(ABC):
    """选择策略接口"""

    name: str = ""
    signal: str = "none"  # attention | influence | none

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        """
        初始化策略

        Args:
            config: 策略配置参数
        """
        self.config = config or {}
        self._setup()

    @abstractmethod
    def _setup(self) -> None:
        """设置策略"""
        pass

    @abstractmethod
    def select(self, candidates: Sequence[int], scores: Optional[Sequence[float]],
               count: int, layer: int = 0) -> List[int]:
        """
        选出要移除的token

        Args:
            candidates: 候选位置（升序）
            scores: 与候选对齐的分数，不需要分数的策略可传 None
            count: 移除数量
            layer: 当前层编号（随机策略用于派生种子）

        Returns:
            List[int]: 要移除的位置（升序）
        """
        pass

    @property
    def requires_full_attention(self) -> bool:
        """是否需要完整注意力图（rollout 影响分数）"""
        return self.signal == "influence"

    def validate_inputs(self, candidates: Sequence[int], scores: Optional[Sequence[float]],
                        count: int) -> None:
        if count < 0 or count > len(candidates):
            raise ConsistencyError(f"移除数量 {count} 超出候选数 {len(candidates)}")
        if self.signal != "none":
            if scores is None:
                raise ConsistencyError(f"策略 {self.name} 需要 {self.signal} 分数")
            if len(scores) != len(candidates):
                raise ConsistencyError(
                    f"分数个数 {len(scores)} 与候选个数 {len(candidates)} 不符"
                )


class RankedPolicy(SelectionPolicy):
    """按分数排序、从排序头部依次移除的基础策略"""

    descending: bool = False

    def _setup(self) -> None:
        pass

    def _removal_order(self, candidates: Sequence[int],
                       scores: Sequence[float]) -> List[int]:
        # 同分时先移除靠后的位置
        sign = -1.0 if self.descending else 1.0
        keyed: List[Tuple[float, int]] = [
            (sign * float(score), -int(pos)) for pos, score in zip(candidates, scores)
        ]
        keyed.sort()
        return [-neg_pos for _, neg_pos in keyed]

    def select(self, candidates: Sequence[int], scores: Optional[Sequence[float]],
               count: int, layer: int = 0) -> List[int]:
        self.validate_inputs(candidates, scores, count)
        if count == 0:
            return []
        return sorted(self._removal_order(candidates, scores)[:count])


class LowAttentive(RankedPolicy):
    """移除最后查询注意力最低的token（细粒度剪枝默认策略）"""
    name = "low_attentive"
    signal = "attention"


class TopAttentive(RankedPolicy):
    name = "top_attentive"
    signal = "attention"
    descending = True


class LowInformative(RankedPolicy):
    """移除 rollout 影响分数最低的token（全局剪枝默认策略）"""
    name = "low_informative"
    signal = "influence"


class TopInformative(RankedPolicy):
    name = "top_informative"
    signal = "influence"
    descending = True


class RandomPolicy(SelectionPolicy):
    """按种子均匀随机移除"""
    name = "random"
    signal = "none"

    def _setup(self) -> None:
        self.seed = int(self.config.get("seed", 0))

    def select(self, candidates: Sequence[int], scores: Optional[Sequence[float]],
               count: int, layer: int = 0) -> List[int]:
        self.validate_inputs(candidates, scores, count)
        if count == 0:
            return []
        rng = np.random.default_rng([self.seed, int(layer)])
        picked = rng.choice(len(candidates), size=count, replace=False)
        return sorted(int(candidates[i]) for i in picked)


STRATEGIES = {
    policy.name: policy
    for policy in (RandomPolicy, TopAttentive, LowAttentive, TopInformative, LowInformative)
}


def strategy_variant(name: str, seed: int = 0) -> SelectionPolicy:
    """
    按名称创建选择策略

    Raises:
        ConfigurationError: 未知的策略名
    """
    try:
        policy_class = STRATEGIES[name]
    except KeyError:
        raise ConfigurationError(
            f"未知的策略: {name!r}, 可选值: {', '.join(sorted(STRATEGIES))}"
        ) from None
    return policy_class({"seed": seed})

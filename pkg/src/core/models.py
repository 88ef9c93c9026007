"""
核心数据模型

定义多模态token序列、模型配置、剪枝配置和活动集合等跨模块共享的数据结构，
以及整个引擎使用的异常类。
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union


class Modality(Enum):
    """token模态枚举"""
    VISUAL = "visual"
    AUDIO = "audio"
    TEXT = "text"
    GENERATED = "generated"

    @property
    def is_multimodal(self) -> bool:
        """是否为音视频token（全局剪枝的候选）"""
        return self in (Modality.VISUAL, Modality.AUDIO)


class Layout(Enum):
    """序列排布方式"""
    CONTIGUOUS = "contiguous"              # 视频块 → 音频块 → 文本
    FRAME_INTERLEAVED = "frame_interleaved"  # 按帧交错的视频/音频


# 一帧内允许的区间模态顺序
_FRAME_ORDERS = (
    (Modality.VISUAL, Modality.AUDIO),
    (Modality.VISUAL,),
    (Modality.AUDIO,),
)


# 错误和异常类
class AVPruneError(Exception):
    """引擎基础异常"""

    def to_dict(self) -> Dict[str, str]:
        """转换为结构化错误信息"""
        return {"error": type(self).__name__, "message": str(self)}


class ConfigurationError(AVPruneError, ValueError):
    """配置错误（形状、取值范围、名称、规则不兼容）"""
    pass


class InputError(AVPruneError, ValueError):
    """输入错误"""
    pass


class ConsistencyError(AVPruneError, RuntimeError):
    """内部一致性错误"""
    pass


class TraceFormatError(InputError):
    """注意力轨迹文件格式错误"""
    pass


class TraceTruncationError(TraceFormatError):
    """注意力轨迹文件长度不符"""
    pass


class TraceValidationError(TraceFormatError):
    """注意力轨迹行和校验失败"""
    pass


class CalibrationWarning(UserWarning):
    """校准阈值超出分数范围"""
    pass


@dataclass(frozen=True)
class Span:
    """模态区间"""
    modality: Modality
    start: int
    length: int

    @property
    def end(self) -> int:
        """区间结束位置（不含）"""
        return self.start + self.length

    def positions(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class TokenSequence:
    """
    多模态token序列

    spans 必须按顺序无重叠地覆盖 [0, K)。FrameInterleaved 排布下，
    视频/音频区间按帧交替出现，frame_size 为每帧的token数。
    """
    tokens: Tuple[int, ...]
    spans: Tuple[Span, ...]
    layout: Layout = Layout.CONTIGUOUS
    frame_size: int = 0

    def __post_init__(self):
        """校验区间划分"""
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "spans", tuple(self.spans))

        if not self.tokens:
            raise InputError("token序列为空")

        cursor = 0
        for span in self.spans:
            if span.start != cursor or span.length < 1:
                raise InputError(
                    f"模态区间未连续覆盖序列: 期望起点 {cursor}, 实际 {span}"
                )
            cursor = span.end
        if cursor != len(self.tokens):
            raise InputError(f"模态区间覆盖 {cursor} 个位置, 序列长度为 {len(self.tokens)}")

        if self.layout is Layout.FRAME_INTERLEAVED:
            if self.frame_size < 1:
                raise InputError("FrameInterleaved 排布需要正的 frame_size")
            self._frame_groups()

    def _frame_groups(self) -> List[Tuple[Span, ...]]:
        """
        按 frame_size 把音视频区间分组为帧

        音视频区间必须连续出现；每帧先视频后音频交替，且各帧的区间长度相同。

        Raises:
            InputError: 区间不满足帧交错结构
        """
        multimodal = [i for i, span in enumerate(self.spans) if span.modality.is_multimodal]
        if multimodal and multimodal[-1] - multimodal[0] + 1 != len(multimodal):
            raise InputError("FrameInterleaved 排布中音视频区间必须连续")

        groups: List[Tuple[Span, ...]] = []
        current: List[Span] = []
        filled = 0
        for index in multimodal:
            span = self.spans[index]
            current.append(span)
            filled += span.length
            if filled > self.frame_size:
                raise InputError(f"区间 {span} 跨越了帧边界 (frame_size={self.frame_size})")
            if filled == self.frame_size:
                order = tuple(s.modality for s in current)
                if order not in _FRAME_ORDERS:
                    raise InputError(f"帧内区间必须先视频后音频交替: {[m.value for m in order]}")
                groups.append(tuple(current))
                current, filled = [], 0
        if current:
            raise InputError(f"最后一帧不完整: {filled}/{self.frame_size} 个token")

        pattern = [(s.modality, s.length) for s in groups[0]] if groups else []
        for frame in groups[1:]:
            if [(s.modality, s.length) for s in frame] != pattern:
                raise InputError(f"各帧的区间结构必须相同: 第一帧为 {pattern}")
        return groups

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def last_position(self) -> int:
        return len(self.tokens) - 1

    def modality_at(self, position: int) -> Modality:
        """获取指定位置的模态"""
        for span in self.spans:
            if span.start <= position < span.end:
                return span.modality
        raise InputError(f"位置越界: {position} (K={len(self.tokens)})")

    def modalities(self) -> List[Modality]:
        """逐位置的模态列表"""
        result: List[Modality] = []
        for span in self.spans:
            result.extend([span.modality] * span.length)
        return result

    def positions_of(self, *modalities: Modality) -> List[int]:
        """获取指定模态的全部位置"""
        wanted = set(modalities)
        return [
            pos
            for span in self.spans if span.modality in wanted
            for pos in span.positions()
        ]

    def count(self, modality: Modality) -> int:
        return sum(span.length for span in self.spans if span.modality is modality)

    def frames(self) -> List[Tuple[int, int]]:
        """
        获取交错排布中的帧区间

        Returns:
            List[Tuple[int, int]]: 每帧的 (起点, 终点) 位置，终点不含
        """
        if self.layout is not Layout.FRAME_INTERLEAVED:
            return []

        return [(frame[0].start, frame[-1].end) for frame in self._frame_groups()]

    def extended(self, token: int) -> "TokenSequence":
        """追加一个生成的token"""
        spans = list(self.spans)
        last = spans[-1]
        if last.modality is Modality.GENERATED:
            spans[-1] = replace(last, length=last.length + 1)
        else:
            spans.append(Span(Modality.GENERATED, len(self.tokens), 1))
        return replace(self, tokens=self.tokens + (int(token),), spans=tuple(spans))


@dataclass(frozen=True)
class ModelConfig:
    """玩具解码器配置"""
    layers: int = 28
    heads: int = 8
    model_dim: int = 128
    ffn_dim: int = 512
    vocab_size: int = 512
    seed: int = 0
    eos_token: int = 0

    def __post_init__(self):
        """校验配置"""
        for name in ("layers", "heads", "model_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} 必须 ≥ 1, 实际为 {getattr(self, name)}")
        if self.model_dim % self.heads != 0:
            raise ConfigurationError(
                f"model_dim={self.model_dim} 不能被 heads={self.heads} 整除"
            )
        if self.layers % 2 != 0:
            raise ConfigurationError(f"layers 必须为偶数, 实际为 {self.layers}")
        if not 0 <= self.eos_token < self.vocab_size:
            raise ConfigurationError(f"eos_token 超出词表: {self.eos_token}")
        if self.seed < 0:
            raise ConfigurationError(f"seed 必须非负, 实际为 {self.seed}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def middle_layer(self) -> int:
        return self.layers // 2

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


# 全局剪枝规则
@dataclass(frozen=True)
class PositionCutoff:
    """位置截断：位置 ≥ position 的音视频token被移除"""
    position: int

    def __post_init__(self):
        if self.position < 0:
            raise ConfigurationError(f"截断位置必须非负: {self.position}")


@dataclass(frozen=True)
class RolloutThreshold:
    """rollout影响力阈值（离线校准用）"""
    tau: float

    def __post_init__(self):
        if math.isnan(self.tau) or self.tau < 0:
            raise ConfigurationError(f"tau 必须为非负数: {self.tau}")


GlobalRule = Union[PositionCutoff, RolloutThreshold]


# 模态保留规则
@dataclass(frozen=True)
class KeepFirstAudio:
    """只保留前k个音频token"""
    k: int = 10

    def __post_init__(self):
        if self.k < 0:
            raise ConfigurationError(f"k 必须非负: {self.k}")


@dataclass(frozen=True)
class KeepFirstFrames:
    """只保留前k个交错帧"""
    k: int = 4

    def __post_init__(self):
        if self.k < 0:
            raise ConfigurationError(f"k 必须非负: {self.k}")


RetentionRule = Optional[Union[KeepFirstAudio, KeepFirstFrames]]


@dataclass(frozen=True)
class PruneConfig:
    """
    两阶段剪枝配置

    middle_layer / min_active / fine_end_layer 为 None 时，
    分别解析为 L/2、E+1 和 L。
    """
    alpha: float = 0.5
    middle_layer: Optional[int] = None
    global_rule: GlobalRule = field(default_factory=lambda: RolloutThreshold(0.005))
    retention: RetentionRule = field(default_factory=KeepFirstAudio)
    fine_ratio: float = 0.20
    protected: FrozenSet[Modality] = frozenset({Modality.TEXT, Modality.GENERATED})
    min_active: Optional[int] = None
    fine_end_layer: Optional[int] = None
    prune_during_generation: bool = False

    def __post_init__(self):
        """校验配置"""
        object.__setattr__(self, "protected", frozenset(self.protected))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha 必须在 [0, 1] 内: {self.alpha}")
        if not 0.0 <= self.fine_ratio < 1.0:
            raise ConfigurationError(f"fine_ratio 必须在 [0, 1) 内: {self.fine_ratio}")
        if self.middle_layer is not None and self.middle_layer < 1:
            raise ConfigurationError(f"middle_layer 必须 ≥ 1: {self.middle_layer}")
        if self.min_active is not None and self.min_active < 1:
            raise ConfigurationError(f"min_active 必须 ≥ 1: {self.min_active}")

    def resolve_middle_layer(self, num_layers: int) -> int:
        """解析中间层编号（1起）"""
        middle = self.middle_layer if self.middle_layer is not None else num_layers // 2
        if not 1 <= middle <= num_layers:
            raise ConfigurationError(f"middle_layer={middle} 不在 [1, {num_layers}] 内")
        return middle

    def resolve_fine_end_layer(self, num_layers: int) -> int:
        end = self.fine_end_layer if self.fine_end_layer is not None else num_layers
        return min(end, num_layers)

    def resolve_min_active(self, sequence: TokenSequence) -> int:
        if self.min_active is not None:
            return self.min_active
        return sequence.count(Modality.TEXT) + 1

    def to_dict(self) -> Dict[str, Any]:
        """转换为报告用字典"""
        rule: Dict[str, Any]
        if isinstance(self.global_rule, PositionCutoff):
            rule = {"kind": "position_cutoff", "position": self.global_rule.position}
        else:
            rule = {"kind": "rollout_threshold", "tau": self.global_rule.tau}

        if isinstance(self.retention, KeepFirstAudio):
            retention: Dict[str, Any] = {"kind": "keep_first_audio", "k": self.retention.k}
        elif isinstance(self.retention, KeepFirstFrames):
            retention = {"kind": "keep_first_frames", "k": self.retention.k}
        else:
            retention = {"kind": "none"}

        return {
            "alpha": self.alpha,
            "middle_layer": self.middle_layer,
            "global_rule": rule,
            "retention": retention,
            "fine_ratio": self.fine_ratio,
            "protected": sorted(m.value for m in self.protected),
            "min_active": self.min_active,
            "fine_end_layer": self.fine_end_layer,
            "prune_during_generation": self.prune_during_generation,
        }


@dataclass(frozen=True)
class ActiveSet:
    """
    活动集合

    某一层仍然存活的原始token位置（严格递增），protected 为永不剪枝的子集。
    """
    indices: Tuple[int, ...]
    protected: FrozenSet[int] = frozenset()
    _members: FrozenSet[int] = field(init=False, repr=False, compare=False, default=frozenset())

    def __post_init__(self):
        """校验不变量"""
        indices = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "_members", frozenset(indices))
        object.__setattr__(self, "protected", frozenset(int(p) for p in self.protected))

        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ConsistencyError("活动集合索引必须严格递增")
        missing = self.protected.difference(indices)
        if missing:
            raise ConsistencyError(f"受保护token不在活动集合中: {sorted(missing)[:8]}")

    @classmethod
    def full(cls, size: int, protected: Iterable[int] = ()) -> "ActiveSet":
        return cls(tuple(range(size)), frozenset(protected))

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, position: object) -> bool:
        return position in self._members

    @property
    def last(self) -> int:
        return self.indices[-1]

    @property
    def prunable(self) -> Tuple[int, ...]:
        """非受保护的活动位置"""
        return tuple(i for i in self.indices if i not in self.protected)

    def without(self, removed: Iterable[int]) -> "ActiveSet":
        """移除一组位置（受保护位置不可移除）"""
        removed_set = frozenset(removed)
        clash = removed_set & self.protected
        if clash:
            raise ConsistencyError(f"试图移除受保护token: {sorted(clash)[:8]}")
        return ActiveSet(
            tuple(i for i in self.indices if i not in removed_set),
            self.protected,
        )

    def extended(self, position: int) -> "ActiveSet":
        """追加一个新生成的（受保护的）位置"""
        if self.indices and position <= self.indices[-1]:
            raise ConsistencyError(f"新位置 {position} 不在末尾之后")
        return ActiveSet(self.indices + (position,), self.protected | {position})

    def with_protected(self, extra: Iterable[int]) -> "ActiveSet":
        return ActiveSet(self.indices, self.protected | frozenset(extra))

"""
两阶段token剪枝

- 全局剪枝：离线用 rollout 阈值校准出位置截断点，推理时在中间层按截断点
  和模态保留规则一次性移除靠后的音视频token，不需要注意力图
- 细粒度剪枝：中间层之后每层按最后一个查询的多头平均注意力移除最低的 P%
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from loguru import logger

from .flops import LayerSchedule
from .models import (
    ActiveSet, CalibrationWarning, ConfigurationError, ConsistencyError,
    KeepFirstAudio, KeepFirstFrames, Layout, Modality, PositionCutoff,
    PruneConfig, RolloutThreshold, TokenSequence,
)
from .rollout import influence_scores, rollout_at
from .strategies import SelectionPolicy, strategy_variant
from .toy_model import AttentionTensor

ROW_SUM_TOLERANCE = 1e-6
DEFAULT_GLOBAL_STRATEGY = "low_informative"
DEFAULT_FINE_STRATEGY = "low_attentive"


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    """与活动token一一对应的重要性分数"""
    positions: Tuple[int, ...]
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def for_positions(self, positions: Iterable[int]) -> List[float]:
        lookup = dict(zip(self.positions, self.values.tolist()))
        return [lookup[p] for p in positions]


def fine_scores(last_query_row: Union[np.ndarray, Sequence[float]],
                active: Optional[ActiveSet] = None) -> ImportanceScores:
    """
    校验最后查询的注意力行并绑定token位置

    Args:
        last_query_row: 多头平均、已在活动键上归一化的注意力行
        active: 行对应的活动集合；None 时位置取 0..n-1

    Returns:
        ImportanceScores: 重要性分数

    Raises:
        ConsistencyError: 行未归一化、含负值或与活动集合长度不符
    """
    row = np.asarray(last_query_row, dtype=np.float64).ravel()
    if row.size == 0:
        raise ConsistencyError("注意力行为空")
    if not np.all(np.isfinite(row)) or np.any(row < 0.0):
        raise ConsistencyError("注意力行包含负值或非有限值")
    total = float(row.sum())
    if abs(total - 1.0) > ROW_SUM_TOLERANCE:
        raise ConsistencyError(f"注意力行未归一化: 和为 {total:.9f}")

    positions = tuple(active.indices) if active is not None else tuple(range(row.size))
    if len(positions) != row.size:
        raise ConsistencyError(f"注意力行长度 {row.size} 与活动集合大小 {len(positions)} 不符")
    values = row.copy()
    values.setflags(write=False)
    return ImportanceScores(positions, values)


def removal_count(n_prunable: int, active_size: int, fine_ratio: float, min_active: int) -> int:
    """floor(P × n_prunable)，且剪枝后不少于 min_active"""
    wanted = math.floor(round(fine_ratio * n_prunable, 9))
    return max(0, min(wanted, active_size - min_active))


def resolve_fine_floor(active: ActiveSet, cfg: PruneConfig, min_active: Optional[int] = None,
                       sequence: Optional[TokenSequence] = None) -> int:
    """
    细粒度剪枝的活动集合下限

    依次取显式的 min_active、cfg.min_active、序列的 E+1；
    都没有时取受保护token数 + 1（受保护集合包含全部文本token和最后一个token）。
    """
    if min_active is not None:
        return min_active
    if cfg.min_active is not None:
        return cfg.min_active
    if sequence is not None:
        return cfg.resolve_min_active(sequence)
    return len(active.protected) + 1


def apply_fine(scores: ImportanceScores, active: ActiveSet, cfg: PruneConfig,
               policy: Optional[SelectionPolicy] = None, layer: int = 0,
               min_active: Optional[int] = None,
               sequence: Optional[TokenSequence] = None) -> ActiveSet:
    """
    细粒度剪枝

    移除 floor(P × n_prunable) 个非受保护token，默认移除分数最低的，
    同分保留较早的位置。

    Args:
        scores: 与 active 对齐的分数
        active: 当前活动集合
        cfg: 剪枝配置
        policy: 选择策略，默认 low_attentive
        layer: 层编号
        min_active: 活动集合下限，优先于其他来源
        sequence: 原始序列，用于按 E+1 确定下限（见 resolve_fine_floor）

    Returns:
        ActiveSet: 剪枝后的活动集合
    """
    if tuple(scores.positions) != tuple(active.indices):
        raise ConsistencyError("分数与活动集合的位置不一致")

    floor_size = resolve_fine_floor(active, cfg, min_active, sequence)
    candidates = active.prunable
    count = removal_count(len(candidates), len(active), cfg.fine_ratio, floor_size)
    if count == 0:
        return active

    policy = policy or strategy_variant(DEFAULT_FINE_STRATEGY)
    removed = policy.select(candidates, scores.for_positions(candidates), count, layer)
    return active.without(removed)


def protected_positions(sequence: TokenSequence, cfg: PruneConfig) -> Set[int]:
    """受保护模态的全部位置加上最后一个token"""
    positions = set(sequence.positions_of(*cfg.protected))
    positions.add(sequence.last_position)
    return positions


def _cutoff_position(cutoff: Union[PositionCutoff, int]) -> int:
    if isinstance(cutoff, PositionCutoff):
        return cutoff.position
    return PositionCutoff(int(cutoff)).position


def apply_global(sequence: TokenSequence, cutoff: Union[PositionCutoff, int],
                 cfg: PruneConfig, min_active: Optional[int] = None) -> ActiveSet:
    """
    全局剪枝

    移除位置 ≥ cutoff 的视频/音频token，再应用保留规则：
    KeepFirstAudio 只保留前 k 个音频token（不论截断点），并把它们加入受保护集合；
    KeepFirstFrames 保留前 k 帧、移除之后的帧。文本和受保护token不会被移除。

    Raises:
        ConfigurationError: 截断点超出序列，或保留规则与排布不兼容
    """
    size = len(sequence)
    position = _cutoff_position(cutoff)
    if position > size:
        raise ConfigurationError(f"截断点 {position} 超出序列长度 {size}")
    retention = cfg.retention
    if isinstance(retention, KeepFirstFrames) and sequence.layout is not Layout.FRAME_INTERLEAVED:
        raise ConfigurationError("KeepFirstFrames 只适用于 FrameInterleaved 排布")

    modalities = sequence.modalities()
    protected = protected_positions(sequence, cfg)
    removed = {p for p in range(position, size) if modalities[p].is_multimodal}

    retained: Set[int] = set()
    if isinstance(retention, KeepFirstAudio):
        audio = sequence.positions_of(Modality.AUDIO)
        retained = set(audio[: retention.k])
        removed.update(audio[retention.k:])
        removed.difference_update(retained)
    elif isinstance(retention, KeepFirstFrames):
        frames = sequence.frames()
        for start, end in frames[retention.k:]:
            removed.update(p for p in range(start, end) if modalities[p].is_multimodal)
        for start, end in frames[: retention.k]:
            removed.difference_update(range(start, end))

    removed.difference_update(protected)
    floor_size = min_active if min_active is not None else cfg.resolve_min_active(sequence)
    if size - len(removed) < floor_size:
        restore = sorted(removed)[: floor_size - (size - len(removed))]
        removed.difference_update(restore)

    indices = tuple(p for p in range(size) if p not in removed)
    return ActiveSet(indices, frozenset(protected | retained))


@dataclass
class CalibrationSample:
    """
    一个校准样本

    query_start 之前的位置是剪枝候选，之后（含）的行参与影响分数平均；
    None 表示只用最后一行。
    """
    attn: Sequence[AttentionTensor]
    query_start: Optional[int] = None

    @property
    def n(self) -> int:
        return self.attn[0].n

    def resolved_query_start(self) -> int:
        start = self.n - 1 if self.query_start is None else self.query_start
        if not 0 < start < self.n:
            raise ConfigurationError(f"query_start={start} 不在 (0, {self.n}) 内")
        return start


@dataclass
class SampleCutoff:
    """单个样本的校准结果"""
    cutoff: int
    score_min: float
    score_max: float


@dataclass
class CalibrationResult:
    """校准结果"""
    cutoff: PositionCutoff
    per_sample: List[int]
    tau: float
    alpha: float
    middle_layer: int
    score_min: float
    score_max: float
    aggregation: str = "median_ceil"
    query_rows: str = "rows from the first query position to the end"
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cutoff": self.cutoff.position,
            "per_sample": list(self.per_sample),
            "tau": self.tau,
            "alpha": self.alpha,
            "middle_layer": self.middle_layer,
            "score_range": [self.score_min, self.score_max],
            "aggregation": self.aggregation,
            "query_rows": self.query_rows,
            "samples": len(self.per_sample),
            "warnings": list(self.warnings),
        }


def calibrate_sample(sample: Union[CalibrationSample, Sequence[AttentionTensor]],
                     tau: float, alpha: float, middle_layer: Optional[int]) -> SampleCutoff:
    """
    单样本校准

    在中间层计算 rollout 和影响分数，分数低于 tau 的候选视为可剪枝；
    截断点为最后一个保留候选之后的位置。没有候选低于阈值时返回 n。
    """
    if not isinstance(sample, CalibrationSample):
        sample = CalibrationSample(list(sample))
    if not sample.attn:
        raise ConfigurationError("校准样本没有注意力层")

    num_layers = len(sample.attn)
    middle = middle_layer if middle_layer is not None else num_layers // 2
    if not 1 <= middle <= num_layers:
        raise ConfigurationError(f"样本只有 {num_layers} 层, 无法在第{middle}层校准")

    n = sample.n
    query_start = sample.resolved_query_start()
    scores = influence_scores(rollout_at(sample.attn, middle, alpha), range(query_start, n))
    candidates = scores[:query_start]

    below = candidates < tau
    kept = np.flatnonzero(~below)
    if not below.any():
        cutoff = n
    elif kept.size == 0:
        cutoff = 0
    elif int(kept[-1]) == query_start - 1:
        cutoff = n
    else:
        cutoff = int(kept[-1]) + 1
    return SampleCutoff(cutoff, float(candidates.min()), float(candidates.max()))


def aggregate_cutoffs(cutoffs: Sequence[int]) -> int:
    """样本截断点的中位数向上取整"""
    return int(math.ceil(float(np.median(np.asarray(cutoffs, dtype=np.float64)))))


def calibrate_global(traces: Sequence[Union[CalibrationSample, Sequence[AttentionTensor]]],
                     cfg: PruneConfig, tau: Optional[float] = None) -> CalibrationResult:
    """
    从注意力轨迹校准全局截断点

    Args:
        traces: 每个样本的注意力张量列表（或 CalibrationSample）
        cfg: 剪枝配置（alpha、middle_layer，及 RolloutThreshold 的 tau）
        tau: 覆盖 cfg 中的阈值

    Returns:
        CalibrationResult: 截断点与校准统计

    Raises:
        ConfigurationError: 轨迹为空或没有可用的阈值
    """
    if not traces:
        raise ConfigurationError("校准需要至少一个样本")
    if tau is None:
        if not isinstance(cfg.global_rule, RolloutThreshold):
            raise ConfigurationError("校准需要 RolloutThreshold 规则或显式的 tau")
        tau = cfg.global_rule.tau

    results = [calibrate_sample(trace, tau, cfg.alpha, cfg.middle_layer) for trace in traces]
    return summarize_calibration(results, cfg, tau, num_layers=_num_layers(traces[0]))


def _num_layers(trace: Union[CalibrationSample, Sequence[AttentionTensor]]) -> int:
    return len(trace.attn) if isinstance(trace, CalibrationSample) else len(trace)


def summarize_calibration(results: Sequence[SampleCutoff], cfg: PruneConfig,
                          tau: float, num_layers: int) -> CalibrationResult:
    """汇总各样本结果，阈值超出分数范围时发出 CalibrationWarning"""
    cutoffs = [r.cutoff for r in results]
    score_min = min(r.score_min for r in results)
    score_max = max(r.score_max for r in results)

    messages: List[str] = []
    if not 0.0 < tau < score_max:
        message = (f"tau={tau:g} 不在 (0, {score_max:.6g}) 内, "
                   f"分数范围为 [{score_min:.6g}, {score_max:.6g}]")
        messages.append(message)
        warnings.warn(message, CalibrationWarning, stacklevel=3)
        logger.warning(f"校准阈值异常: {message}")

    cutoff = aggregate_cutoffs(cutoffs)
    middle = cfg.middle_layer if cfg.middle_layer is not None else num_layers // 2
    logger.info(f"校准完成: {len(cutoffs)} 个样本, 截断点 {cutoff}")
    return CalibrationResult(
        cutoff=PositionCutoff(cutoff),
        per_sample=cutoffs,
        tau=tau,
        alpha=cfg.alpha,
        middle_layer=middle,
        score_min=score_min,
        score_max=score_max,
        warnings=messages,
    )


class TwoStagePruner:
    """
    预填充剪枝流水线

    由解码器在每层结束后调用：第 middle_layer 层之后做全局剪枝，
    之后每层的细粒度决策决定下一层的活动集合。决策记录在 decisions 中。
    """

    def __init__(self, cfg: PruneConfig, cutoff: Union[PositionCutoff, int],
                 global_strategy: str = DEFAULT_GLOBAL_STRATEGY,
                 fine_strategy: str = DEFAULT_FINE_STRATEGY,
                 influence: Optional[np.ndarray] = None,
                 seed: int = 0):
        """
        初始化剪枝器

        Args:
            cfg: 剪枝配置
            cutoff: 校准得到的全局截断点
            global_strategy: 全局阶段的选择策略；非默认策略移除与截断规则相同数量的token
            fine_strategy: 细粒度阶段的选择策略
            influence: informative 类全局策略所需的逐位置 rollout 影响分数
            seed: 随机策略的种子
        """
        self.cfg = cfg
        self.cutoff = PositionCutoff(_cutoff_position(cutoff))
        self.global_policy = strategy_variant(global_strategy, seed)
        self.fine_policy = strategy_variant(fine_strategy, seed)
        self.influence = None if influence is None else np.asarray(influence, dtype=np.float64)
        self.prune_during_generation = cfg.prune_during_generation

        if self.fine_policy.requires_full_attention:
            raise ConfigurationError(f"细粒度阶段不支持策略 {fine_strategy}")
        if (self.global_policy.requires_full_attention and not self.uses_cutoff_rule
                and self.influence is None):
            raise ConfigurationError(f"全局策略 {global_strategy} 需要 rollout 影响分数")

        self.decisions: List[Dict[str, Any]] = []
        self.sequence: Optional[TokenSequence] = None
        self.num_layers = 0
        self.middle_layer = 0
        self.fine_end_layer = 0
        self.min_active = 1
        self._step = 0

    @property
    def uses_cutoff_rule(self) -> bool:
        return self.global_policy.name == DEFAULT_GLOBAL_STRATEGY

    def begin(self, sequence: TokenSequence, num_layers: int) -> ActiveSet:
        """开始一次预填充，重置决策记录"""
        self.sequence = sequence
        self.num_layers = num_layers
        self.middle_layer = self.cfg.resolve_middle_layer(num_layers)
        self.fine_end_layer = self.cfg.resolve_fine_end_layer(num_layers)
        self.min_active = self.cfg.resolve_min_active(sequence)
        self.decisions = []
        self._step = 0
        if self.cutoff.position > len(sequence):
            raise ConfigurationError(f"截断点 {self.cutoff.position} 超出序列长度 {len(sequence)}")
        return ActiveSet.full(len(sequence), protected_positions(sequence, self.cfg))

    def after_layer(self, layer: int, active: ActiveSet, last_query_row: np.ndarray) -> ActiveSet:
        """根据第 layer 层的结果给出下一层的活动集合"""
        if layer == self.middle_layer:
            return self._global_stage(layer, active, last_query_row)
        if self.middle_layer < layer <= self.fine_end_layer:
            return self._fine_stage(layer, active, last_query_row)
        return active

    def _global_stage(self, layer: int, active: ActiveSet, last_query_row: np.ndarray) -> ActiveSet:
        sequence = self.sequence
        if sequence is None:
            raise ConsistencyError("剪枝器未初始化: 需要先调用 begin()")

        baseline = apply_global(sequence, self.cutoff, self.cfg, self.min_active)
        if self.uses_cutoff_rule:
            result = baseline
        else:
            result = self._ablation_global(layer, active, last_query_row,
                                           len(sequence) - len(baseline))

        result = ActiveSet(
            tuple(p for p in result.indices if p in active),
            result.protected & frozenset(active.indices),
        )
        removed = sorted(set(active.indices) - set(result.indices))
        audio = set(sequence.positions_of(Modality.AUDIO))
        self.decisions.append({
            "stage": "global",
            "layer": layer,
            "strategy": self.global_policy.name,
            "cutoff": self.cutoff.position,
            "active_before": len(active),
            "active_after": len(result),
            "removed": removed,
            "audio_before": sum(1 for p in active.indices if p in audio),
            "audio_after": sum(1 for p in result.indices if p in audio),
        })
        logger.debug(
            f"第{layer}层全局剪枝 ({self.global_policy.name}): {len(active)} → {len(result)}"
        )
        return result

    def _ablation_global(self, layer: int, active: ActiveSet,
                         last_query_row: np.ndarray, count: int) -> ActiveSet:
        """非默认全局策略：在音视频token中选出与截断规则等量的token移除"""
        sequence = self.sequence
        assert sequence is not None
        protected = protected_positions(sequence, self.cfg)
        multimodal = set(sequence.positions_of(Modality.VISUAL, Modality.AUDIO))
        candidates = [p for p in active.indices if p in multimodal and p not in protected]
        count = min(count, len(candidates))

        signal = self.global_policy.signal
        scores: Optional[List[float]] = None
        if signal == "attention":
            row = fine_scores(last_query_row, active)
            scores = row.for_positions(candidates)
        elif signal == "influence":
            assert self.influence is not None
            scores = [float(self.influence[p]) for p in candidates]

        removed = self.global_policy.select(candidates, scores, count, layer)
        return ActiveSet(
            tuple(p for p in active.indices if p not in set(removed)),
            frozenset(protected),
        )

    def _fine_stage(self, layer: int, active: ActiveSet, last_query_row: np.ndarray) -> ActiveSet:
        scores = fine_scores(last_query_row, active)
        result = apply_fine(scores, active, self.cfg, self.fine_policy, layer, self.min_active)
        self.decisions.append({
            "stage": "fine",
            "layer": layer,
            "strategy": self.fine_policy.name,
            "applied": layer < self.num_layers,
            "active_before": len(active),
            "active_after": len(result),
            "removed": sorted(set(active.indices) - set(result.indices)),
        })
        return result

    def generation_stage(self, actives: List[ActiveSet],
                         last_query_rows: Dict[int, np.ndarray]) -> List[ActiveSet]:
        """
        生成阶段的逐步细粒度剪枝

        第 l 层的注意力行决定第 l+1 层缓存保留哪些token，
        各层集合保持逐层嵌套。
        """
        self._step += 1
        updated = list(actives)
        last_layer = min(self.fine_end_layer, self.num_layers - 1)
        for layer in range(self.middle_layer + 1, last_layer + 1):
            row = fine_scores(last_query_rows[layer], actives[layer - 1])
            current = actives[layer]
            members = frozenset(updated[layer - 1].indices)
            base = ActiveSet(
                tuple(p for p in current.indices if p in members),
                current.protected,
            )
            scores = ImportanceScores(tuple(base.indices), np.asarray(row.for_positions(base.indices)))
            updated[layer] = apply_fine(scores, base, self.cfg, self.fine_policy,
                                        layer, self.min_active)
            removed = sorted(set(current.indices) - set(updated[layer].indices))
            if removed:
                self.decisions.append({
                    "stage": "generation",
                    "step": self._step,
                    "layer": layer,
                    "strategy": self.fine_policy.name,
                    "removed": removed,
                })
        return updated

    def decisions_dict(self) -> Dict[str, Any]:
        """导出剪枝决策"""
        return {
            "cutoff": self.cutoff.position,
            "global_strategy": self.global_policy.name,
            "fine_strategy": self.fine_policy.name,
            "alpha": self.cfg.alpha,
            "fine_ratio": self.cfg.fine_ratio,
            "tau": self.cfg.global_rule.tau if isinstance(self.cfg.global_rule, RolloutThreshold) else None,
            "middle_layer": self.middle_layer,
            "fine_end_layer": self.fine_end_layer,
            "min_active": self.min_active,
            "layers": list(self.decisions),
        }


def project_schedule(total_tokens: int, after_global: int, protected: int,
                     cfg: PruneConfig, num_layers: int,
                     min_active: Optional[int] = None) -> LayerSchedule:
    """
    不运行模型，按剪枝规则推算每层token数

    Args:
        total_tokens: 序列长度 K
        after_global: 全局剪枝后的token数
        protected: 全局剪枝后受保护token数
        cfg: 剪枝配置
        num_layers: 层数
        min_active: 活动集合下限，默认 cfg.min_active 或 1

    Returns:
        LayerSchedule: 每层token数
    """
    middle = cfg.resolve_middle_layer(num_layers)
    fine_end = cfg.resolve_fine_end_layer(num_layers)
    floor_size = min_active if min_active is not None else (cfg.min_active or 1)
    if not 1 <= after_global <= total_tokens or protected > after_global:
        raise ConfigurationError(
            f"无效的调度参数: K={total_tokens}, after_global={after_global}, protected={protected}"
        )

    counts = [total_tokens] * middle
    current = after_global
    for layer in range(middle + 1, num_layers + 1):
        counts.append(current)
        if layer <= fine_end:
            current -= removal_count(current - protected, current, cfg.fine_ratio, floor_size)
    return LayerSchedule(tuple(counts))

"""
理论FLOPs统计

每层计 4nd² + 2n²d + 2ndm（注意力投影、注意力分数与加权、前馈网络），
全部使用整数运算，未剪枝的调度记为 100。只统计解码器层。
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .models import ConfigurationError, ModelConfig

FORMULA = "4*n*d^2 + 2*n^2*d + 2*n*d*m per decoder layer"
STEP_FORMULA = "4*d^2 + 2*n_keys*d + 2*d*m per decoder layer per generated token"
SCOPE = "decoder layers only"


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigurationError(f"{name} 必须是正整数, 实际为 {value!r}")


def layer_flops(n: int, d: int, m: int) -> int:
    """单层预填充FLOPs"""
    _check_dims(n=n, d=d, m=m)
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * m


def step_flops(n_keys: int, d: int, m: int) -> int:
    """单层单步解码FLOPs（一个查询对 n_keys 个键）"""
    _check_dims(n_keys=n_keys, d=d, m=m)
    return 4 * d * d + 2 * n_keys * d + 2 * d * m


@dataclass(frozen=True)
class LayerSchedule:
    """每层处理的token数"""
    counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if not counts:
            raise ConfigurationError("调度不能为空")
        if any(c < 1 for c in counts):
            raise ConfigurationError(f"每层token数必须 ≥ 1: {counts}")
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ConfigurationError(f"每层token数必须单调不增: {counts}")

    @classmethod
    def constant(cls, n: int, layers: int) -> "LayerSchedule":
        return cls((n,) * layers)

    def __len__(self) -> int:
        return len(self.counts)


@dataclass
class FlopsReport:
    """FLOPs报告"""
    per_layer: List[int]
    total: int
    vanilla_total: int
    relative: float
    config: Dict[str, Any]
    generation_total: int = 0
    vanilla_generation_total: int = 0
    formula: str = FORMULA
    scope: str = SCOPE
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "per_layer": list(self.per_layer),
            "total": self.total,
            "vanilla_total": self.vanilla_total,
            "relative": self.relative,
            "generation_total": self.generation_total,
            "vanilla_generation_total": self.vanilla_generation_total,
            "formula": self.formula,
            "scope": self.scope,
            "config": dict(self.config),
            "notes": list(self.notes),
        }


def schedule_flops(schedule: LayerSchedule, config: ModelConfig,
                   decode_steps: int = 0,
                   step_keys: Sequence[Sequence[int]] = (),
                   full_tokens: Optional[int] = None) -> FlopsReport:
    """
    计算调度的FLOPs报告

    Args:
        schedule: 每层token数
        config: 模型配置
        decode_steps: 生成步数；>0 时附带生成阶段FLOPs
        step_keys: 每个生成步每层可见的键数；为空时按预填充的调度逐步加一推算
        full_tokens: 未剪枝序列长度 K，默认取第1层的token数

    Returns:
        FlopsReport: relative 以预填充为准，vanilla 为每层都处理全部 K 个token
    """
    if len(schedule) != config.layers:
        raise ConfigurationError(
            f"调度长度 {len(schedule)} 与层数 {config.layers} 不符"
        )
    d, m = config.model_dim, config.ffn_dim
    full = schedule.counts[0] if full_tokens is None else int(full_tokens)
    if full < schedule.counts[0]:
        raise ConfigurationError(f"full_tokens={full} 小于第1层token数 {schedule.counts[0]}")

    per_layer = [layer_flops(n, d, m) for n in schedule.counts]
    total = sum(per_layer)
    vanilla_total = layer_flops(full, d, m) * config.layers
    relative = float(Fraction(100 * total, vanilla_total))

    generation_total = vanilla_generation = 0
    notes = ["prefill only"]
    if decode_steps > 0:
        if step_keys and len(step_keys) != decode_steps:
            raise ConfigurationError(f"step_keys 长度 {len(step_keys)} 与步数 {decode_steps} 不符")
        for step in range(decode_steps):
            keys = step_keys[step] if step_keys else [n + step + 1 for n in schedule.counts]
            generation_total += sum(step_flops(k, d, m) for k in keys)
            vanilla_generation += step_flops(full + step + 1, d, m) * config.layers
        notes = ["prefill relative; generation totals reported separately"]

    return FlopsReport(
        per_layer=per_layer,
        total=total,
        vanilla_total=vanilla_total,
        relative=relative,
        config={"layers": config.layers, "model_dim": d, "ffn_dim": m, "tokens": full},
        generation_total=generation_total,
        vanilla_generation_total=vanilla_generation,
        notes=notes,
    )

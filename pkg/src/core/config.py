"""
实验配置

实验文件为JSON，解析为 pydantic 的 ExperimentSpec。优先级：
命令行参数 > 配置文件 > 环境变量 AVPRUNE_SEED > 内置默认值。
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .models import (
    ConfigurationError, KeepFirstAudio, KeepFirstFrames, Layout, ModelConfig,
    PositionCutoff, PruneConfig, RolloutThreshold,
)
from .strategies import STRATEGIES
from .synthetic import SequenceRecipe

SEED_ENV = "AVPRUNE_SEED"

# 命令行参数 → 配置路径
OVERRIDE_PATHS = {
    "seed": "seed",
    "alpha": "prune.alpha",
    "middle_layer": "prune.middle_layer",
    "fine_ratio": "prune.fine_ratio",
    "strategy": "prune.strategy",
    "fine_strategy": "prune.fine_strategy",
    "cutoff": "prune.cutoff",
    "out": "output.out",
    "workers": "workers",
    "samples": "calibration.samples",
    "repetitions": "repetitions",
}

SWEEP_AXES = {
    "fine_ratio": "prune.fine_ratio",
    "strategy": "prune.strategy",
    "fine_strategy": "prune.fine_strategy",
    "middle_layer": "prune.middle_layer",
    "alpha": "prune.alpha",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class ModelSection(_Section):
    layers: int = Field(28, ge=2)
    heads: int = Field(8, ge=1)
    model_dim: int = Field(128, ge=1)
    ffn_dim: int = Field(512, ge=1)
    vocab_size: int = Field(512, ge=2)
    eos_token: int = Field(0, ge=0)

    def to_config(self, seed: int) -> ModelConfig:
        return ModelConfig(
            layers=self.layers, heads=self.heads, model_dim=self.model_dim,
            ffn_dim=self.ffn_dim, vocab_size=self.vocab_size, seed=seed,
            eos_token=self.eos_token,
        )


class SequenceSection(_Section):
    visual: int = Field(64, ge=0)
    audio: int = Field(40, ge=0)
    text: int = Field(8, ge=0)
    layout: Literal["contiguous", "frame_interleaved"] = "contiguous"
    frames: int = Field(1, ge=1)

    def to_recipe(self) -> SequenceRecipe:
        return SequenceRecipe(self.visual, self.audio, self.text, Layout(self.layout), self.frames)


class PruneSection(_Section):
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    middle_layer: Optional[int] = Field(None, ge=1)
    tau: float = 0.005
    cutoff: Union[int, Literal["auto", "none"]] = "auto"
    retention: Literal["keep_first_audio", "keep_first_frames", "none"] = "keep_first_audio"
    retention_k: Optional[int] = Field(None, ge=0)
    fine_ratio: float = Field(0.2, ge=0.0, lt=1.0)
    min_active: Optional[int] = Field(None, ge=1)
    fine_end_layer: Optional[int] = Field(None, ge=1)
    prune_during_generation: bool = False
    strategy: str = "low_informative"
    fine_strategy: str = "low_attentive"

    @field_validator("cutoff", mode="before")
    @classmethod
    def _parse_cutoff(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().isdigit():
            return int(value)
        if isinstance(value, int) and value < 0:
            raise ValueError("cutoff 必须非负")
        return value

    @field_validator("strategy", "fine_strategy")
    @classmethod
    def _known_strategy(cls, value: str) -> str:
        if value not in STRATEGIES:
            raise ValueError(f"未知的策略 {value!r}, 可选值: {', '.join(sorted(STRATEGIES))}")
        return value

    def to_config(self) -> PruneConfig:
        if self.retention == "keep_first_audio":
            retention: Any = KeepFirstAudio(10 if self.retention_k is None else self.retention_k)
        elif self.retention == "keep_first_frames":
            retention = KeepFirstFrames(4 if self.retention_k is None else self.retention_k)
        else:
            retention = None

        global_rule: Any
        if isinstance(self.cutoff, int):
            global_rule = PositionCutoff(self.cutoff)
        else:
            global_rule = RolloutThreshold(self.tau)

        return PruneConfig(
            alpha=self.alpha,
            middle_layer=self.middle_layer,
            global_rule=global_rule,
            retention=retention,
            fine_ratio=self.fine_ratio,
            min_active=self.min_active,
            fine_end_layer=self.fine_end_layer,
            prune_during_generation=self.prune_during_generation,
        )


class TaskSection(_Section):
    kind: Literal["needle", "plain"] = "needle"
    decode_steps: int = Field(8, ge=1)
    needle_position: Optional[int] = Field(None, ge=0)
    include_generation: bool = False


class CalibrationSection(_Section):
    samples: int = Field(100, ge=1)
    seed_offset: int = Field(10000, ge=0)


class OutputSection(_Section):
    out: str = "reports"
    heatmaps: bool = False
    heatmap_layers: Optional[List[int]] = None


class ExperimentSpec(_Section):
    """完整实验配置"""
    name: str = "default"
    seed: int = Field(0, ge=0)
    repetitions: int = Field(1, ge=1)
    workers: int = Field(1, ge=1)
    model: ModelSection = Field(default_factory=ModelSection)
    sequence: SequenceSection = Field(default_factory=SequenceSection)
    prune: PruneSection = Field(default_factory=PruneSection)
    task: TaskSection = Field(default_factory=TaskSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def canonical_json(self) -> str:
        """不含输出目录的规范化JSON（用于配置哈希）"""
        data = self.model_dump(mode="json")
        data.pop("output", None)
        data.pop("workers", None)
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:12]

    def model_config_for(self, seed: Optional[int] = None) -> ModelConfig:
        return self.model.to_config(self.seed if seed is None else seed)

    def with_value(self, path: str, value: Any) -> "ExperimentSpec":
        """返回修改了某个配置路径的新配置"""
        data = self.model_dump(mode="python")
        _set_path(data, path, value)
        return validate_spec(data)


def _set_path(data: Dict[str, Any], path: str, value: Any) -> None:
    keys = path.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def validate_spec(data: Mapping[str, Any]) -> ExperimentSpec:
    """
    校验配置字典

    Raises:
        ConfigurationError: 校验失败，消息包含字段路径
    """
    try:
        return ExperimentSpec.model_validate(dict(data))
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"配置无效: {details}") from None


def env_seed() -> Optional[int]:
    """读取 AVPRUNE_SEED"""
    raw = os.environ.get(SEED_ENV)
    if raw is None or not raw.strip():
        return None
    try:
        seed = int(raw.strip())
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV} 不是整数: {raw!r}") from None
    if seed < 0:
        raise ConfigurationError(f"{SEED_ENV} 必须非负: {seed}")
    return seed


def load_spec(path: Optional[Union[str, Path]] = None,
              overrides: Optional[Mapping[str, Any]] = None) -> ExperimentSpec:
    """
    加载实验配置

    Args:
        path: JSON配置文件路径
        overrides: 命令行覆盖项（键见 OVERRIDE_PATHS，值为 None 表示未指定）

    Returns:
        ExperimentSpec: 解析后的配置
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"配置文件不存在: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"配置文件不是有效的JSON: {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigurationError(f"配置文件顶层必须是对象: {path}")

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" not in overrides and "seed" not in data:
        seed = env_seed()
        if seed is not None:
            data["seed"] = seed

    for key, value in overrides.items():
        if key not in OVERRIDE_PATHS:
            raise ConfigurationError(f"未知的覆盖项: {key}")
        _set_path(data, OVERRIDE_PATHS[key], value)

    return validate_spec(data)


def default_spec() -> ExperimentSpec:
    return ExperimentSpec()


def axis_path(axis: str) -> str:
    """扫描轴名称 → 配置路径"""
    try:
        return SWEEP_AXES[axis]
    except KeyError:
        raise ConfigurationError(
            f"未知的扫描轴 {axis!r}, 可选值: {', '.join(sorted(SWEEP_AXES))}"
        ) from None

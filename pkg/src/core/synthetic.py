"""
合成序列与针头任务

按配方生成确定性的多模态token序列（视频块→音频块→文本，或按帧交错），
以及带植入检索头的针头任务，用于在小模型上检验剪枝是否保留答案。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from .models import ConfigurationError, InputError, Layout, Modality, ModelConfig, Span, TokenSequence
from .toy_model import ModelWeights, NeedleLayout, init_model, needle_layout, plant_needle_head


@dataclass(frozen=True)
class SequenceRecipe:
    """序列配方：视频 M、音频 U、文本 E 个token"""
    visual: int
    audio: int
    text: int
    layout: Layout = Layout.CONTIGUOUS
    frames: int = 1

    def __post_init__(self):
        for name in ("visual", "audio", "text"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} 必须 ≥ 0: {getattr(self, name)}")
        if self.total == 0:
            raise InputError("序列长度 K = M + U + E 不能为 0")
        if self.layout is Layout.FRAME_INTERLEAVED:
            if self.frames < 1:
                raise InputError(f"帧数必须 ≥ 1: {self.frames}")
            if self.visual % self.frames or self.audio % self.frames:
                raise InputError(
                    f"M={self.visual} 和 U={self.audio} 必须能被帧数 {self.frames} 整除"
                )

    @property
    def total(self) -> int:
        return self.visual + self.audio + self.text

    @property
    def frame_size(self) -> int:
        if self.layout is not Layout.FRAME_INTERLEAVED:
            return 0
        return (self.visual + self.audio) // self.frames

    def spans(self) -> List[Span]:
        """按排布生成模态区间"""
        spans: List[Span] = []
        cursor = 0

        def push(modality: Modality, length: int) -> None:
            nonlocal cursor
            if length > 0:
                spans.append(Span(modality, cursor, length))
                cursor += length

        if self.layout is Layout.FRAME_INTERLEAVED:
            for _ in range(self.frames):
                push(Modality.VISUAL, self.visual // self.frames)
                push(Modality.AUDIO, self.audio // self.frames)
        else:
            push(Modality.VISUAL, self.visual)
            push(Modality.AUDIO, self.audio)
        push(Modality.TEXT, self.text)
        return spans

    def to_dict(self) -> Dict[str, Any]:
        return {
            "visual": self.visual,
            "audio": self.audio,
            "text": self.text,
            "layout": self.layout.value,
            "frames": self.frames,
        }


def gen_sequence(recipe: SequenceRecipe, seed: int, vocab_size: int = 512,
                 token_range: Optional[Tuple[int, int]] = None) -> TokenSequence:
    """
    生成合成序列

    Args:
        recipe: 序列配方
        seed: 随机种子
        vocab_size: 词表大小
        token_range: token编号区间 [low, high)，默认 [1, vocab_size)

    Returns:
        TokenSequence: 合成序列
    """
    low, high = token_range if token_range is not None else (1, vocab_size)
    if not 0 <= low < high <= vocab_size:
        raise ConfigurationError(f"token区间 [{low}, {high}) 超出词表 {vocab_size}")

    rng = np.random.default_rng(seed)
    tokens = rng.integers(low, high, size=recipe.total)
    return TokenSequence(
        tokens=tuple(int(t) for t in tokens),
        spans=tuple(recipe.spans()),
        layout=recipe.layout,
        frame_size=recipe.frame_size,
    )


@dataclass(frozen=True)
class NeedleTask:
    """针头任务"""
    sequence: TokenSequence
    expected_answer_token: int
    needle_position: int
    needle_token: int


def build_needle_model(config: ModelConfig) -> Tuple[ModelWeights, NeedleLayout]:
    """初始化模型并植入针头检索头"""
    layout = needle_layout(config)
    return plant_needle_head(init_model(config), layout), layout


def gen_needle_task(recipe: SequenceRecipe, seed: int, config: ModelConfig,
                    needle_position: Optional[int] = None,
                    early_region: int = 8) -> NeedleTask:
    """
    生成针头任务

    最后一个文本token替换为查询token，needle_position 处放置针头token；
    植入检索头的模型在原始解码下的第一个生成token即为答案。

    Args:
        recipe: 序列配方（E ≥ 1）
        seed: 随机种子
        config: 模型配置
        needle_position: 针头位置，None 时在靠前区域内随机选择
        early_region: 随机选择时的靠前区域长度

    Raises:
        InputError: 没有文本token，或针头位置超出序列
    """
    if recipe.text < 1:
        raise InputError("针头任务需要至少一个文本token作为查询")
    layout = needle_layout(config)
    base = gen_sequence(recipe, seed, config.vocab_size, layout.regular_tokens)
    size = len(base)

    rng = np.random.default_rng([seed, 1])
    if needle_position is None:
        first_text = base.positions_of(Modality.TEXT)[0]
        upper = max(1, min(early_region, first_text, size - 1))
        needle_position = int(rng.integers(0, upper))
    if not 0 <= needle_position < size:
        raise InputError(f"针头位置 {needle_position} 超出序列长度 {size}")
    if needle_position == size - 1:
        raise InputError("针头位置不能与查询token重合")

    kind = int(rng.integers(0, layout.kinds))
    tokens = list(base.tokens)
    tokens[needle_position] = layout.needle_tokens[kind]
    tokens[-1] = layout.query_token

    logger.debug(f"针头任务: K={size}, 位置 {needle_position}, 种类 {kind}")
    return NeedleTask(
        sequence=TokenSequence(tuple(tokens), base.spans, base.layout, base.frame_size),
        expected_answer_token=layout.answer_tokens[kind],
        needle_position=needle_position,
        needle_token=layout.needle_tokens[kind],
    )

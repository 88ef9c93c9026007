"""
AVTRACE1 注意力轨迹文件读写

格式：8字节魔数 b"AVTRACE1"，小端 u32 的 L、H、n，随后是 L×H 个 n×n 的
小端 float32 矩阵（行主序，先按层、再按头排列）。
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from loguru import logger

from .models import ConfigurationError, TraceFormatError, TraceTruncationError, TraceValidationError
from .toy_model import AttentionTensor

MAGIC = b"AVTRACE1"
HEADER = struct.Struct("<III")
ROW_TOLERANCE = 1e-4


def expected_size(layers: int, heads: int, n: int) -> int:
    return len(MAGIC) + HEADER.size + 4 * layers * heads * n * n


def write_trace(attn: Sequence[AttentionTensor], path: Union[str, Path]) -> Path:
    """
    写出注意力轨迹

    Args:
        attn: 按层排列的注意力张量（各层头数和形状一致）
        path: 输出路径

    Returns:
        Path: 写出的文件路径
    """
    if not attn:
        raise ConfigurationError("没有可写出的注意力层")
    heads, n = attn[0].num_heads, attn[0].n
    for tensor in attn:
        if tensor.num_heads != heads or tensor.n != n:
            raise ConfigurationError(
                f"第{tensor.layer}层形状 ({tensor.num_heads}, {tensor.n}) 与 ({heads}, {n}) 不一致"
            )

    payload = np.stack([tensor.as_array() for tensor in attn]).astype("<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(HEADER.pack(len(attn), heads, n))
        handle.write(payload.tobytes(order="C"))

    logger.info(f"写出注意力轨迹: {path} (L={len(attn)}, H={heads}, n={n})")
    return path


def load_trace(path: Union[str, Path]) -> List[AttentionTensor]:
    """
    读取并校验注意力轨迹

    Raises:
        TraceFormatError: 魔数不符
        TraceTruncationError: 文件大小与头部声明不符
        TraceValidationError: 存在行和偏离 1 超过 1e-4 的行
    """
    path = Path(path)
    if not path.exists():
        raise TraceFormatError(f"轨迹文件不存在: {path}")
    raw = path.read_bytes()

    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise TraceFormatError(f"魔数不符: {raw[: len(MAGIC)]!r}")
    if len(raw) < len(MAGIC) + HEADER.size:
        raise TraceTruncationError(f"文件头不完整: {len(raw)} 字节")

    layers, heads, n = HEADER.unpack_from(raw, len(MAGIC))
    if layers < 1 or heads < 1 or n < 1:
        raise TraceFormatError(f"无效的维度: L={layers}, H={heads}, n={n}")
    expected = expected_size(layers, heads, n)
    if len(raw) != expected:
        raise TraceTruncationError(f"文件大小 {len(raw)} 字节, 期望 {expected} 字节")

    data = np.frombuffer(raw, dtype="<f4", offset=len(MAGIC) + HEADER.size)
    data = data.reshape(layers, heads, n, n).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise TraceValidationError("轨迹包含 NaN 或 Inf")

    deviation = np.abs(data.sum(axis=3) - 1.0)
    worst = np.unravel_index(int(np.argmax(deviation)), deviation.shape)
    if deviation[worst] > ROW_TOLERANCE:
        layer, head, row = (int(i) for i in worst)
        raise TraceValidationError(
            f"行和校验失败: 第{layer + 1}层 第{head}头 第{row}行, "
            f"行和 {float(data[layer, head, row].sum()):.6f}"
        )

    logger.debug(f"读取注意力轨迹: {path} (L={layers}, H={heads}, n={n})")
    return [AttentionTensor.from_array(index + 1, data[index]) for index in range(layers)]

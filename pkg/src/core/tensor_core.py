"""
数值内核

提供分析路径共用的稠密矩阵运算：矩阵乘法、按行softmax（带因果前缀掩码）
和多头平均。全部使用64位浮点数。
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .models import ConfigurationError, InputError


@dataclass(frozen=True, eq=False)
class Matrix:
    """
    只读稠密矩阵

    内部为行主序的 float64 数组，构造时检查所有元素有限。
    """
    data: np.ndarray

    def __post_init__(self):
        """转换为只读的二维 float64 数组"""
        array = np.array(self.data, dtype=np.float64, copy=True)
        if array.ndim != 2:
            raise InputError(f"矩阵必须是二维的, 实际维度为 {array.ndim}")
        if not np.all(np.isfinite(array)):
            raise InputError("矩阵包含 NaN 或 Inf")
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @classmethod
    def from_flat(cls, rows: int, cols: int, values: Sequence[float]) -> "Matrix":
        """
        从行主序的扁平数组构造矩阵

        Args:
            rows: 行数
            cols: 列数
            values: 长度为 rows × cols 的数值序列

        Returns:
            Matrix: 构造的矩阵
        """
        if len(values) != rows * cols:
            raise ConfigurationError(
                f"数据长度 {len(values)} 与形状 {rows}×{cols} 不符"
            )
        return cls(np.asarray(values, dtype=np.float64).reshape(rows, cols))

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    def row_sums(self) -> np.ndarray:
        return self.data.sum(axis=1)

    def allclose(self, other: "Matrix", atol: float = 1e-12) -> bool:
        return self.shape == other.shape and bool(
            np.allclose(self.data, other.data, rtol=0.0, atol=atol)
        )

    def to_list(self) -> List[List[float]]:
        return self.data.tolist()


def stable_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """减去最大值后的softmax，-inf 项得到精确的 0"""
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    return weights / np.sum(weights, axis=axis, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    """下三角（含对角线）为 True 的因果掩码"""
    return np.tril(np.ones((n, n), dtype=bool))


def masked_softmax(scores: np.ndarray, lengths: Optional[Iterable[int]] = None) -> np.ndarray:
    """
    数组级的按行softmax

    Args:
        scores: 最后一维为列的分数数组
        lengths: 每行可见的前缀长度；None 表示整行可见

    Returns:
        np.ndarray: 与 scores 同形状的行随机数组，掩码外的元素为 0
    """
    if lengths is None:
        return stable_softmax(scores)

    lengths = np.asarray(list(lengths), dtype=np.int64)
    cols = scores.shape[-1]
    if lengths.shape[0] != scores.shape[-2]:
        raise ConfigurationError(
            f"掩码长度个数 {lengths.shape[0]} 与行数 {scores.shape[-2]} 不符"
        )
    if np.any(lengths < 1) or np.any(lengths > cols):
        raise ConfigurationError(f"掩码长度必须在 [1, {cols}] 内")

    visible = np.arange(cols)[None, :] < lengths[:, None]
    return stable_softmax(np.where(visible, scores, -np.inf))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    稠密矩阵乘法

    Args:
        a: 左矩阵
        b: 右矩阵

    Returns:
        Matrix: a × b

    Raises:
        ConfigurationError: a.cols != b.rows
    """
    if a.cols != b.rows:
        raise ConfigurationError(f"矩阵乘法维度不匹配: {a.shape} × {b.shape}")
    return Matrix(a.data @ b.data)


def softmax_rows(m: Matrix, mask: Optional[Sequence[int]] = None) -> Matrix:
    """按行softmax，mask 给出每行的因果前缀长度"""
    return Matrix(masked_softmax(m.data, mask))


def mean_over_heads(stack: Sequence[Matrix]) -> Matrix:
    """
    多头注意力按元素求平均

    Args:
        stack: 同形状的矩阵列表

    Returns:
        Matrix: 逐元素算术平均
    """
    if not stack:
        raise ConfigurationError("多头平均需要至少一个矩阵")

    shape = stack[0].shape
    for index, head in enumerate(stack):
        if head.shape != shape:
            raise ConfigurationError(f"第{index}个头的形状 {head.shape} 与 {shape} 不符")

    total = np.zeros(shape)
    for head in stack:
        total += head.data
    return Matrix(total / len(stack))

"""
注意力累积（rollout）

把每层的多头平均注意力与恒等矩阵做凸组合以计入残差连接，
再从第1层起依次左乘，得到各输入token对后续token的累积影响。
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np
from loguru import logger

from .models import ConfigurationError
from .tensor_core import Matrix, matmul
from .toy_model import AttentionTensor


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha 必须在 [0, 1] 内: {alpha}")


def mix_residual(a: Matrix, alpha: float) -> Matrix:
    """返回 αA + (1−α)I"""
    _check_alpha(alpha)
    if a.rows != a.cols:
        raise ConfigurationError(f"注意力矩阵必须是方阵: {a.shape}")
    return Matrix(alpha * a.data + (1.0 - alpha) * np.eye(a.rows))


@dataclass(frozen=True)
class RolloutState:
    """累积到第 layer 层的 rollout 矩阵"""
    alpha: float
    layer: int
    R: Matrix

    @classmethod
    def initial(cls, n: int, alpha: float) -> "RolloutState":
        _check_alpha(alpha)
        return cls(alpha=alpha, layer=0, R=Matrix.identity(n))


def accumulate(state: RolloutState, a_next: Matrix) -> RolloutState:
    """
    累积下一层注意力

    Args:
        state: 当前状态
        a_next: 第 layer+1 层的多头平均注意力

    Returns:
        RolloutState: R' = mix(A_next) × R
    """
    if a_next.shape != state.R.shape:
        raise ConfigurationError(
            f"第{state.layer + 1}层注意力形状 {a_next.shape} 与 rollout {state.R.shape} 不符"
        )
    mixed = mix_residual(a_next, state.alpha)
    return RolloutState(state.alpha, state.layer + 1, matmul(mixed, state.R))


def rollout_at(attn: Sequence[AttentionTensor], upto_layer: int, alpha: float) -> Matrix:
    """
    计算到指定层为止的 rollout

    Args:
        attn: 按层排列的注意力张量
        upto_layer: 截止层（含），0 返回恒等矩阵
        alpha: 注意力权重

    Returns:
        Matrix: rollout 矩阵 R^upto_layer
    """
    _check_alpha(alpha)
    if not attn:
        raise ConfigurationError("注意力张量列表为空")
    if not 0 <= upto_layer <= len(attn):
        raise ConfigurationError(f"upto_layer={upto_layer} 不在 [0, {len(attn)}] 内")

    state = RolloutState.initial(attn[0].n, alpha)
    for tensor in attn[:upto_layer]:
        state = accumulate(state, tensor.head_mean())
    return state.R


def rollout_trajectory(attn: Sequence[AttentionTensor], alpha: float) -> List[Matrix]:
    """返回 R^1 … R^L 的列表"""
    _check_alpha(alpha)
    if not attn:
        return []
    state = RolloutState.initial(attn[0].n, alpha)
    trajectory: List[Matrix] = []
    for tensor in attn:
        state = accumulate(state, tensor.head_mean())
        trajectory.append(state.R)
    return trajectory


def influence_scores(r: Matrix, query_rows: Iterable[int]) -> np.ndarray:
    """
    计算每个输入token的影响分数

    第 j 列的分数为 R 在 query_rows 上第 j 列的平均值。

    Args:
        r: rollout 矩阵
        query_rows: 参与平均的行

    Returns:
        np.ndarray: 长度为 n 的分数向量
    """
    rows = sorted(set(int(i) for i in query_rows))
    if not rows:
        raise ConfigurationError("query_rows 不能为空")
    if rows[0] < 0 or rows[-1] >= r.rows:
        raise ConfigurationError(f"query_rows 超出范围 [0, {r.rows})")
    return r.data[rows].mean(axis=0)


def write_heatmap(matrix: Matrix, path: Union[str, Path]) -> Path:
    """
    导出热力图CSV

    第一行为维度 n，随后 n 行按行主序、6位有效数字写出。
    """
    if matrix.rows != matrix.cols:
        raise ConfigurationError(f"热力图需要方阵: {matrix.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, matrix.data, fmt="%.6g", delimiter=",",
               header=str(matrix.rows), comments="")
    logger.debug(f"写出热力图: {path} ({matrix.rows}×{matrix.cols})")
    return path


def read_heatmap(path: Union[str, Path]) -> Matrix:
    """读取 write_heatmap 写出的CSV"""
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        n = int(handle.readline().strip())
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (n, n):
        raise ConfigurationError(f"热力图 {path} 声明 {n}×{n}, 实际 {data.shape}")
    return Matrix(data)

"""
测试公共夹具
"""

import sys
from pathlib import Path
from typing import List

import numpy as np
import pytest

# 添加src目录到Python路径
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from core.models import ModelConfig  # noqa: E402
from core.synthetic import SequenceRecipe  # noqa: E402
from core.toy_model import AttentionTensor, init_model  # noqa: E402


def random_attention(rng: np.random.Generator, layers: int, heads: int, n: int) -> List[AttentionTensor]:
    """随机的因果、行随机注意力张量"""
    mask = np.tril(np.ones((n, n)))
    tensors = []
    for layer in range(layers):
        raw = (rng.random((heads, n, n)) + 1e-3) * mask
        tensors.append(AttentionTensor.from_array(layer + 1, raw / raw.sum(axis=2, keepdims=True)))
    return tensors


def attention_from_rows(rows: np.ndarray, layers: int = 2) -> List[AttentionTensor]:
    """每层每头都使用同一个 n×n 注意力矩阵"""
    return [AttentionTensor.from_array(layer + 1, rows[None, :, :]) for layer in range(layers)]


@pytest.fixture
def small_config() -> ModelConfig:
    return ModelConfig(layers=4, heads=4, model_dim=32, ffn_dim=64, vocab_size=128)


@pytest.fixture
def small_weights(small_config):
    return init_model(small_config)


@pytest.fixture
def small_recipe() -> SequenceRecipe:
    return SequenceRecipe(visual=16, audio=12, text=4)


@pytest.fixture
def small_spec_data(tmp_path):
    """小规模实验配置（4层、32维、几个校准样本）"""
    return {
        "name": "small",
        "seed": 3,
        "model": {"layers": 4, "heads": 4, "model_dim": 32, "ffn_dim": 64, "vocab_size": 128},
        "sequence": {"visual": 16, "audio": 12, "text": 4},
        "prune": {"retention_k": 4},
        "task": {"decode_steps": 3},
        "calibration": {"samples": 3},
        "output": {"out": str(tmp_path / "out")},
    }


@pytest.fixture
def make_attention():
    return random_attention


@pytest.fixture
def rows_attention():
    return attention_from_rows

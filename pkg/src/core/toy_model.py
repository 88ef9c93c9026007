"""
玩具音视频解码器

确定性、按种子初始化的 decoder-only 多头注意力 Transformer：
- forward_capture: 完整前向，返回每层每头的注意力矩阵（仅用于校准/分析）
- prefill / forward_pruned_step: 逐行流式注意力，只产出最后一个查询的注意力行，
  支持在预填充过程中逐层剪枝并压缩KV缓存
- generate / decode_greedy: 贪心自回归解码
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .models import (
    ActiveSet, ConfigurationError, ConsistencyError, InputError,
    ModelConfig, TokenSequence,
)
from .tensor_core import Matrix, masked_softmax, mean_over_heads, stable_softmax

RNG_NAME = "numpy.random.PCG64"
_NORM_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """单层的多头注意力矩阵（每个头 n×n，因果、行随机）"""
    layer: int
    heads: Tuple[Matrix, ...]

    @classmethod
    def from_array(cls, layer: int, array: np.ndarray) -> "AttentionTensor":
        """从 (H, n, n) 数组构造"""
        return cls(layer, tuple(Matrix(head) for head in array))

    @property
    def n(self) -> int:
        return self.heads[0].rows

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def as_array(self) -> np.ndarray:
        return np.stack([head.data for head in self.heads])

    def head_mean(self) -> Matrix:
        return mean_over_heads(self.heads)

    def worst_row(self) -> Tuple[float, int, int, float]:
        """
        查找偏离最大的行

        Returns:
            Tuple[float, int, int, float]: (偏差, 头编号, 行号, 行和)；
            因果掩码外的质量计入偏差
        """
        array = self.as_array()
        sums = array.sum(axis=2)
        deviation = np.abs(sums - 1.0)
        leak = np.abs(np.triu(array, k=1)).sum(axis=2)
        total = deviation + leak
        head, row = np.unravel_index(int(np.argmax(total)), total.shape)
        return float(total[head, row]), int(head), int(row), float(sums[head, row])


@dataclass(frozen=True, eq=False)
class LayerWeights:
    """单层权重（投影矩阵按 输入维 × 输出维 存放）"""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2)


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """只读模型权重"""
    config: ModelConfig
    embedding: np.ndarray      # V × d
    unembedding: np.ndarray    # d × V
    layers: Tuple[LayerWeights, ...]
    reserved_dims: Tuple[int, ...] = ()
    planted: Optional[str] = None

    def arrays(self) -> List[np.ndarray]:
        arrays = [self.embedding, self.unembedding]
        for layer in self.layers:
            arrays.extend(layer.arrays())
        return arrays

    def identical_to(self, other: "ModelWeights") -> bool:
        """逐位比较全部权重"""
        mine, theirs = self.arrays(), other.arrays()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def init_model(config: ModelConfig) -> ModelWeights:
    """
    初始化模型权重

    所有权重按固定顺序从以 config.seed 为种子的 PCG64 生成器中抽取，
    相同配置在任何平台上得到逐位相同的权重。

    Args:
        config: 模型配置

    Returns:
        ModelWeights: 模型权重
    """
    if not isinstance(config, ModelConfig):
        raise ConfigurationError(f"需要 ModelConfig, 实际为 {type(config).__name__}")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    d, m, vocab = config.model_dim, config.ffn_dim, config.vocab_size

    embedding = _readonly(rng.standard_normal((vocab, d)))
    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            wq=_readonly(rng.standard_normal((d, d)) / np.sqrt(d)),
            wk=_readonly(rng.standard_normal((d, d)) / np.sqrt(d)),
            wv=_readonly(rng.standard_normal((d, d)) / np.sqrt(d)),
            wo=_readonly(rng.standard_normal((d, d)) / np.sqrt(d)),
            w1=_readonly(rng.standard_normal((d, m)) / np.sqrt(d)),
            w2=_readonly(rng.standard_normal((m, d)) / np.sqrt(m)),
        ))
    unembedding = _readonly(rng.standard_normal((d, vocab)) / np.sqrt(d))

    logger.debug(
        f"初始化模型: L={config.layers}, h={config.heads}, d={d}, m={m}, "
        f"V={vocab}, seed={config.seed}"
    )
    return ModelWeights(config, embedding, unembedding, tuple(layers))


def positional_encoding(positions: np.ndarray, d: int,
                        reserved_dims: Sequence[int] = ()) -> np.ndarray:
    """正弦绝对位置编码，按原始位置编号计算（剪枝后不重新编号）"""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    angles = positions[:, None] * freqs[None, :]
    encoding = np.zeros((positions.shape[0], d))
    encoding[:, 0::2] = np.sin(angles)
    encoding[:, 1::2] = np.cos(angles[:, : d // 2])
    if len(reserved_dims):
        encoding[:, list(reserved_dims)] = 0.0
    return encoding


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)


def _token_array(weights: ModelWeights,
                 tokens: Union[TokenSequence, Sequence[int]]) -> np.ndarray:
    """校验token编号并转换为数组"""
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    array = np.asarray(list(tokens), dtype=np.int64)
    if array.size == 0:
        raise InputError("token序列为空")
    vocab = weights.config.vocab_size
    bad = array[(array < 0) | (array >= vocab)]
    if bad.size:
        raise InputError(f"token超出词表 (V={vocab}): {bad[:8].tolist()}")
    return array


def _embed(weights: ModelWeights, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
    d = weights.config.model_dim
    return weights.embedding[tokens] + positional_encoding(positions, d, weights.reserved_dims)


def _project(weights: ModelWeights, layer: LayerWeights,
             x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """计算 (n, H, dh) 形状的 Q/K/V"""
    cfg = weights.config
    n = x.shape[0]
    h = rms_norm(x)
    shape = (n, cfg.heads, cfg.head_dim)
    return (
        (h @ layer.wq).reshape(shape),
        (h @ layer.wk).reshape(shape),
        (h @ layer.wv).reshape(shape),
    )


def _finish_layer(layer: LayerWeights, x: np.ndarray, attended: np.ndarray) -> np.ndarray:
    """注意力输出投影 + 前馈网络（均带残差）"""
    x = x + attended.reshape(x.shape[0], -1) @ layer.wo
    hidden = np.maximum(rms_norm(x) @ layer.w1, 0.0)
    return x + hidden @ layer.w2


def _logits(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    return rms_norm(x) @ weights.unembedding


class AttentionAudit:
    """
    注意力形状审计钩子

    记录每个注意力块的 (层, 查询行数, 键列数)。剪枝推理路径逐行计算注意力，
    不应出现任何 n×n（n>1）的方阵。
    """

    def __init__(self):
        self.blocks: List[Tuple[int, int, int]] = []

    def record(self, layer: int, query_rows: int, key_cols: int) -> None:
        self.blocks.append((layer, query_rows, key_cols))

    @property
    def max_query_rows(self) -> int:
        return max((q for _, q, _ in self.blocks), default=0)

    @property
    def square_blocks(self) -> List[Tuple[int, int, int]]:
        return [block for block in self.blocks if block[1] == block[2] > 1]

    def assert_no_full_maps(self) -> None:
        """存在方阵注意力块时抛出 ConsistencyError"""
        squares = self.square_blocks
        if squares:
            layer, rows, cols = squares[0]
            raise ConsistencyError(
                f"推理路径生成了 {len(squares)} 个完整注意力矩阵, 例如第{layer}层 {rows}×{cols}"
            )


@dataclass(eq=False)
class CaptureResult:
    """完整前向结果（依赖完整注意力图，只能用于校准和分析）"""
    logits: np.ndarray
    attn: List[AttentionTensor]
    full_attention: bool = True


def forward_capture(weights: ModelWeights,
                    sequence: Union[TokenSequence, Sequence[int]],
                    audit: Optional[AttentionAudit] = None) -> CaptureResult:
    """
    完整前向传播并捕获注意力

    Args:
        weights: 模型权重
        sequence: token序列
        audit: 可选的形状审计钩子

    Returns:
        CaptureResult: 每个位置的logits和每层的注意力张量
    """
    cfg = weights.config
    tokens = _token_array(weights, sequence)
    n = tokens.shape[0]
    x = _embed(weights, tokens, np.arange(n))
    lengths = np.arange(1, n + 1)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    attn: List[AttentionTensor] = []
    for index, layer in enumerate(weights.layers):
        q, k, v = _project(weights, layer, x)
        scores = np.einsum("ihd,jhd->hij", q, k) * scale
        probs = masked_softmax(scores, lengths)
        if audit is not None:
            audit.record(index + 1, n, n)
        attended = np.einsum("hij,jhd->ihd", probs, v)
        x = _finish_layer(layer, x, attended)
        attn.append(AttentionTensor.from_array(index + 1, probs))

    return CaptureResult(logits=_logits(weights, x), attn=attn)


@dataclass(eq=False)
class LayerCache:
    """单层缓存：按原始位置编号索引的键值行"""
    positions: np.ndarray
    keys: np.ndarray
    values: np.ndarray


class KvCache:
    """
    KV缓存

    层编号为 0 起的下标。压缩后缓存行与该层的活动集合一一对应，
    原始位置编号保持不变。
    """

    def __init__(self, layers: List[LayerCache], next_position: int = 0):
        self.layers = layers
        self.next_position = next_position

    @classmethod
    def empty(cls, config: ModelConfig) -> "KvCache":
        shape = (0, config.heads, config.head_dim)
        return cls([
            LayerCache(np.zeros(0, dtype=np.int64), np.zeros(shape), np.zeros(shape))
            for _ in range(config.layers)
        ])

    def __len__(self) -> int:
        return len(self.layers)

    def positions(self, index: int) -> Tuple[int, ...]:
        return tuple(int(p) for p in self.layers[index].positions)

    def store(self, index: int, positions: np.ndarray,
              keys: np.ndarray, values: np.ndarray) -> None:
        self.layers[index] = LayerCache(
            np.asarray(positions, dtype=np.int64).copy(), keys.copy(), values.copy()
        )

    def append(self, index: int, position: int, key: np.ndarray, value: np.ndarray) -> None:
        entry = self.layers[index]
        self.layers[index] = LayerCache(
            np.append(entry.positions, np.int64(position)),
            np.concatenate([entry.keys, key[None]], axis=0),
            np.concatenate([entry.values, value[None]], axis=0),
        )

    def compact(self, index: int, active: ActiveSet) -> None:
        """
        按活动集合压缩某层缓存

        Args:
            index: 层下标（0起）
            active: 该层的活动集合

        Raises:
            ConsistencyError: 活动集合包含缓存中不存在的位置
        """
        entry = self.layers[index]
        wanted = np.asarray(active.indices, dtype=np.int64)
        keep = np.isin(entry.positions, wanted)
        if int(keep.sum()) != wanted.shape[0]:
            raise ConsistencyError(f"第{index + 1}层缓存缺少活动集合中的位置")
        self.layers[index] = LayerCache(
            entry.positions[keep], entry.keys[keep], entry.values[keep]
        )


class Pruner(Protocol):
    """预填充过程中由解码器调用的剪枝流水线接口"""

    prune_during_generation: bool

    def begin(self, sequence: TokenSequence, num_layers: int) -> ActiveSet:
        ...

    def after_layer(self, layer: int, active: ActiveSet, last_query_row: np.ndarray) -> ActiveSet:
        ...

    def generation_stage(self, actives: List[ActiveSet],
                         last_query_rows: Dict[int, np.ndarray]) -> List[ActiveSet]:
        ...


def _stream_layer(weights: ModelWeights, index: int, x: np.ndarray,
                  audit: Optional[AttentionAudit]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """逐查询行计算一层，只保留最后一个查询的（多头平均）注意力行"""
    layer = weights.layers[index]
    q, k, v = _project(weights, layer, x)
    scale = 1.0 / np.sqrt(weights.config.head_dim)
    n = x.shape[0]

    attended = np.empty_like(q)
    last_row = np.empty(0)
    for i in range(n):
        probs = stable_softmax(np.einsum("hd,jhd->hj", q[i], k[: i + 1]) * scale)
        if audit is not None:
            audit.record(index + 1, 1, i + 1)
        attended[i] = np.einsum("hj,jhd->hd", probs, v[: i + 1])
        if i == n - 1:
            last_row = probs.mean(axis=0)

    return _finish_layer(layer, x, attended), k, v, last_row


@dataclass(eq=False)
class PrefillResult:
    """预填充结果"""
    cache: KvCache
    layer_actives: Tuple[ActiveSet, ...]
    last_logits: np.ndarray
    last_query_rows: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def layer_counts(self) -> List[int]:
        """每层实际处理的token数"""
        return [len(active) for active in self.layer_actives]


def prefill(weights: ModelWeights, sequence: TokenSequence,
            pruner: Optional[Pruner] = None,
            audit: Optional[AttentionAudit] = None) -> PrefillResult:
    """
    逐层预填充

    第 l 层处理活动集合 A_l；剪枝器在每层结束后根据该层最后一个查询的注意力行
    给出下一层的活动集合，因此中间层的全局剪枝会影响同一次预填充的后续各层。
    """
    cfg = weights.config
    tokens = _token_array(weights, sequence)
    size = tokens.shape[0]

    if pruner is not None:
        active = pruner.begin(sequence, cfg.layers)
    else:
        active = ActiveSet.full(size, protected={size - 1})

    x = _embed(weights, tokens, np.arange(size))
    cache = KvCache.empty(cfg)
    cache.next_position = size

    layer_actives: List[ActiveSet] = []
    last_rows: Dict[int, np.ndarray] = {}
    for index in range(cfg.layers):
        layer_actives.append(active)
        x, k, v, last_row = _stream_layer(weights, index, x, audit)
        positions = np.asarray(active.indices, dtype=np.int64)
        cache.store(index, positions, k, v)
        last_rows[index + 1] = last_row

        if pruner is not None:
            next_active = pruner.after_layer(index + 1, active, last_row)
            if len(next_active) != len(active):
                x = x[np.isin(positions, np.asarray(next_active.indices, dtype=np.int64))]
            active = next_active

    return PrefillResult(
        cache=cache,
        layer_actives=tuple(layer_actives),
        last_logits=_logits(weights, x[-1:])[0],
        last_query_rows=last_rows,
    )


@dataclass(eq=False)
class StepResult:
    """单步解码结果"""
    next_logits: np.ndarray
    last_query_rows: Dict[int, np.ndarray]
    position: int


def forward_pruned_step(weights: ModelWeights, cache: KvCache, new_token: int,
                        active: Optional[Sequence[ActiveSet]] = None,
                        audit: Optional[AttentionAudit] = None,
                        score_from_layer: int = 1) -> StepResult:
    """
    剪枝缓存上的单步解码

    新token在每层只关注该层缓存中的活动行和它自身，从不构造 n×n 矩阵。
    新token的键值追加到缓存中。

    Args:
        weights: 模型权重
        cache: KV缓存（会被原地追加）
        new_token: 新输入的token
        active: 每层的活动集合，提供时与缓存逐层核对
        audit: 可选的形状审计钩子
        score_from_layer: 从该层（1起）开始输出最后查询的注意力行

    Returns:
        StepResult: 下一个token的logits和各层的多头平均注意力行

    Raises:
        ConsistencyError: 缓存与活动集合不一致
    """
    cfg = weights.config
    if len(cache) != cfg.layers:
        raise ConsistencyError(f"缓存层数 {len(cache)} 与模型层数 {cfg.layers} 不符")
    if active is not None:
        if len(active) != cfg.layers:
            raise ConsistencyError(f"活动集合层数 {len(active)} 与模型层数 {cfg.layers} 不符")
        for index, layer_active in enumerate(active):
            if cache.positions(index) != layer_active.indices:
                raise ConsistencyError(f"第{index + 1}层缓存与活动集合不一致")

    token = _token_array(weights, [new_token])
    position = cache.next_position
    x = _embed(weights, token, np.array([position]))
    scale = 1.0 / np.sqrt(cfg.head_dim)

    rows: Dict[int, np.ndarray] = {}
    for index, layer in enumerate(weights.layers):
        q, k, v = _project(weights, layer, x)
        cache.append(index, position, k[0], v[0])
        entry = cache.layers[index]
        probs = stable_softmax(np.einsum("hd,jhd->hj", q[0], entry.keys) * scale)
        if audit is not None:
            audit.record(index + 1, 1, entry.keys.shape[0])
        attended = np.einsum("hj,jhd->hd", probs, entry.values)[None]
        x = _finish_layer(layer, x, attended)
        if index + 1 >= score_from_layer:
            rows[index + 1] = probs.mean(axis=0)

    cache.next_position = position + 1
    return StepResult(next_logits=_logits(weights, x)[0], last_query_rows=rows, position=position)


@dataclass(eq=False)
class DecodeResult:
    """解码结果"""
    tokens: List[int]
    layer_counts: List[int]
    final_actives: List[ActiveSet]
    first_logits: np.ndarray
    step_keys: List[List[int]] = field(default_factory=list)


def generate(weights: ModelWeights, sequence: TokenSequence, max_steps: int,
             pruner: Optional[Pruner] = None,
             audit: Optional[AttentionAudit] = None) -> DecodeResult:
    """
    贪心自回归解码

    剪枝决策只在预填充上做出；默认情况下生成阶段缓存保持冻结，
    剪枝器开启 prune_during_generation 时每步继续做细粒度剪枝。
    """
    if max_steps < 1:
        raise ConfigurationError(f"max_steps 必须 ≥ 1: {max_steps}")

    eos = weights.config.eos_token
    result = prefill(weights, sequence, pruner, audit)
    cache = result.cache
    actives = list(result.layer_actives)
    logits = result.last_logits

    generated: List[int] = []
    step_keys: List[List[int]] = []
    for step in range(max_steps):
        token = int(np.argmax(logits))
        generated.append(token)
        if token == eos or step == max_steps - 1:
            break

        step_result = forward_pruned_step(weights, cache, token, actives, audit)
        actives = [layer_active.extended(step_result.position) for layer_active in actives]
        step_keys.append([len(layer_active) for layer_active in actives])
        if pruner is not None and pruner.prune_during_generation:
            actives = pruner.generation_stage(actives, step_result.last_query_rows)
            for index, layer_active in enumerate(actives):
                cache.compact(index, layer_active)
        logits = step_result.next_logits

    return DecodeResult(
        tokens=generated,
        layer_counts=result.layer_counts,
        final_actives=actives,
        first_logits=result.last_logits,
        step_keys=step_keys,
    )


def decode_greedy(weights: ModelWeights, sequence: TokenSequence, max_steps: int,
                  pruner: Optional[Pruner] = None) -> List[int]:
    """贪心解码，返回生成的token编号"""
    return generate(weights, sequence, max_steps, pruner).tokens


@dataclass(frozen=True)
class NeedleLayout:
    """
    针头任务的词表和残差子空间划分

    保留维度只被植入的注意力头读写，随机权重在这些维度上为零。
    """
    kinds: int
    query_token: int
    needle_tokens: Tuple[int, ...]
    answer_tokens: Tuple[int, ...]
    query_flag_dim: int
    key_flag_dim: int
    code_dims: Tuple[int, ...]
    answer_dims: Tuple[int, ...]

    @property
    def reserved_dims(self) -> Tuple[int, ...]:
        return tuple(sorted(
            (self.query_flag_dim, self.key_flag_dim) + self.code_dims + self.answer_dims
        ))

    @property
    def regular_tokens(self) -> Tuple[int, int]:
        """普通token的编号区间 [low, high)"""
        return self.kinds + 1, self.needle_tokens[0]


def needle_layout(config: ModelConfig, max_kinds: int = 8) -> NeedleLayout:
    """为给定模型配置分配针头任务所需的token和维度"""
    kinds = min(max_kinds, config.head_dim - 1)
    d, vocab = config.model_dim, config.vocab_size
    if kinds < 1:
        raise ConfigurationError(f"针头任务需要 head_dim ≥ 2, 实际为 {config.head_dim}")
    if 2 + 2 * kinds > d // 2:
        raise ConfigurationError(f"model_dim={d} 太小, 无法容纳 {kinds} 种针头")
    if vocab < 2 * kinds + 4:
        raise ConfigurationError(f"vocab_size={vocab} 太小, 无法容纳 {kinds} 种针头")

    answer_tokens = tuple(range(1, kinds + 1))
    if config.eos_token in answer_tokens or config.eos_token >= vocab - kinds - 1:
        raise ConfigurationError(f"eos_token={config.eos_token} 与针头任务的token冲突")

    return NeedleLayout(
        kinds=kinds,
        query_token=vocab - 1,
        needle_tokens=tuple(range(vocab - 1 - kinds, vocab - 1)),
        answer_tokens=answer_tokens,
        query_flag_dim=d - 1,
        key_flag_dim=d - 2,
        code_dims=tuple(d - 3 - k for k in range(kinds)),
        answer_dims=tuple(d - 3 - kinds - k for k in range(kinds)),
    )


def plant_needle_head(weights: ModelWeights, layout: NeedleLayout,
                      qk_gain: float = 4.0, out_gain: float = 40.0,
                      readout_gain: float = 8.0) -> ModelWeights:
    """
    植入针头检索头

    每层第0个头上，查询token只关注针头token，因此针头在最后查询的注意力行中得分最高；
    只有最后一层的该头把针头种类写入答案维度，反嵌入再把答案维度映射到对应的答案token。
    答案只能经由最后一层的KV缓存读到：针头在此之前被剪枝时，第一个生成token不再由针头决定。

    Returns:
        ModelWeights: 新的权重（原权重不变）
    """
    cfg = weights.config
    d, head_dim = cfg.model_dim, cfg.head_dim
    reserved = list(layout.reserved_dims)
    flag = 4.0 * np.sqrt(d)
    readout_layer = cfg.layers - 1

    embedding = weights.embedding.copy()
    embedding[:, reserved] = 0.0
    embedding[layout.query_token] = 0.0
    embedding[layout.query_token, layout.query_flag_dim] = flag
    for kind, token in enumerate(layout.needle_tokens):
        embedding[token] = 0.0
        embedding[token, layout.key_flag_dim] = flag
        embedding[token, layout.code_dims[kind]] = flag

    head = slice(0, head_dim)
    layers = []
    for index, layer in enumerate(weights.layers):
        wq, wk, wv, wo, w1, w2 = (array.copy() for array in layer.arrays())
        for array in (wq, wk, wv, w1):
            array[reserved, :] = 0.0
        for array in (wo, w2):
            array[:, reserved] = 0.0

        wq[:, head] = 0.0
        wk[:, head] = 0.0
        wv[:, head] = 0.0
        wo[head, :] = 0.0
        wq[layout.query_flag_dim, 0] = qk_gain
        wk[layout.key_flag_dim, 0] = qk_gain
        if index == readout_layer:
            for kind in range(layout.kinds):
                wv[layout.code_dims[kind], 1 + kind] = 1.0
                wo[1 + kind, layout.answer_dims[kind]] = out_gain

        layers.append(LayerWeights(*(_readonly(a) for a in (wq, wk, wv, wo, w1, w2))))

    unembedding = weights.unembedding.copy()
    unembedding[reserved, :] = 0.0
    for kind in range(layout.kinds):
        unembedding[layout.answer_dims[kind], layout.answer_tokens[kind]] = readout_gain

    logger.debug(
        f"植入针头检索头: {layout.kinds} 种针头, 保留 {len(reserved)} 个维度, "
        f"读出层 {readout_layer + 1}"
    )
    return replace(
        weights,
        embedding=_readonly(embedding),
        unembedding=_readonly(unembedding),
        layers=tuple(layers),
        reserved_dims=tuple(reserved),
        planted=f"needle-head@layer{readout_layer + 1}/head0",
    )

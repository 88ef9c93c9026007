"""
核心功能模块

包含玩具解码器、注意力累积、两阶段剪枝、FLOPs统计和实验流水线。
"""

from .models import (
    Modality, Layout, Span, TokenSequence, ModelConfig, PruneConfig, ActiveSet,
    PositionCutoff, RolloutThreshold, KeepFirstAudio, KeepFirstFrames,
    AVPruneError, ConfigurationError, InputError, ConsistencyError,
    TraceFormatError, TraceTruncationError, TraceValidationError, CalibrationWarning,
)
from .tensor_core import Matrix, matmul, softmax_rows, mean_over_heads
from .toy_model import (
    AttentionTensor, AttentionAudit, ModelWeights, KvCache,
    init_model, forward_capture, forward_pruned_step, prefill, generate, decode_greedy,
)
from .rollout import RolloutState, mix_residual, accumulate, rollout_at, influence_scores
from .strategies import SelectionPolicy, strategy_variant
from .pruning import (
    ImportanceScores, CalibrationResult, TwoStagePruner,
    calibrate_global, apply_global, fine_scores, apply_fine, project_schedule,
)
from .flops import LayerSchedule, FlopsReport, layer_flops, schedule_flops
from .synthetic import SequenceRecipe, NeedleTask, gen_sequence, gen_needle_task
from .trace_io import load_trace, write_trace
from .config import ExperimentSpec, load_spec
from .pipeline import ExperimentPipeline

__all__ = [
    # 数据模型
    'Modality', 'Layout', 'Span', 'TokenSequence', 'ModelConfig', 'PruneConfig', 'ActiveSet',
    'PositionCutoff', 'RolloutThreshold', 'KeepFirstAudio', 'KeepFirstFrames',

    # 异常类
    'AVPruneError', 'ConfigurationError', 'InputError', 'ConsistencyError',
    'TraceFormatError', 'TraceTruncationError', 'TraceValidationError', 'CalibrationWarning',

    # 数值与模型
    'Matrix', 'matmul', 'softmax_rows', 'mean_over_heads',
    'AttentionTensor', 'AttentionAudit', 'ModelWeights', 'KvCache',
    'init_model', 'forward_capture', 'forward_pruned_step', 'prefill', 'generate', 'decode_greedy',

    # 注意力累积与剪枝
    'RolloutState', 'mix_residual', 'accumulate', 'rollout_at', 'influence_scores',
    'SelectionPolicy', 'strategy_variant',
    'ImportanceScores', 'CalibrationResult', 'TwoStagePruner',
    'calibrate_global', 'apply_global', 'fine_scores', 'apply_fine', 'project_schedule',
    'LayerSchedule', 'FlopsReport', 'layer_flops', 'schedule_flops',

    # 实验
    'SequenceRecipe', 'NeedleTask', 'gen_sequence', 'gen_needle_task',
    'load_trace', 'write_trace', 'ExperimentSpec', 'load_spec', 'ExperimentPipeline',
]

"""
数据模型测试
"""

import pytest

from core.models import (
    ActiveSet, ConfigurationError, ConsistencyError, InputError, KeepFirstAudio, Layout,
    Modality, ModelConfig, PositionCutoff, PruneConfig, Span, TokenSequence,
)


def test_sequence_spans_must_cover():
    with pytest.raises(InputError):
        TokenSequence((1, 2, 3), (Span(Modality.VISUAL, 0, 2),))
    with pytest.raises(InputError):
        TokenSequence((1, 2), (Span(Modality.VISUAL, 1, 1),))


def test_sequence_extended_adds_generated_span():
    sequence = TokenSequence((5, 6), (Span(Modality.VISUAL, 0, 1), Span(Modality.TEXT, 1, 1)))
    extended = sequence.extended(9).extended(10)
    assert extended.spans[-1] == Span(Modality.GENERATED, 2, 2)
    assert extended.modality_at(3) is Modality.GENERATED
    assert len(sequence) == 2


def test_interleaved_needs_frame_size():
    with pytest.raises(InputError):
        TokenSequence((1,), (Span(Modality.VISUAL, 0, 1),), Layout.FRAME_INTERLEAVED)


def _interleaved(spans, frame_size=3):
    size = spans[-1].end
    return TokenSequence(tuple(range(1, size + 1)), tuple(spans), Layout.FRAME_INTERLEAVED, frame_size)


def test_interleaved_frames():
    v, a, t = Modality.VISUAL, Modality.AUDIO, Modality.TEXT
    sequence = _interleaved([Span(v, 0, 2), Span(a, 2, 1), Span(v, 3, 2), Span(a, 5, 1), Span(t, 6, 2)])
    assert sequence.frames() == [(0, 3), (3, 6)]
    assert sequence.extended(9).frames() == [(0, 3), (3, 6)]


@pytest.mark.parametrize("spans", [
    # 帧内先音频后视频
    [(Modality.AUDIO, 1), (Modality.VISUAL, 2), (Modality.AUDIO, 1), (Modality.VISUAL, 2)],
    # 同一模态相邻
    [(Modality.VISUAL, 2), (Modality.VISUAL, 1), (Modality.VISUAL, 2), (Modality.AUDIO, 1)],
    # 区间跨越帧边界
    [(Modality.VISUAL, 4), (Modality.AUDIO, 2)],
    # 各帧结构不同
    [(Modality.VISUAL, 2), (Modality.AUDIO, 1), (Modality.VISUAL, 1), (Modality.AUDIO, 2)],
    # 最后一帧不完整
    [(Modality.VISUAL, 2), (Modality.AUDIO, 1), (Modality.VISUAL, 2)],
    # 音视频区间被文本隔开
    [(Modality.VISUAL, 2), (Modality.AUDIO, 1), (Modality.TEXT, 1), (Modality.VISUAL, 2), (Modality.AUDIO, 1)],
])
def test_interleaved_rejects_malformed_frames(spans):
    built, cursor = [], 0
    for modality, length in spans:
        built.append(Span(modality, cursor, length))
        cursor += length
    with pytest.raises(InputError):
        _interleaved(built)


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(layers=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(heads=3, model_dim=16)
    assert ModelConfig(layers=28).middle_layer == 14


def test_prune_config_validation():
    with pytest.raises(ConfigurationError):
        PruneConfig(fine_ratio=1.0)
    with pytest.raises(ConfigurationError):
        PruneConfig(alpha=-0.1)
    with pytest.raises(ConfigurationError):
        PruneConfig(middle_layer=9).resolve_middle_layer(8)
    with pytest.raises(ConfigurationError):
        PositionCutoff(-1)
    with pytest.raises(ConfigurationError):
        KeepFirstAudio(-2)


def test_prune_config_resolution():
    cfg = PruneConfig()
    assert cfg.resolve_middle_layer(28) == 14
    assert cfg.resolve_fine_end_layer(28) == 28
    assert cfg.to_dict()["retention"] == {"kind": "keep_first_audio", "k": 10}


class TestActiveSet:

    def test_strictly_increasing(self):
        with pytest.raises(ConsistencyError):
            ActiveSet((0, 2, 2))

    def test_protected_must_be_active(self):
        with pytest.raises(ConsistencyError):
            ActiveSet((0, 1), frozenset({3}))

    def test_cannot_remove_protected(self):
        active = ActiveSet.full(4, protected={3})
        with pytest.raises(ConsistencyError):
            active.without([3])
        assert active.without([1]).indices == (0, 2, 3)

    def test_extended_protects_new_position(self):
        active = ActiveSet((0, 4)).extended(7)
        assert active.last == 7
        assert 7 in active.protected
        with pytest.raises(ConsistencyError):
            active.extended(5)

    def test_prunable(self):
        assert ActiveSet.full(4, protected={0, 3}).prunable == (1, 2)

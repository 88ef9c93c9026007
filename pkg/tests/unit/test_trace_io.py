"""
AVTRACE1 轨迹文件测试
"""

import numpy as np
import pytest

from core.models import TraceFormatError, TraceTruncationError, TraceValidationError
from core.trace_io import HEADER, MAGIC, expected_size, load_trace, write_trace


def test_round_trip(tmp_path, make_attention):
    attn = make_attention(np.random.default_rng(0), 3, 2, 6)
    path = write_trace(attn, tmp_path / "trace.avt")
    assert path.stat().st_size == expected_size(3, 2, 6)

    loaded = load_trace(path)
    assert len(loaded) == 3
    for original, restored in zip(attn, loaded):
        np.testing.assert_allclose(restored.as_array(), original.as_array(), atol=1e-6)


def test_truncated_file(tmp_path, make_attention):
    path = write_trace(make_attention(np.random.default_rng(1), 2, 1, 4), tmp_path / "t.avt")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(TraceTruncationError):
        load_trace(path)


def test_bad_magic(tmp_path, make_attention):
    path = write_trace(make_attention(np.random.default_rng(2), 1, 1, 3), tmp_path / "t.avt")
    path.write_bytes(b"XXTRACE1" + path.read_bytes()[len(MAGIC):])
    with pytest.raises(TraceFormatError) as excinfo:
        load_trace(path)
    assert not isinstance(excinfo.value, TraceTruncationError)


def test_missing_file(tmp_path):
    with pytest.raises(TraceFormatError):
        load_trace(tmp_path / "missing.avt")


def test_row_sum_violation(tmp_path):
    data = np.stack([np.eye(3)[None], np.eye(3)[None]]).astype("<f4")
    data[1, 0, 2, 2] = 0.5
    path = tmp_path / "bad.avt"
    path.write_bytes(MAGIC + HEADER.pack(2, 1, 3) + data.tobytes())
    with pytest.raises(TraceValidationError, match="第2层"):
        load_trace(path)

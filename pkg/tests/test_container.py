import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskjepa import container
from deskjepa.container import ContainerError


def test_header_layout_is_little_endian():
    v = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    buf = container.encode(v)
    assert buf[:4] == b"ECV1"
    assert struct.unpack("<3I", buf[4:16]) == (2, 3, 4)
    assert len(buf) == 16 + 4 * 24
    np.testing.assert_array_equal(np.frombuffer(buf[16:], dtype="<f4"), v.ravel())


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6, width=32)))
@settings(max_examples=40, deadline=None)
def test_clip_roundtrip(v):
    out, tensors = container.decode(container.encode(v))
    np.testing.assert_array_equal(out, v)
    assert tensors == {}


def test_tensor_section_roundtrip(tmp_path):
    tensors = {"a.weight": np.ones((3, 2)), "scalar": np.float32(2.5), "näme": np.arange(4.0)}
    container.write(tmp_path / "c.ecv", tensors=tensors)
    video, back = container.read(tmp_path / "c.ecv")
    assert video is None
    assert back.keys() == tensors.keys()
    for k in tensors:
        np.testing.assert_array_equal(back[k], np.asarray(tensors[k], dtype=np.float32))


def test_clip_with_tensors():
    v = np.zeros((2, 2, 2), np.float32)
    video, t = container.decode(container.encode(v, {"x": np.ones(3)}))
    assert video.shape == (2, 2, 2) and t["x"].tolist() == [1, 1, 1]


def test_bad_magic():
    with pytest.raises(ContainerError, match="magic"):
        container.decode(b"XXXX" + bytes(12))


def test_truncated_payload():
    buf = container.encode(np.ones((2, 2, 2), np.float32))
    with pytest.raises(ContainerError, match="header says"):
        container.decode(buf[:-4])


def test_non_finite_rejected():
    with pytest.raises(ContainerError, match="non-finite"):
        container.encode(np.full((1, 2, 2), np.nan, np.float32))


def test_wrong_rank_rejected():
    with pytest.raises(ContainerError):
        container.encode(np.ones((2, 2), np.float32))


def test_read_clip_requires_payload(tmp_path):
    container.write(tmp_path / "t.ecv", tensors={"a": np.ones(1)})
    with pytest.raises(ContainerError, match="no clip"):
        container.read_clip(tmp_path / "t.ecv")

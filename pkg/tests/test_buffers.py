import pytest
from hypothesis import given, strategies as st

from gitshield.buffers import (BufferedFile, BufferSet, StageIndex, apply_write, serve_read)
from gitshield.errors import ConfigError, IntegrityError
from gitshield.objects import EMPTY_BLOB_ID


def buf(data=b""):
    return BufferedFile("p", bytearray(data), EMPTY_BLOB_ID)


@given(st.binary(max_size=200), st.integers(0, 300), st.binary(max_size=100))
def test_apply_write_matches_bytearray_model(initial, offset, data):
    b = buf(initial)
    model = bytearray(initial)
    if data:
        if offset > len(model):
            model.extend(bytes(offset - len(model)))
        model[offset:offset + len(data)] = data
    assert apply_write(b, offset, data) == len(data)
    assert b.content == model
    assert b.dirty == bool(data)


@given(st.binary(max_size=100), st.integers(0, 150), st.integers(-1, 150))
def test_serve_read(data, offset, length):
    expected = data[offset:offset + length] if length > 0 else b""
    assert serve_read(buf(data), offset, length) == expected


def test_stage_roundtrip():
    s = StageIndex({"b": ("1" * 40, "100644"), "a/c": ("2" * 40, "100644")})
    assert StageIndex.parse(s.serialize()) == s
    assert s.paths() == ["a/c", "b"]


@pytest.mark.parametrize("data", [b"a\tb\n", b"p\t" + b"z" * 40 + b"\t100644\n", b"\xff\n",
                                  b"p\t" + b"1" * 40 + b"\t100644\np\t" + b"1" * 40 + b"\t100644\n"])
def test_stage_parse_rejects(data):
    with pytest.raises(IntegrityError):
        StageIndex.parse(data)


def test_buffer_cap():
    bs = BufferSet(10)
    bs.add(buf(b"12345"))
    with pytest.raises(ConfigError):
        bs.check_cap(6)
    b2 = BufferedFile("q", bytearray(b"123456"), EMPTY_BLOB_ID)
    with pytest.raises(ConfigError):
        bs.add(b2)
    assert "q" not in bs

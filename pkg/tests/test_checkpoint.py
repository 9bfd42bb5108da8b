import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uhkd import checkpoint
from uhkd.checkpoint import CheckpointError


def test_byte_layout():
    buf = checkpoint.encode(OrderedDict([("w", np.array([[1.0, 2.0]]))]))
    assert buf[:8] == b"UHKDCKPT"
    assert struct.unpack_from("<II", buf, 8) == (1, 1)
    assert struct.unpack_from("<H", buf, 16) == (1,)
    assert buf[18:19] == b"w"
    assert struct.unpack_from("<I2Q", buf, 19) == (2, 1, 2)
    assert struct.unpack_from("<2d", buf, 39) == (1.0, 2.0)
    assert len(buf) == 39 + 16 + 4
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])


names = st.text(st.characters(min_codepoint=48, max_codepoint=0x2FF), min_size=1, max_size=12)


@given(st.dictionaries(names, hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                         elements=st.floats(allow_nan=False)), max_size=4))
def test_round_trip_is_exact(entries):
    back = checkpoint.decode(checkpoint.encode(entries))
    assert list(back) == list(entries)
    for k, v in entries.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_corruption_and_truncation_are_detected():
    buf = bytearray(checkpoint.encode({"a": np.arange(4.0)}))
    buf[30] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.decode(bytes(buf))
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"NOTACKPT" + bytes(16))
    good = checkpoint.encode({"a": np.arange(4.0)})
    with pytest.raises(CheckpointError):
        checkpoint.decode(good[:-12] + struct.pack("<I", zlib.crc32(good[:-12])))


def test_save_load_with_sidecar(tmp_path):
    digest = checkpoint.save(tmp_path / "m.ckpt", {"x": np.eye(2)}, {"kind": "student"})
    entries, meta = checkpoint.load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(entries["x"], np.eye(2))
    assert meta == {"kind": "student"}
    assert checkpoint.file_digest(tmp_path / "m.ckpt") == digest

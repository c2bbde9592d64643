import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from retro import checkpoint
from retro.checkpoint import CheckpointError, CorruptCheckpointError, UnsupportedVersionError
from retro.memory_bank import MemoryBank

from conftest import tiny_teacher

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@given(st.dictionaries(names, arrays, max_size=5))
def test_encode_decode_round_trip(tensors):
    blob = checkpoint.encode(tensors)
    out = checkpoint.decode(blob)
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].shape == v.shape and out[k].tobytes() == v.tobytes()
    assert checkpoint.encode(out) == blob


def test_header_layout():
    blob = checkpoint.encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert blob[:4] == b"RTRO"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,)
    assert blob[16:17] == b"w"
    assert struct.unpack_from("<IQQB", blob, 17) == (2, 2, 3, 0)
    payload = blob[17 + 21:-4]
    assert np.frombuffer(payload, "<f4").tolist() == list(range(6))
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(payload)


def test_corruption_is_detected():
    blob = bytearray(checkpoint.encode({"a": np.ones(4, np.float32)}))
    blob[-6] ^= 0x01
    with pytest.raises(CorruptCheckpointError, match="CRC"):
        checkpoint.decode(bytes(blob))
    with pytest.raises(CorruptCheckpointError, match="bytes"):
        checkpoint.decode(checkpoint.encode({"a": np.ones(4, np.float32)})[:-3])


def test_header_errors():
    good = checkpoint.encode({"a": np.ones(2, np.float32)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + good[4:])
    with pytest.raises(UnsupportedVersionError):
        checkpoint.decode(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(CheckpointError, match="manifest"):
        checkpoint.decode(good[:8] + struct.pack("<I", 5) + good[12:])


def test_duplicate_names_rejected():
    one = checkpoint.encode({"a": np.ones(1, np.float32)})
    entry = one[12:12 + 4 + 1 + 4 + 8 + 1]
    payload = np.ones(2, "<f4").tobytes()
    blob = b"RTRO" + struct.pack("<II", 1, 2) + entry * 2 + payload + struct.pack("<I", zlib.crc32(payload))
    with pytest.raises(CheckpointError, match="duplicate"):
        checkpoint.decode(blob)


def test_prefix_selects_a_subset(tmp_path):
    net = tiny_teacher()
    bank = MemoryBank(5, 16, 0, "v_prime")
    tensors = checkpoint.collect(net.state(), "student.", banks=[bank])
    checkpoint.save(tmp_path / "c.rtro", tensors)
    loaded = checkpoint.load(tmp_path / "c.rtro", prefix="student.encoder.")
    assert set(loaded) == {"student." + n for n in net.state() if n.startswith("encoder.")}
    banks = checkpoint.load(tmp_path / "c.rtro", prefix="bank.")
    assert set(banks) == {"bank.v_prime.keys", "bank.v_prime.write_ptr"}
    restored = tiny_teacher(seed=9)
    restored.load_state(checkpoint.strip_prefix(checkpoint.load(tmp_path / "c.rtro"), "student."))
    for k, v in net.state().items():
        assert restored.state()[k].tobytes() == v.tobytes()
    assert not list(tmp_path.glob("*.tmp"))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinyssl import checkpoint as ckpt


def payload(r):
    tensors = {}
    for k in range(int(r.integers(0, 5))):
        shape = tuple(int(d) for d in r.integers(0, 4, r.integers(0, 4)))
        dt = [np.float32, np.float64][int(r.integers(0, 2))]
        tensors[f"t{k}.w" + "é" * int(r.integers(0, 2))] = r.standard_normal(shape).astype(dt)
    return tensors, {"epoch": int(r.integers(0, 100)), "tag": "x" * int(r.integers(0, 5)), "nested": {"a": [1, 2]}}


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31 - 1))
def test_round_trip_bit_exact(seed):
    tensors, meta = payload(np.random.default_rng(seed))
    buf = ckpt.encode(tensors, meta)
    back, meta2 = ckpt.decode(buf)
    assert meta2 == meta and list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert ckpt.encode(back, meta2) == buf


def test_file_round_trip(tmp_path, rng):
    p = tmp_path / "a.tdck"
    ckpt.save(p, {"w": rng.standard_normal((2, 3)).astype(np.float32)}, {"k": 1})
    t, m = ckpt.load(p)
    assert m == {"k": 1} and t["w"].shape == (2, 3)
    assert not (tmp_path / "a.tdck.tmp").exists()


def test_corruption_is_reported(rng):
    buf = ckpt.encode({"w": np.ones((4, 4), np.float32)}, {})
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.decode(b"NOPE" + buf[4:])
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.decode(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(ckpt.CheckpointError, match="truncated while reading payload of 'w'"):
        ckpt.decode(buf[:-3])
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.decode(buf + b"\0")
    with pytest.raises(ckpt.CheckpointError, match="dtype"):
        ckpt.encode({"i": np.arange(3)}, {})

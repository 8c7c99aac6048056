import os
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinyssl.augment import resample_box
from tinyssl.data import synth_dataset_generate
from tinyssl.teacher import (StoreCorruptError, StoreFormatError, TeacherFeatureRecord, TeacherStore,
                             lookup_stage_aligned, read_store, synth_teacher_generate, write_store)

DIMS = [(4, 4), (2, 2), (1, 1)]


def records(rng, n=3, cls_dim=8, c=5, dims=DIMS, ids=None):
    ids = ids if ids is not None else range(n)
    return [TeacherFeatureRecord(int(i), rng.standard_normal(cls_dim).astype(np.float32),
                                 [rng.standard_normal((c, h, w)).astype(np.float32) for h, w in dims])
            for i in ids]


def test_round_trip_bit_exact(tmp_path, rng):
    recs = records(rng, ids=[10, 3, 2 ** 40])
    p = tmp_path / "t.tfst"
    write_store(p, recs)
    store = read_store(p)
    assert len(store) == 3 and store.cls_dim == 8
    for r in recs:
        got = store.lookup(r.image_id)
        assert got.cls.tobytes() == r.cls.tobytes()
        assert all(a.tobytes() == b.tobytes() for a, b in zip(got.stages, r.stages))


def test_file_length_matches_header_prediction(tmp_path, rng):
    p = tmp_path / "t.tfst"
    write_store(p, records(rng, n=4))
    header = 20 + 12 * 3
    per_record = 4 * (8 + 5 * (16 + 4 + 1))
    assert os.path.getsize(p) == header + 16 * 4 + 4 * per_record


def test_duplicate_and_mismatched_records_rejected(tmp_path, rng):
    with pytest.raises(StoreFormatError, match="duplicate image_id 7"):
        write_store(tmp_path / "a", records(rng, ids=[7, 7]))
    bad = records(rng, n=2)
    bad[1].stages[0] = bad[1].stages[0][:, :3]
    with pytest.raises(StoreFormatError):
        write_store(tmp_path / "b", bad)


def test_wrong_magic_truncation_and_missing_ids(tmp_path, rng):
    p = tmp_path / "t.tfst"
    write_store(p, records(rng))
    raw = p.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(StoreFormatError, match="magic"):
        TeacherStore(tmp_path / "magic")
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(StoreCorruptError, match="byte"):
        TeacherStore(tmp_path / "short")
    (tmp_path / "ver").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(StoreFormatError, match="version"):
        TeacherStore(tmp_path / "ver")
    with pytest.raises(KeyError):
        TeacherStore(p).lookup(999)


def test_cls_only_store_is_legal(tmp_path, rng):
    p = tmp_path / "cls.tfst"
    write_store(p, records(rng, dims=[]))
    store = TeacherStore(p)
    assert store.stage_dims == [] and store.lookup(1).stages == []


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 4), st.integers(1, 6))
def test_round_trip_randomized(seed, n, c):
    import tempfile
    r = np.random.default_rng(seed)
    dims = [tuple(int(v) for v in r.integers(1, 4, 2)) for _ in range(3)]
    recs = records(r, n=n, cls_dim=int(r.integers(1, 9)), c=c, dims=dims,
                   ids=r.choice(2 ** 32, n, replace=False))
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "s.tfst")
        write_store(p, recs)
        store = TeacherStore(p)
        for rec in recs:
            got = store.lookup(rec.image_id)
            assert got.cls.tobytes() == rec.cls.tobytes()
            assert all(a.tobytes() == b.tobytes() for a, b in zip(got.stages, rec.stages))


def test_concurrent_readers_agree(tmp_path, rng):
    p = tmp_path / "t.tfst"
    recs = records(rng, n=20)
    write_store(p, recs)
    store = TeacherStore(p)
    errors = []

    def reader(offset):
        for k in range(200):
            r = recs[(k + offset) % 20]
            if store.lookup(r.image_id).cls.tobytes() != r.cls.tobytes():
                errors.append(r.image_id)

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_lookup_stage_aligned(tmp_path, rng):
    p = tmp_path / "t.tfst"
    recs = records(rng, dims=[(14, 14), (7, 7), (4, 4)])
    recs[0].stages[0][:] = 0.75
    write_store(p, recs)
    store = TeacherStore(p)
    same = lookup_stage_aligned(store, 1, [(14, 14), (7, 7), (4, 4)])
    assert all(a.tobytes() == b.tobytes() for a, b in zip(same, recs[1].stages))
    up = lookup_stage_aligned(store, 0, [(16, 16), (8, 8), (4, 4)])
    assert up[0].shape == (5, 16, 16) and np.allclose(up[0], 0.75, atol=1e-6)
    with pytest.raises(KeyError):
        lookup_stage_aligned(store, 12345, [(1, 1)] * 3)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 20), st.integers(1, 20))
def test_resampling_preserves_constants(seed, h, w):
    r = np.random.default_rng(seed)
    const = np.full((3, int(r.integers(1, 9)), int(r.integers(1, 9))), r.normal(), dtype=np.float64)
    assert np.allclose(resample_box(const, (0, 0, const.shape[1], const.shape[2]), (h, w)), const[0, 0, 0],
                       atol=1e-6)


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(14, 16), (16, 14), (14, 8), (8, 4), (7, 16)]))
def test_resampling_keeps_token_mean_of_smooth_fields(seed, sizes):
    src, dst = sizes
    r = np.random.default_rng(seed)
    # smooth positive field: a few low-frequency cosines on [0, 1]^2 plus an offset
    fy, fx, ph = r.uniform(0, 1.5, 3), r.uniform(0, 1.5, 3), r.uniform(0, 2 * np.pi, 3)

    def field(n):
        c = (np.arange(n) + 0.5) / n
        y, x = np.meshgrid(c, c, indexing="ij")
        return 3 + sum(np.cos(2 * np.pi * (a * y + b * x) + p) for a, b, p in zip(fy, fx, ph))

    out = resample_box(field(src)[None], (0, 0, src, src), (dst, dst))[0]
    dense = field(dst)  # reference: the same continuous field sampled on the target grid
    assert abs(out.mean() - dense.mean()) <= 0.05 * abs(dense.mean())


def test_synthetic_teacher_properties():
    ds = synth_dataset_generate(4, 30, 32, seed=3)
    a = synth_teacher_generate(ds, 5, DIMS)
    b = synth_teacher_generate(ds, 5, DIMS)
    assert all(x.cls.tobytes() == y.cls.tobytes() for x, y in zip(a, b))
    assert all(np.allclose(np.linalg.norm(r.cls), 1, atol=1e-6) for r in a)
    assert [s.shape[1:] for s in a[0].stages] == DIMS
    assert all(s.shape[0] == 384 for s in a[0].stages) and a[0].cls.shape == (384,)
    rng = np.random.default_rng(0)
    cos = [a[i].cls @ a[j].cls for i, j in rng.integers(0, len(a), (100, 2)) if i != j]
    assert max(cos) < 1
    c = synth_teacher_generate(ds, 6, DIMS)
    assert a[0].cls.tobytes() != c[0].cls.tobytes()

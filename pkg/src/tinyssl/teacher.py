"""Frozen-teacher features on disk.

Layout (little-endian)::

    b"TFST" | u32 version=1 | u32 record_count | u32 cls_dim | u32 stage_count
    stage_count x (u32 H, u32 W, u32 C)
    record_count x (u64 image_id, u64 byte_offset)
    records: cls_dim f32, then each stage as (H, W, C) f32, row-major

Stage maps are exposed channel-first, (C, H, W), to match the student.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .augment import resample_box

MAGIC = b"TFST"
VERSION = 1
_HEAD = struct.Struct("<4sIIII")


class StoreFormatError(ValueError):
    pass


class StoreCorruptError(StoreFormatError):
    pass


@dataclass
class TeacherFeatureRecord:
    image_id: int
    cls: np.ndarray  # (cls_dim,)
    stages: list  # (C, H, W) arrays


def _header_size(stage_count):
    return _HEAD.size + 12 * stage_count


def _record_floats(cls_dim, dims):
    return cls_dim + sum(h * w * c for h, w, c in dims)


def write_store(path, records):
    records = list(records)
    if not records:
        raise StoreFormatError("refusing to write an empty store")
    cls_dim = records[0].cls.shape[0]
    dims = [(s.shape[1], s.shape[2], s.shape[0]) for s in records[0].stages]
    if dims and len({c for _, _, c in dims}) != 1:
        raise StoreFormatError(f"stage channel counts differ: {dims}")
    seen = set()
    for r in records:
        if r.image_id in seen:
            raise StoreFormatError(f"duplicate image_id {r.image_id}")
        seen.add(r.image_id)
        rdims = [(s.shape[1], s.shape[2], s.shape[0]) for s in r.stages]
        if r.cls.shape != (cls_dim,) or rdims != dims:
            raise StoreFormatError(f"record {r.image_id}: dims {r.cls.shape}/{rdims} "
                                   f"differ from store dims {(cls_dim,)}/{dims}")
        if not np.all(np.isfinite(r.cls)):
            raise StoreFormatError(f"record {r.image_id}: non-finite CLS embedding")
    n = len(records)
    rec_bytes = 4 * _record_floats(cls_dim, dims)
    data_start = _header_size(len(dims)) + 16 * n
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, n, cls_dim, len(dims)))
        for h, w, c in dims:
            f.write(struct.pack("<III", h, w, c))
        index = np.empty(n, dtype=[("id", "<u8"), ("off", "<u8")])
        index["id"] = [r.image_id for r in records]
        index["off"] = data_start + rec_bytes * np.arange(n, dtype=np.uint64)
        f.write(index.tobytes())
        for r in records:
            f.write(np.asarray(r.cls, dtype="<f4").tobytes())
            for s in r.stages:
                f.write(np.ascontiguousarray(np.transpose(s, (1, 2, 0)), dtype="<f4").tobytes())
    os.replace(tmp, path)


class TeacherStore:
    """Read-only handle; payloads are pulled lazily from a memory map."""

    def __init__(self, path):
        self.path = path
        size = os.path.getsize(path)
        with open(path, "rb") as f:
            head = f.read(_HEAD.size)
            if len(head) < _HEAD.size:
                raise StoreCorruptError(f"{path}: truncated header at byte {len(head)}")
            magic, version, n, cls_dim, nstages = _HEAD.unpack(head)
            if magic != MAGIC:
                raise StoreFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
            if version != VERSION:
                raise StoreFormatError(f"{path}: unsupported version {version}")
            raw = f.read(12 * nstages)
            if len(raw) < 12 * nstages:
                raise StoreCorruptError(f"{path}: truncated stage table at byte {_HEAD.size + len(raw)}")
        self.count, self.cls_dim = n, cls_dim
        self.stage_dims = [struct.unpack_from("<III", raw, 12 * i) for i in range(nstages)]
        self._rec_floats = _record_floats(cls_dim, self.stage_dims)
        index_start = _header_size(nstages)
        expected = index_start + 16 * n + 4 * self._rec_floats * n
        if size < expected:
            raise StoreCorruptError(f"{path}: truncated at byte {size}, expected {expected} bytes")
        if size > expected:
            raise StoreCorruptError(f"{path}: {size - expected} trailing bytes after offset {expected}")
        index = np.fromfile(path, dtype=[("id", "<u8"), ("off", "<u8")], count=n, offset=index_start)
        self._offsets = {int(i): int(o) for i, o in zip(index["id"], index["off"])}
        self._mm = np.memmap(path, dtype="<f4", mode="r")

    def __len__(self):
        return self.count

    def __contains__(self, image_id):
        return int(image_id) in self._offsets

    def ids(self):
        return list(self._offsets)

    def lookup(self, image_id) -> TeacherFeatureRecord:
        try:
            off = self._offsets[int(image_id)]
        except KeyError:
            raise KeyError(f"teacher store has no record for image_id {image_id}") from None
        pos = off // 4
        cls = np.array(self._mm[pos:pos + self.cls_dim])
        pos += self.cls_dim
        stages = []
        for h, w, c in self.stage_dims:
            block = np.array(self._mm[pos:pos + h * w * c]).reshape(h, w, c)
            stages.append(np.ascontiguousarray(block.transpose(2, 0, 1)))
            pos += h * w * c
        return TeacherFeatureRecord(int(image_id), cls, stages)


def read_store(path) -> TeacherStore:
    return TeacherStore(path)


def lookup_stage_aligned(store, image_id, student_stage_dims, crop=None):
    """Teacher stage maps on the student's grids.

    Maps whose stored size differs from the student grid are bilinearly
    resampled. ``crop`` (the augmentation parameters of the student view)
    resamples the same crop box and flip instead, keeping tokens aligned.
    """
    rec = store.lookup(image_id)
    out = []
    for stage, (h, w) in zip(rec.stages, student_stage_dims):
        if crop is None:
            if stage.shape[1:] == (h, w):
                out.append(stage)
            else:
                out.append(resample_box(stage, (0, 0, stage.shape[1], stage.shape[2]), (h, w)))
            continue
        sh, sw = crop["source_hw"]
        top, left, bh, bw = crop["box"]
        fy, fx = stage.shape[1] / sh, stage.shape[2] / sw
        box = (top * fy, left * fx, bh * fy, bw * fx)
        out.append(resample_box(stage, box, (h, w), crop["flip"]).astype(np.float32))
    return out


# --- synthetic frozen teacher -------------------------------------------------

class SyntheticTeacher:
    """Fixed random conv net standing in for a pretrained ViT.

    Four conv + 2x average-pool levels; the last three levels feed the
    stage maps. tanh units on centred input keep features sign-balanced,
    so CLS vectors spread over the sphere instead of sharing one direction.
    """

    def __init__(self, seed, dim=384, widths=(64, 96, 128, 192)):
        rng = np.random.default_rng([seed, 0x7EAC])
        self.dim = dim
        chans = (3,) + tuple(widths)
        self.convs = [rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
                      for cin, cout in zip(chans[:-1], chans[1:])]
        taps = widths[-3:]
        self.heads = [rng.standard_normal((dim, c)) / np.sqrt(c) for c in taps]
        self.cls_head = rng.standard_normal((dim, sum(taps))) / np.sqrt(sum(taps))

    @staticmethod
    def _conv(x, w):
        cols = kernels._kernels_py.im2col(x[None], 3, 1, 1)[0]
        y = w.reshape(w.shape[0], -1) @ cols
        return y.reshape(w.shape[0], x.shape[1], x.shape[2])

    @staticmethod
    def _pool_to(x, hw):
        C, H, W = x.shape
        h, w = hw
        if H % h == 0 and W % w == 0:
            return x.reshape(C, h, H // h, w, W // w).mean(axis=(2, 4))
        return resample_box(x, (0, 0, H, W), hw)

    def __call__(self, img, stage_dims):
        x = (np.asarray(img, dtype=np.float64) - 0.5) * 2.0
        levels = []
        for w in self.convs:
            x = np.tanh(self._conv(x, w))
            levels.append(x)
            if min(x.shape[1:]) >= 2:
                x = self._pool_to(x, (x.shape[1] // 2, x.shape[2] // 2))
        pooled = [feat.mean(axis=(1, 2)) for feat in levels[-3:]]
        stages = [np.tensordot(head, self._pool_to(feat, hw), axes=(1, 0)).astype(np.float32)
                  for feat, head, hw in zip(levels[-3:], self.heads, stage_dims)]
        cls = self.cls_head @ np.concatenate(pooled)
        cls = (cls / max(np.linalg.norm(cls), 1e-12)).astype(np.float32)
        return cls, stages


def synth_teacher_generate(dataset, seed, stage_dims):
    """One record per image of ``dataset`` (anything with .images and .image_ids)."""
    teacher = SyntheticTeacher(seed)
    records = []
    for img, image_id in zip(dataset.images, dataset.image_ids):
        cls, stages = teacher(img, stage_dims)
        records.append(TeacherFeatureRecord(int(image_id), cls, stages))
    return records

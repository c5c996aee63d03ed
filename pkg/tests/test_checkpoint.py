"""Checkpoint container round trips and corruption diagnostics."""

import struct

import numpy as np
import pytest

from panokit.checkpoint import (
    arrays_to_bank,
    bank_to_arrays,
    load_arrays,
    load_model,
    save_arrays,
    save_model,
)
from panokit.errors import MaskFormatError
from panokit.memory import ArchivedPointer, MemoryBank, MemoryEntry, bank_insert
from panokit.model import ModelConfig, PanoTracker
from panokit.tensor import Tensor


class TestArrayContainer:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a": rng.normal(size=(3, 4)),
            "b.weight": rng.normal(size=(2, 1, 5)),
            "c": np.array(2.5),
        }
        p = tmp_path / "x.ckpt"
        save_arrays(p, arrays, meta={"note": "hi", "n": 3})
        loaded, meta = load_arrays(p)
        assert meta == {"note": "hi", "n": 3}
        assert sorted(loaded) == sorted(arrays)
        for k in arrays:
            assert loaded[k].shape == np.asarray(arrays[k]).shape
            assert np.array_equal(loaded[k], arrays[k])

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(1)
        arrays = {"z": rng.normal(size=4), "a": rng.normal(size=(2, 2))}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_arrays(p1, arrays)
        save_arrays(p2, dict(reversed(list(arrays.items()))))
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"\x01\x02")
        with pytest.raises(MaskFormatError):
            load_arrays(p)

    def test_oversized_index_length(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(struct.pack("<Q", 1 << 40) + b"{}")
        with pytest.raises(MaskFormatError):
            load_arrays(p)

    def test_bad_index_json(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        blob = b"{nope"
        p.write_bytes(struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(MaskFormatError):
            load_arrays(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        blob = b'{"format_version":9,"meta":{},"tensors":[]}'
        p.write_bytes(struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(MaskFormatError, match="version"):
            load_arrays(p)

    def test_payload_shorter_than_index_claims(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        blob = (
            b'{"format_version":1,"meta":{},'
            b'"tensors":[{"name":"a","shape":[4],"offset":0}]}'
        )
        p.write_bytes(struct.pack("<Q", len(blob)) + blob + np.zeros(2).tobytes())
        with pytest.raises(MaskFormatError, match="payload"):
            load_arrays(p)


class TestModelCheckpoint:
    def test_model_round_trip(self, tmp_path):
        config = ModelConfig(d_feat=16, d_p=8, d_m=8, attn_rounds=1, seed=3)
        tracker = PanoTracker(config)
        p = tmp_path / "model.ckpt"
        save_model(p, tracker, meta={"epoch": 2})
        loaded, meta = load_model(p)
        assert meta["epoch"] == 2
        assert loaded.config == config
        a = tracker.params()
        b = loaded.params()
        assert sorted(a) == sorted(b)
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)


def build_bank(rng, h=2, w=4, d_m=8, d_p=8):
    def entry(idx):
        return MemoryEntry(
            frame_idx=idx,
            mem=Tensor(rng.normal(size=(h, w, d_m))),
            pointer=Tensor(rng.normal(size=d_p)),
            obj_score=float(rng.random()),
        )

    bank = MemoryBank(entry(0), recent_size=2)
    for idx in (1, 2, 3, 4):
        bank_insert(bank, entry(idx))
    return bank


class TestBankSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(5)
        bank = build_bank(rng)
        loaded = arrays_to_bank(*bank_to_arrays(bank))
        assert loaded.recent_size == bank.recent_size
        assert loaded.prompted.frame_idx == bank.prompted.frame_idx
        assert np.array_equal(loaded.prompted.mem.data, bank.prompted.mem.data)
        assert len(loaded.recent) == len(bank.recent)
        for a, b in zip(loaded.recent, bank.recent):
            assert a.frame_idx == b.frame_idx
            assert a.obj_score == b.obj_score
            assert np.array_equal(a.mem.data, b.mem.data)
            assert np.array_equal(a.pointer.data, b.pointer.data)
        assert len(loaded.archive) == len(bank.archive)
        for a, b in zip(loaded.archive, bank.archive):
            assert isinstance(a, ArchivedPointer)
            assert a.frame_idx == b.frame_idx
            assert np.array_equal(a.pointer, b.pointer)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        bank = build_bank(rng)
        arrays, meta = bank_to_arrays(bank)
        p = tmp_path / "bank.ckpt"
        save_arrays(p, arrays, meta=meta)
        arrays2, meta2 = load_arrays(p)
        loaded = arrays_to_bank(arrays2, meta2)
        assert [e.frame_idx for e in loaded.recent] == [
            e.frame_idx for e in bank.recent
        ]
        assert [a.frame_idx for a in loaded.archive] == [
            a.frame_idx for a in bank.archive
        ]

"""Flat binary container for named float64 tensors, plus model/bank helpers.

Layout: an 8-byte little-endian unsigned length, that many bytes of JSON
index, then the concatenated tensor payload as little-endian float64. The
index records, per tensor, its name, shape, and element offset into the
payload, together with an arbitrary JSON meta block. Everything needed to
reload is inside the one file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import MaskFormatError
from .memory import ArchivedPointer, MemoryBank, MemoryEntry
from .model import ModelConfig, PanoTracker
from .tensor import Tensor

FORMAT_VERSION = 1


def save_arrays(path, arrays, meta=None):
    names = sorted(arrays)
    index = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": []}
    offset = 0
    chunks = []
    for name in names:
        a = np.asarray(arrays[name], dtype=np.float64)
        index["tensors"].append(
            {"name": name, "shape": list(a.shape), "offset": offset}
        )
        offset += a.size
        chunks.append(a.astype("<f8").tobytes())
    blob = json.dumps(index, separators=(",", ":")).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_arrays(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise MaskFormatError("file too short for header", offset=0)
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise MaskFormatError(f"index length {n} exceeds file size", offset=0)
    try:
        index = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as e:
        raise MaskFormatError(f"invalid index JSON: {e.msg}", offset=8 + e.pos) from e
    if index.get("format_version") != FORMAT_VERSION:
        raise MaskFormatError(
            f"unsupported format version {index.get('format_version')!r}", offset=8
        )
    payload = np.frombuffer(raw[8 + n:], dtype="<f8")
    arrays = {}
    for entry in index["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off + size > payload.size:
            raise MaskFormatError(
                f"tensor {entry['name']!r} exceeds payload", offset=8 + n
            )
        arrays[entry["name"]] = payload[off:off + size].reshape(shape).copy()
    return arrays, index["meta"]


# ------------------------------------------------------------------ model

def save_model(path, tracker, meta=None):
    full_meta = {"model_config": asdict(tracker.config)}
    if meta:
        full_meta.update(meta)
    arrays = {k: v.data for k, v in tracker.params().items()}
    save_arrays(path, arrays, meta=full_meta)


def load_model(path):
    arrays, meta = load_arrays(path)
    config = ModelConfig(**meta["model_config"])
    tracker = PanoTracker(config)
    tracker.load_arrays(arrays)
    return tracker, meta


# ------------------------------------------------------------------- bank

def bank_to_arrays(bank):
    """Flatten a memory bank for pause/resume of tracking."""
    arrays, meta_entries = {}, []

    def put(prefix, frame_idx, obj_score, mem=None, pointer=None):
        entry = {"key": prefix, "frame_idx": frame_idx, "obj_score": obj_score}
        if mem is not None:
            arrays[prefix + ".mem"] = mem
        if pointer is not None:
            arrays[prefix + ".pointer"] = pointer
        meta_entries.append(entry)

    p = bank.prompted
    put("prompted", p.frame_idx, p.obj_score, p.mem.data, p.pointer.data)
    for k, e in enumerate(bank.recent):
        put(f"recent.{k}", e.frame_idx, e.obj_score, e.mem.data, e.pointer.data)
    for k, a in enumerate(bank.archive):
        put(f"archive.{k}", a.frame_idx, a.obj_score, pointer=a.pointer)
    return arrays, {"recent_size": bank.recent_size, "entries": meta_entries}


def arrays_to_bank(arrays, meta):
    by_key = {e["key"]: e for e in meta["entries"]}

    def entry(key):
        e = by_key[key]
        return MemoryEntry(
            frame_idx=e["frame_idx"],
            mem=Tensor(arrays[key + ".mem"]),
            pointer=Tensor(arrays[key + ".pointer"]),
            obj_score=e["obj_score"],
        )

    bank = MemoryBank(entry("prompted"), recent_size=meta["recent_size"])
    k = 0
    while f"recent.{k}" in by_key:
        bank.recent.append(entry(f"recent.{k}"))
        k += 1
    k = 0
    while f"archive.{k}" in by_key:
        e = by_key[f"archive.{k}"]
        bank.archive.append(ArchivedPointer(
            frame_idx=e["frame_idx"],
            pointer=arrays[f"archive.{k}.pointer"],
            obj_score=e["obj_score"],
        ))
        k += 1
    return bank

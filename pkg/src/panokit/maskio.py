"""Binary mask I/O: single-frame PGM and run-length JSON for sequences.

PGM files are the binary P5 flavor with maxval 255; background is 0 and
foreground is 255, no other values. Sequences are stored as JSON with
row-major foreground runs per frame:

    {"h": 4, "w": 8, "frames": [{"idx": 0, "runs": [3, 2, 17, 5]}, ...]}

where runs alternate start offset and length over the flattened mask. Both
formats round-trip bit-exactly. Parse failures raise MaskFormatError whose
offset field points at the offending byte where one is known.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import MaskFormatError, ShapeError


def _check_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


# ---------------------------------------------------------------- PGM (P5)

def mask_to_pgm_bytes(mask):
    m = _check_mask(mask)
    h, w = m.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + (m.astype(np.uint8) * 255).tobytes()


def pgm_bytes_to_mask(data):
    if not isinstance(data, (bytes, bytearray)):
        raise MaskFormatError("expected bytes", offset=0)
    pos = 0

    def skip_ws():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break

    def token():
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise MaskFormatError("truncated header", offset=start)
        return data[start:pos], start

    magic, at = token()
    if magic != b"P5":
        raise MaskFormatError(f"bad magic {magic!r}, expected P5", offset=at)
    fields = []
    for name in ("width", "height", "maxval"):
        tok, at = token()
        if not tok.isdigit():
            raise MaskFormatError(f"non-numeric {name} {tok!r}", offset=at)
        fields.append((int(tok), at))
    (w, _), (h, _), (maxval, mv_at) = fields
    if maxval != 255:
        raise MaskFormatError(f"maxval must be 255, got {maxval}", offset=mv_at)
    if w < 1 or h < 1:
        raise MaskFormatError(f"bad dimensions {w}x{h}", offset=fields[0][1])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MaskFormatError("missing whitespace after maxval", offset=pos)
    pos += 1
    body = data[pos:]
    if len(body) != h * w:
        raise MaskFormatError(
            f"expected {h * w} pixel bytes, got {len(body)}", offset=pos
        )
    arr = np.frombuffer(body, dtype=np.uint8)
    bad = np.nonzero((arr != 0) & (arr != 255))[0]
    if bad.size:
        raise MaskFormatError(
            f"pixel value {arr[bad[0]]} is neither 0 nor 255",
            offset=pos + int(bad[0]),
        )
    return (arr == 255).reshape(h, w)


def write_pgm(path, mask):
    with open(path, "wb") as fh:
        fh.write(mask_to_pgm_bytes(mask))


def read_pgm(path):
    with open(path, "rb") as fh:
        return pgm_bytes_to_mask(fh.read())


# ------------------------------------------------------------- RLE (JSON)

def mask_to_runs(mask):
    m = _check_mask(mask).ravel()
    if not m.any():
        return []
    d = np.diff(m.astype(np.int8))
    starts = np.nonzero(d == 1)[0] + 1
    ends = np.nonzero(d == -1)[0] + 1
    if m[0]:
        starts = np.concatenate([[0], starts])
    if m[-1]:
        ends = np.concatenate([ends, [m.size]])
    runs = []
    for s, e in zip(starts, ends):
        runs.extend([int(s), int(e - s)])
    return runs


def runs_to_mask(runs, h, w):
    if len(runs) % 2 != 0:
        raise MaskFormatError(f"odd run list of length {len(runs)}")
    flat = np.zeros(h * w, dtype=bool)
    prev_end = 0
    for k in range(0, len(runs), 2):
        start, length = runs[k], runs[k + 1]
        ints = all(
            isinstance(x, int) and not isinstance(x, bool) for x in (start, length)
        )
        if not ints:
            raise MaskFormatError(f"run {k // 2} is not integer-valued")
        if length < 1:
            raise MaskFormatError(f"run {k // 2} has non-positive length {length}")
        if start < prev_end:
            raise MaskFormatError(f"run {k // 2} overlaps or is out of order")
        if start + length > h * w:
            raise MaskFormatError(f"run {k // 2} exceeds {h}x{w} mask")
        flat[start:start + length] = True
        prev_end = start + length
    return flat.reshape(h, w)


def masks_to_rle(masks):
    masks = [_check_mask(m) for m in masks]
    if not masks:
        raise ShapeError("need at least one mask")
    h, w = masks[0].shape
    for m in masks:
        if m.shape != (h, w):
            raise ShapeError(f"mask shapes differ: {m.shape} vs {(h, w)}")
    return {
        "h": h,
        "w": w,
        "frames": [{"idx": i, "runs": mask_to_runs(m)} for i, m in enumerate(masks)],
    }


def rle_to_masks(doc):
    for key in ("h", "w", "frames"):
        if key not in doc:
            raise MaskFormatError(f"missing key {key!r}")
    h, w = doc["h"], doc["w"]
    if not (isinstance(h, int) and isinstance(w, int) and h > 0 and w > 0):
        raise MaskFormatError(f"bad dimensions {h!r}x{w!r}")
    masks = []
    for n, frame in enumerate(doc["frames"]):
        if frame.get("idx") != n:
            raise MaskFormatError(f"frame {n} has idx {frame.get('idx')!r}")
        masks.append(runs_to_mask(frame["runs"], h, w))
    return masks


def write_rle(path, masks):
    with open(path, "w", encoding="ascii") as fh:
        json.dump(masks_to_rle(masks), fh, separators=(",", ":"))
        fh.write("\n")


def read_rle(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise MaskFormatError(f"invalid JSON: {e.msg}", offset=e.pos) from e
    return rle_to_masks(doc)

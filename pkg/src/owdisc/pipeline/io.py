"""On-disk formats.

* ``*.jsonl``: one JSON object per line. Box records carry ``image_id`` and
  ``x1, y1, x2, y2`` plus, depending on the file, ``score``, ``class_id``,
  ``known``, ``source`` and ``trusted``.
* ``*.bin`` descriptor matrices: 8-byte magic, little-endian ``uint32`` row
  count and dimension, then row-major little-endian ``float32`` values. The
  companion ``*_index.jsonl`` lists one record per row.
* ``embedder.bin``: 8-byte magic, ``uint32`` ``d_in, d_hidden, d_out``, a
  ``uint64`` training seed, then the flattened ``float64`` weights.

Readers validate every record before returning, so a malformed file fails
with its path and line number before any computation starts.
"""

from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from owdisc.embed import Embedder
from owdisc.geometry import DetBox, InvalidRectError, Rect, Source
from owdisc.metrics import GroundTruth, GtObject

DESC_MAGIC = b"OWDDESC1"
EMB_MAGIC = b"OWDEMB01"


class SchemaError(ValueError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dumps(r) + "\n")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_jsonl(path) -> list[tuple[int, dict]]:
    """``(line number, record)`` pairs, skipping blank lines."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, n, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise SchemaError(path, n, "record is not a JSON object")
            out.append((n, rec))
    return out


def _number(path, n, rec, key):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SchemaError(path, n, f"field {key!r} must be a finite number")
    return float(v)


def _image_id(path, n, rec):
    v = rec.get("image_id")
    if isinstance(v, bool) or not isinstance(v, (int, str)):
        raise SchemaError(path, n, "field 'image_id' must be an integer or string")
    return v


def _rect(path, n, rec) -> Rect:
    coords = [_number(path, n, rec, k) for k in ("x1", "y1", "x2", "y2")]
    try:
        return Rect(*coords)
    except InvalidRectError as exc:
        raise SchemaError(path, n, f"invalid rect: {exc}") from None


def box_record(b: DetBox) -> dict:
    return {
        "image_id": b.image_id,
        "x1": b.rect.x1,
        "y1": b.rect.y1,
        "x2": b.rect.x2,
        "y2": b.rect.y2,
        "score": b.score,
        "source": b.source.value,
        "trusted": b.trusted,
    }


def write_boxes(path, boxes: Sequence[DetBox]):
    write_jsonl(path, (box_record(b) for b in boxes))


def read_boxes(path, source: Source | None = None) -> list[DetBox]:
    """Proposal records; ``source`` is required in the file unless given."""
    boxes = []
    for n, rec in read_jsonl(path):
        rect = _rect(path, n, rec)
        score = _number(path, n, rec, "score")
        if not 0.0 <= score <= 1.0:
            raise SchemaError(path, n, f"score {score} outside [0, 1]")
        raw_src = rec.get("source", None if source is None else source.value)
        try:
            src = Source(raw_src)
        except ValueError:
            raise SchemaError(path, n, f"unknown source {raw_src!r}") from None
        trusted = rec.get("trusted", False)
        if not isinstance(trusted, bool):
            raise SchemaError(path, n, "field 'trusted' must be a boolean")
        boxes.append(DetBox(rect, score, src, _image_id(path, n, rec), trusted))
    return boxes


def write_gt(path, gt: GroundTruth):
    def records():
        for image_id, objs in gt.images.items():
            for o in objs:
                r = o.rect
                yield {
                    "image_id": image_id,
                    "x1": r.x1,
                    "y1": r.y1,
                    "x2": r.x2,
                    "y2": r.y2,
                    "class_id": o.class_id,
                    "known": o.known,
                }

    write_jsonl(path, records())


def read_gt(path) -> GroundTruth:
    items = []
    for n, rec in read_jsonl(path):
        rect = _rect(path, n, rec)
        cls = rec.get("class_id")
        if isinstance(cls, bool) or not isinstance(cls, (int, str)):
            raise SchemaError(path, n, "field 'class_id' must be an integer or string")
        known = rec.get("known")
        if not isinstance(known, bool):
            raise SchemaError(path, n, "field 'known' must be a boolean")
        items.append((_image_id(path, n, rec), GtObject(rect, cls, known), n))
    seen: dict = {}
    for _, o, n in items:
        if seen.setdefault(o.class_id, o.known) != o.known:
            raise SchemaError(path, n, f"class {o.class_id!r} is both known and unknown")
    return GroundTruth.from_objects((i, o) for i, o, _ in items)


def write_matrix(path, X: np.ndarray):
    X = np.ascontiguousarray(X, dtype="<f4")
    if X.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC + struct.pack("<II", X.shape[0], X.shape[1]))
        fh.write(X.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != DESC_MAGIC:
        raise SchemaError(path, 0, "bad descriptor header")
    rows, dim = struct.unpack("<II", data[8:16])
    if len(data) != 16 + 4 * rows * dim:
        raise SchemaError(path, 0, f"expected {rows}x{dim} float32 values")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, dim).astype(np.float64)


def read_index(path, rows: int) -> list[dict]:
    records = read_jsonl(path)
    for k, (n, rec) in enumerate(records):
        if rec.get("instance_id") != k:
            raise SchemaError(path, n, f"expected instance_id {k}")
    if len(records) != rows:
        raise SchemaError(path, len(records), f"index has {len(records)} rows, matrix has {rows}")
    return [rec for _, rec in records]


def write_embedder(path, e: Embedder, seed: int):
    d_in, d_hidden, d_out = e.dims
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<IIIQ", d_in, d_hidden, d_out, seed))
        fh.write(np.ascontiguousarray(e.flat(), dtype="<f8").tobytes())


def read_embedder(path) -> tuple[Embedder, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input file {path}")
    data = path.read_bytes()
    head = 8 + struct.calcsize("<IIIQ")
    if len(data) < head or data[:8] != EMB_MAGIC:
        raise SchemaError(path, 0, "bad embedder header")
    d_in, d_hidden, d_out, seed = struct.unpack("<IIIQ", data[8:head])
    n = d_hidden * d_in + d_hidden + d_out * d_hidden + d_out
    if len(data) != head + 8 * n:
        raise SchemaError(path, 0, "embedder size does not match its header")
    vec = np.frombuffer(data, dtype="<f8", offset=head).astype(np.float64)
    return Embedder.from_flat(vec, d_in, d_hidden, d_out), seed


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    def cell(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(cell(v) for v in r) + "\n")


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path

"""Writers for the validated-store binary format and its name manifest.

Layout (little-endian): 20-byte header of magic "NTDF", format version u32,
dimensionality u32, record count u32 and a reserved u32 of zero, followed by
one record per row: class id u32, then dim float32 values. The manifest is
text, one `id<TAB>name` line per class; lines starting with '#' are comments
and readers skip them.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IoError, ValidationError

MAGIC = b"NTDF"
VERSION = 1
HEADER = struct.Struct("<4sIIII")
_U32_MAX = 2**32 - 1


def write_store(
    path: str | Path, dim: int, records: Sequence[tuple[int, np.ndarray]]
) -> None:
    """Write (class_id, vector) records; vectors are cast to float32."""
    if dim < 1:
        raise ValidationError(f"dimensionality must be >= 1, got {dim}")
    if len(records) > _U32_MAX:
        raise ValidationError("record count exceeds the format's u32 range")
    chunks = [HEADER.pack(MAGIC, VERSION, dim, len(records), 0)]
    for row, (class_id, vector) in enumerate(records):
        if not 0 <= class_id <= _U32_MAX:
            raise ValidationError(f"record {row}: class id {class_id} not a u32")
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (dim,):
            raise ValidationError(
                f"record {row}: vector shape {vec.shape}, expected ({dim},)"
            )
        if not np.all(np.isfinite(vec)):
            raise ValidationError(f"record {row}: vector has non-finite values")
        chunks.append(struct.pack("<I", class_id) + vec.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_manifest(
    path: str | Path, names: dict[int, str], comments: Iterable[str] = ()
) -> None:
    lines = [f"# {comment}" for comment in comments]
    for class_id in sorted(names):
        name = names[class_id]
        if "\t" in name or "\n" in name:
            raise ValidationError(f"class name {name!r} contains separators")
        lines.append(f"{class_id}\t{name}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc

"""Validated feature-vector stores and the NTDF on-disk format.

NTDF layout (all integers little-endian unsigned 32-bit):

    bytes 0..3    magic "NTDF"
    bytes 4..7    format version, currently 1
    bytes 8..11   vector dimensionality
    bytes 12..15  record count
    bytes 16..19  reserved, written as 0
    then per record: class id (u32) followed by dim IEEE-754 float32 values

Vectors are stored and round-tripped as float32 bit patterns. A sidecar
manifest is optional UTF-8 text with one "id<TAB>name" line per class; lines
starting with '#' are comments and are ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InsufficientRecordsError,
    IoError,
    UnknownClassError,
    ValidationError,
)

MAGIC = b"NTDF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

_U32_MAX = 2**32 - 1


@dataclass
class ValidationStore:
    """An immutable set of validated (class id, float32 vector) records.

    The per-class index is derived from the records at construction and
    covers exactly the set of record positions.
    """

    dim: int
    class_ids: np.ndarray
    vectors: np.ndarray
    names: dict[int, str] = field(default_factory=dict)
    index: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.class_ids = np.ascontiguousarray(self.class_ids, dtype=np.uint32)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
            raise ValidationError(
                f"vectors must have shape (count, {self.dim}), "
                f"got {self.vectors.shape}"
            )
        if self.class_ids.ndim != 1 or self.class_ids.shape[0] != self.vectors.shape[0]:
            raise ValidationError(
                "class_ids and vectors must have one entry per record"
            )
        self.class_ids.flags.writeable = False
        self.vectors.flags.writeable = False
        self.index = {
            int(cid): np.flatnonzero(self.class_ids == cid)
            for cid in np.unique(self.class_ids)
        }

    @classmethod
    def from_records(
        cls,
        records: list[tuple[int, np.ndarray]],
        dim: int,
        names: dict[int, str] | None = None,
    ) -> "ValidationStore":
        if records:
            ids = np.array([cid for cid, _ in records], dtype=np.uint32)
            vecs = np.array([vec for _, vec in records], dtype=np.float32)
        else:
            ids = np.empty(0, dtype=np.uint32)
            vecs = np.empty((0, dim), dtype=np.float32)
        return cls(dim=dim, class_ids=ids, vectors=vecs, names=dict(names or {}))

    @property
    def count(self) -> int:
        return int(self.class_ids.shape[0])

    def classes(self) -> list[int]:
        return sorted(self.index)

    def class_count(self, class_id: int) -> int:
        return len(self.positions(class_id))

    def positions(self, class_id: int) -> np.ndarray:
        try:
            return self.index[int(class_id)]
        except KeyError:
            raise UnknownClassError(
                f"class {class_id} not present in store"
            ) from None

    def validate(self) -> None:
        """Full invariant check: finite elements, sane dim, index coverage."""
        if not 1 <= self.dim <= _U32_MAX:
            raise ValidationError(f"dim {self.dim} out of range")
        if self.count > _U32_MAX:
            raise ValidationError("record count exceeds format limit")
        if self.count and not np.isfinite(self.vectors).all():
            bad = int(np.flatnonzero(~np.isfinite(self.vectors).all(axis=1))[0])
            raise ValidationError(f"record {bad} contains a non-finite element")
        covered = sum(len(p) for p in self.index.values())
        if covered != self.count:
            raise ValidationError("per-class index does not cover all records")


def store_write(store: ValidationStore, path: str | Path) -> None:
    """Serialize a store to an NTDF file. Refuses non-finite vectors."""
    store.validate()
    header = _HEADER.pack(MAGIC, VERSION, store.dim, store.count, 0)
    record_dtype = np.dtype(
        [("class_id", "<u4"), ("vec", "<f4", (store.dim,))]
    )
    body = np.empty(store.count, dtype=record_dtype)
    body["class_id"] = store.class_ids
    body["vec"] = store.vectors
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def store_read(path: str | Path, names: dict[int, str] | None = None) -> ValidationStore:
    """Parse an NTDF file, validating magic, version, declared sizes and
    element finiteness. Truncation errors name the byte offset at which the
    file ended short."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, {len(raw)} bytes of {_HEADER.size}"
        )
    magic, version, dim, count, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise FormatError(f"{path}: dimensionality {dim} out of range")
    if reserved != 0:
        raise FormatError(f"{path}: reserved field must be 0, got {reserved}")
    record_size = 4 + 4 * dim
    expected = _HEADER.size + count * record_size
    if len(raw) != expected:
        offset = len(raw)
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} records of dim "
            f"{dim}, file ends at byte {offset}"
        )
    record_dtype = np.dtype([("class_id", "<u4"), ("vec", "<f4", (dim,))])
    body = np.frombuffer(raw, dtype=record_dtype, offset=_HEADER.size, count=count)
    store = ValidationStore(
        dim=dim,
        class_ids=body["class_id"].copy(),
        vectors=body["vec"].copy().reshape(count, dim),
        names=dict(names or {}),
    )
    store.validate()
    return store


def manifest_write(names: dict[int, str], path: str | Path) -> None:
    """Write the sidecar class-name manifest, one id<TAB>name line per class."""
    lines = [f"{cid}\t{names[cid]}" for cid in sorted(names)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def manifest_read(path: str | Path) -> dict[int, str]:
    """Parse a sidecar manifest. '#'-prefixed lines are comments."""
    names: dict[int, str] = {}
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cid_text, sep, name = line.partition("\t")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected id<TAB>name")
        try:
            cid = int(cid_text)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad class id {cid_text!r}") from None
        if cid < 0:
            raise FormatError(f"{path}:{lineno}: class id must be non-negative")
        names[cid] = name
    return names


@dataclass(frozen=True)
class ComparisonSet:
    """n distinct record positions of a single class, plus their vectors."""

    class_id: int
    positions: tuple[int, ...]
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)


def sample_comparison_set(
    store: ValidationStore,
    class_id: int,
    n: int,
    rng: np.random.Generator,
    exclude: int | None = None,
) -> ComparisonSet:
    """Draw n distinct positions of class_id, optionally excluding one
    position (used when the anchor itself lives in the store).

    Sampling is without replacement and uniform over the eligible positions;
    the draw is a pure function of the generator state.
    """
    if n < 1:
        raise ValidationError(f"comparison set size must be >= 1, got {n}")
    pool = store.positions(class_id)
    if exclude is not None:
        pool = pool[pool != exclude]
    if len(pool) < n:
        raise InsufficientRecordsError(
            f"class {class_id} has {len(pool)} eligible records, need {n}"
        )
    chosen = np.sort(rng.choice(pool, size=n, replace=False))
    return ComparisonSet(
        class_id=int(class_id),
        positions=tuple(int(p) for p in chosen),
        vectors=store.vectors[chosen],
    )

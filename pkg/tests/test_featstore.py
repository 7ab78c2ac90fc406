"""Store construction, NTDF serialization, and comparison-set sampling."""

import struct

import numpy as np
import pytest
from scipy import stats

from ntd.errors import (
    FormatError,
    InsufficientRecordsError,
    IoError,
    UnknownClassError,
    ValidationError,
)
from ntd.featstore import (
    MAGIC,
    ValidationStore,
    manifest_read,
    manifest_write,
    sample_comparison_set,
    store_read,
    store_write,
)


def small_store(dim=8, per_class=3, classes=(0, 1), seed=0):
    rng = np.random.default_rng(seed)
    records = [
        (cid, rng.normal(size=dim).astype(np.float32))
        for cid in classes
        for _ in range(per_class)
    ]
    return ValidationStore.from_records(records, dim=dim)


# ---------------------------------------------------------------------------
# NTDF round trip
# ---------------------------------------------------------------------------

def test_roundtrip_preserves_every_field_bit_exactly(tmp_path):
    store = small_store()
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    loaded = store_read(path)
    assert loaded.dim == store.dim
    assert loaded.count == store.count
    assert np.array_equal(loaded.class_ids, store.class_ids)
    # float32 payload must round-trip to identical bit patterns
    assert np.array_equal(
        loaded.vectors.view(np.uint32), store.vectors.view(np.uint32)
    )
    assert {c: list(p) for c, p in loaded.index.items()} == {
        c: list(p) for c, p in store.index.items()
    }


def test_header_layout_is_twenty_little_endian_bytes(tmp_path):
    store = small_store(dim=5, per_class=2, classes=(3,))
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    raw = path.read_bytes()
    magic, version, dim, count, reserved = struct.unpack("<4sIIII", raw[:20])
    assert magic == MAGIC == b"NTDF"
    assert version == 1
    assert dim == 5
    assert count == 2
    assert reserved == 0
    assert len(raw) == 20 + count * (4 + 4 * dim)
    # first record: class id then dim float32 values
    (first_class,) = struct.unpack_from("<I", raw, 20)
    assert first_class == 3
    values = struct.unpack_from("<5f", raw, 24)
    assert np.allclose(values, store.vectors[0])


def test_empty_store_roundtrip(tmp_path):
    store = ValidationStore.from_records([], dim=4)
    path = tmp_path / "empty.ntdf"
    store_write(store, path)
    assert path.stat().st_size == 20
    loaded = store_read(path)
    assert loaded.count == 0
    assert loaded.dim == 4
    assert loaded.classes() == []


def test_write_refuses_nan_elements(tmp_path):
    vec = np.ones(4, dtype=np.float32)
    bad = vec.copy()
    bad[2] = np.nan
    store = ValidationStore.from_records([(0, vec), (1, bad)], dim=4)
    with pytest.raises(ValidationError, match="non-finite"):
        store_write(store, tmp_path / "bad.ntdf")


def test_read_rejects_bad_magic(tmp_path):
    store = small_store()
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XTDF"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        store_read(path)


def test_read_rejects_unsupported_version(tmp_path):
    store = small_store()
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 4, 2)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        store_read(path)


def test_read_names_truncation_offset(tmp_path):
    store = small_store(dim=8, per_class=3)
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    raw = path.read_bytes()
    cut = len(raw) - 17  # mid-record
    path.write_bytes(raw[:cut])
    with pytest.raises(FormatError, match=f"byte {cut}"):
        store_read(path)


def test_read_rejects_trailing_garbage(tmp_path):
    store = small_store()
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    path.write_bytes(path.read_bytes() + b"\x00\x01")
    with pytest.raises(FormatError):
        store_read(path)


def test_read_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        store_read(tmp_path / "absent.ntdf")


def test_read_rejects_nonfinite_payload(tmp_path):
    store = small_store(dim=2, per_class=2)
    path = tmp_path / "store.ntdf"
    store_write(store, path)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<f", raw, 24, float("inf"))
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="non-finite"):
        store_read(path)


# ---------------------------------------------------------------------------
# store invariants
# ---------------------------------------------------------------------------

def test_index_covers_exactly_the_records():
    store = small_store(per_class=4, classes=(7, 2, 9))
    assert store.classes() == [2, 7, 9]
    seen = sorted(pos for cid in store.classes() for pos in store.positions(cid))
    assert seen == list(range(store.count))
    for cid in store.classes():
        assert all(store.class_ids[p] == cid for p in store.positions(cid))


def test_unknown_class_lookup():
    store = small_store()
    with pytest.raises(UnknownClassError, match="42"):
        store.positions(42)


def test_vectors_are_immutable_after_load():
    store = small_store()
    with pytest.raises(ValueError):
        store.vectors[0, 0] = 5.0


def test_mismatched_record_shapes_rejected():
    with pytest.raises(ValidationError):
        ValidationStore(
            dim=4,
            class_ids=np.array([0, 1], dtype=np.uint32),
            vectors=np.zeros((2, 3), dtype=np.float32),
        )


# ---------------------------------------------------------------------------
# manifest sidecar
# ---------------------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    names = {0: "goldfish", 3: "tiger shark", 7: "class with spaces"}
    path = tmp_path / "classes.tsv"
    manifest_write(names, path)
    assert manifest_read(path) == names


def test_manifest_skips_comments_and_blanks(tmp_path):
    path = tmp_path / "classes.tsv"
    path.write_text("# header comment\n0\tcat\n\n1\tdog\n", encoding="utf-8")
    assert manifest_read(path) == {0: "cat", 1: "dog"}


def test_manifest_rejects_malformed_lines(tmp_path):
    path = tmp_path / "classes.tsv"
    path.write_text("0 cat\n", encoding="utf-8")
    with pytest.raises(FormatError, match="1"):
        manifest_read(path)


# ---------------------------------------------------------------------------
# comparison-set sampling
# ---------------------------------------------------------------------------

def test_sampling_forced_when_class_exactly_n():
    store = small_store(per_class=3)
    cs = sample_comparison_set(store, 0, 3, np.random.default_rng(0))
    assert sorted(cs.positions) == list(store.positions(0))


def test_sampling_excludes_anchor_and_errors_at_boundary():
    store = small_store(per_class=3)
    anchor = int(store.positions(0)[0])
    cs = sample_comparison_set(store, 0, 2, np.random.default_rng(0), exclude=anchor)
    assert anchor not in cs.positions
    with pytest.raises(InsufficientRecordsError):
        sample_comparison_set(store, 0, 3, np.random.default_rng(0), exclude=anchor)


def test_sampling_never_returns_duplicates_or_foreign_positions():
    store = small_store(per_class=10, classes=(0, 1, 2))
    rng = np.random.default_rng(42)
    valid = set(int(p) for p in store.positions(1))
    for _ in range(200):
        cs = sample_comparison_set(store, 1, 4, rng)
        assert len(set(cs.positions)) == 4
        assert set(cs.positions) <= valid


def test_sampling_deterministic_under_fixed_seed():
    store = small_store(per_class=10)
    a = sample_comparison_set(store, 0, 5, np.random.default_rng(123))
    b = sample_comparison_set(store, 0, 5, np.random.default_rng(123))
    assert a.positions == b.positions
    assert np.array_equal(a.vectors, b.vectors)


def test_sampling_uniformity_chi_square():
    # each member of a 10-record class should be selected ~uniformly
    store = small_store(per_class=10)
    rng = np.random.default_rng(7)
    counts = {int(p): 0 for p in store.positions(0)}
    draws = 3000
    n = 3
    for _ in range(draws):
        for p in sample_comparison_set(store, 0, n, rng).positions:
            counts[p] += 1
    observed = np.array(list(counts.values()))
    expected = draws * n / 10
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    # 9 degrees of freedom; reject only at the 0.1% level
    assert chi2 < stats.chi2.ppf(0.999, df=9)


def test_sampling_rejects_silly_sizes():
    store = small_store(per_class=3)
    with pytest.raises(ValidationError):
        sample_comparison_set(store, 0, 0, np.random.default_rng(0))
    with pytest.raises(InsufficientRecordsError):
        sample_comparison_set(store, 0, 4, np.random.default_rng(0))


def test_sampled_vectors_match_positions():
    store = small_store(per_class=6)
    cs = sample_comparison_set(store, 1, 3, np.random.default_rng(5))
    for offset, pos in enumerate(cs.positions):
        assert np.array_equal(cs.vectors[offset], store.vectors[pos])

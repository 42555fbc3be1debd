"""Feature and concept matrices: validation, on-disk formats, standardization, splits.

Binary layouts are little-endian and start with a 4-byte magic plus a u32
version so files are bit-exact across implementations:

* ``RPFM`` features: ``u64 n_samples, u64 dim`` then float32 row-major payload.
* ``RPCM`` concepts: ``u64 n_samples, u64 n_concepts, u32 n_groups``, the group
  table, the concept names, then one ``ceil(M / 8)``-byte row per sample with
  concept ``j`` stored in bit ``j % 8`` (LSB first) of byte ``j // 8``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConstructionError, DataError, FormatError, SplitWarning

FEATURE_MAGIC = b"RPFM"
CONCEPT_MAGIC = b"RPCM"
FORMAT_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIQQ")
_CONCEPT_HEADER = struct.Struct("<4sIQQI")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeatureMatrix:
    """N x D representation vectors, one row per sample."""

    values: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ConstructionError(f"feature values must be 2-D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ConstructionError(f"feature matrix needs n_samples >= 1 and dim >= 1, got {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if not np.all(np.isfinite(v)):
            raise DataError("feature matrix contains non-finite values")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def take(self, idx) -> "FeatureMatrix":
        return FeatureMatrix(self.values[np.asarray(idx)], self.source_tag)


@dataclass(frozen=True)
class ConceptGroup:
    name: str
    start: int
    len: int

    @property
    def stop(self) -> int:
        return self.start + self.len


def _check_groups(groups: Sequence[ConceptGroup], m: int) -> None:
    spans = sorted((g.start, g.len, g.name) for g in groups)
    pos = 0
    for start, length, name in spans:
        if length < 1:
            raise ConstructionError(f"group {name!r} is empty")
        if start != pos:
            what = "overlaps" if start < pos else "leaves a gap before"
            raise ConstructionError(f"group {name!r} at {start} {what} position {pos}")
        pos = start + length
    if pos != m:
        raise ConstructionError(f"groups cover [0, {pos}) but there are {m} concepts")
    if len({g.name for g in groups}) != len(groups):
        raise ConstructionError("group names must be unique")


@dataclass(frozen=True)
class ConceptMatrix:
    """N x M binary concept indicators with named, contiguous concept groups."""

    bits: np.ndarray
    concept_names: tuple
    groups: tuple

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ConstructionError(f"concept bits must be 2-D, got shape {b.shape}")
        if b.shape[0] < 1 or b.shape[1] < 1:
            raise ConstructionError(f"concept matrix needs n_samples >= 1 and n_concepts >= 1, got {b.shape}")
        if not np.all((b == 0) | (b == 1)):
            raise DataError("concept matrix contains non-binary entries")
        names = tuple(str(n) for n in self.concept_names)
        if len(names) != b.shape[1]:
            raise ConstructionError(f"{len(names)} concept names for {b.shape[1]} concepts")
        groups = tuple(g if isinstance(g, ConceptGroup) else ConceptGroup(*g) for g in self.groups)
        _check_groups(groups, b.shape[1])
        for g in groups:
            in_group = names[g.start:g.stop]
            if len(set(in_group)) != len(in_group):
                raise ConstructionError(f"duplicate concept names in group {g.name!r}")
        object.__setattr__(self, "bits", _frozen(b.astype(np.uint8)))
        object.__setattr__(self, "concept_names", names)
        object.__setattr__(self, "groups", groups)

    @property
    def n_samples(self) -> int:
        return self.bits.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.bits.shape[1]

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    def group(self, name: str) -> ConceptGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def select_groups(self, names: Sequence[str]) -> "ConceptMatrix":
        """Concatenate the named groups, in the given order, into a new matrix."""
        cols, new_names, new_groups = [], [], []
        pos = 0
        for name in names:
            g = self.group(name)
            cols.append(self.bits[:, g.start:g.stop])
            new_names.extend(self.concept_names[g.start:g.stop])
            new_groups.append(ConceptGroup(g.name, pos, g.len))
            pos += g.len
        return ConceptMatrix(np.concatenate(cols, axis=1), tuple(new_names), tuple(new_groups))

    def take(self, idx) -> "ConceptMatrix":
        return ConceptMatrix(self.bits[np.asarray(idx)], self.concept_names, self.groups)


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConstructionError("epsilon must be positive")
        std = np.asarray(self.std, dtype=np.float64)
        if np.any(std < self.epsilon):
            raise ConstructionError("std entries must be floored at epsilon")
        object.__setattr__(self, "mean", _frozen(np.asarray(self.mean, dtype=np.float64)))
        object.__setattr__(self, "std", _frozen(std))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), float(d["epsilon"]))


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    small_clusters: tuple = field(default=())

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int64)))


# --------------------------------------------------------------------------
# features I/O


def save_features(m: FeatureMatrix, path) -> None:
    """Write ``m`` as RPFM (``.csv`` suffix selects the text format instead).

    The binary payload is float32, so only float32 matrices round-trip bit-exactly.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, m.values.astype(np.float64), delimiter=",", fmt="%.17g")
        return
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, m.n_samples, m.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(m.values.astype("<f4").tobytes(order="C"))


def load_features(path, format: str | None = None) -> FeatureMatrix:
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "csv":
        return FeatureMatrix(_read_csv_floats(path), source_tag=path.name)
    if format != "binary":
        raise ValueError(f"unknown feature format {format!r}")
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: file too short for an RPFM header")
    magic, version, n, d = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = raw[_FEATURE_HEADER.size:]
    if len(payload) != n * d * 4:
        raise FormatError(f"{path}: expected {n * d * 4} payload bytes, found {len(payload)}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty matrix ({n} x {d})")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureMatrix(values, source_tag=path.name)


def _read_csv_floats(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: ragged row ({len(rows[-1])} vs {len(rows[0])} columns)")
    if not rows:
        raise DataError(f"{path}: no rows")
    return np.array(rows, dtype=np.float64)


# --------------------------------------------------------------------------
# concepts I/O


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise FormatError(f"name too long for u16 length prefix: {s[:32]!r}...")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.raw):
            raise FormatError(f"{self.path}: truncated file")
        out = s.unpack_from(self.raw, self.pos)
        self.pos += s.size
        return out

    def string(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated string")
        s = self.raw[self.pos:self.pos + n]
        self.pos += n
        try:
            return s.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: bad UTF-8 name: {exc}") from None


def groups_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".groups.json")


def save_concepts(c: ConceptMatrix, path) -> None:
    """Write RPCM, or csv plus a ``<stem>.groups.json`` sidecar for ``.csv`` paths."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(c.concept_names)
            w.writerows(c.bits.tolist())
        groups = [{"name": g.name, "start": g.start, "len": g.len} for g in c.groups]
        groups_sidecar(path).write_text(json.dumps(groups, indent=2))
        return
    parts = [_CONCEPT_HEADER.pack(CONCEPT_MAGIC, FORMAT_VERSION, c.n_samples, c.n_concepts, len(c.groups))]
    for g in c.groups:
        parts.append(_pack_str(g.name) + struct.pack("<QQ", g.start, g.len))
    parts.extend(_pack_str(n) for n in c.concept_names)
    parts.append(np.packbits(c.bits, axis=1, bitorder="little").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_concepts(path, groups_path=None) -> ConceptMatrix:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_concepts_csv(path, groups_path)
    r = _Reader(path.read_bytes(), path)
    magic, version, n, m, n_groups = r.take("<4sIQQI")
    if magic != CONCEPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    groups = []
    for _ in range(n_groups):
        name = r.string()
        start, length = r.take("<QQ")
        groups.append(ConceptGroup(name, start, length))
    names = [r.string() for _ in range(m)]
    row_bytes = math.ceil(m / 8)
    payload = r.raw[r.pos:]
    if len(payload) != n * row_bytes:
        raise FormatError(f"{path}: expected {n * row_bytes} payload bytes, found {len(payload)}")
    packed = np.frombuffer(payload, dtype=np.uint8).reshape(n, row_bytes)
    bits = np.unpackbits(packed, axis=1, count=m, bitorder="little")
    # padding bits past M must be zero
    if m % 8 and np.any(packed[:, -1] >> (m % 8)):
        raise DataError(f"{path}: nonzero padding bits in concept payload")
    return _build_concepts(bits, names, groups, path)


def _build_concepts(bits, names, groups, path) -> ConceptMatrix:
    try:
        _check_groups([g if isinstance(g, ConceptGroup) else ConceptGroup(*g) for g in groups], len(names))
    except ConstructionError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ConceptMatrix(bits, tuple(names), tuple(groups))


def _load_concepts_csv(path: Path, groups_path=None) -> ConceptMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: missing header") from None
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(names):
                raise DataError(f"{path}:{lineno}: ragged row ({len(row)} vs {len(names)} columns)")
            try:
                rows.append([int(x) for x in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer concept entry") from None
    if not rows:
        raise DataError(f"{path}: no rows")
    gpath = Path(groups_path) if groups_path else groups_sidecar(path)
    try:
        spec = json.loads(gpath.read_text())
        groups = [ConceptGroup(str(g["name"]), int(g["start"]), int(g["len"])) for g in spec]
    except FileNotFoundError:
        raise FormatError(f"{path}: group sidecar {gpath} not found") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{gpath}: malformed group table ({exc})") from None
    return _build_concepts(np.array(rows), names, groups, path)


# --------------------------------------------------------------------------
# preprocessing


def standardize(m: FeatureMatrix, stats: StandardizationStats | None = None,
                epsilon: float = 1e-8) -> tuple[FeatureMatrix, StandardizationStats]:
    """Scale each dimension to zero mean and unit (population) std.

    With ``stats`` given, those statistics are applied unchanged, e.g. to map
    a target dataset into a source dataset's coordinates.
    """
    x = m.values.astype(np.float64)
    if stats is None:
        stats = StandardizationStats(x.mean(axis=0), np.maximum(x.std(axis=0), epsilon), epsilon)
    elif stats.mean.shape != (m.dim,):
        raise ConstructionError(f"stats are for dim {stats.mean.shape[0]}, features have dim {m.dim}")
    return FeatureMatrix((x - stats.mean) / stats.std, m.source_tag), stats


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(assignments, ratio_test: float = 0.2, ratio_val_of_train: float = 0.2,
                     seed: int = 0) -> SplitIndices:
    """Split sample indices into train/val/test, stratified per cluster.

    Each cluster sends ``round(ratio_test * n_c)`` members to test and
    ``round(ratio_val_of_train * (n_c - n_test))`` of the rest to val.
    Clusters with fewer than 3 members go entirely to train.
    """
    if not (0 < ratio_test < 1 and 0 < ratio_val_of_train < 1):
        raise ValueError("split ratios must lie in (0, 1)")
    labels = np.asarray(getattr(assignments, "labels", assignments))
    rng = np.random.default_rng(seed)
    train, val, test, small = [], [], [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 3:
            small.append(int(c))
            train.append(members)
            continue
        members = rng.permutation(members)
        n_test = _round_half_up(ratio_test * len(members))
        rest = members[n_test:]
        n_val = _round_half_up(ratio_val_of_train * len(rest))
        test.append(members[:n_test])
        val.append(rest[:n_val])
        train.append(rest[n_val:])
    if small:
        warnings.warn(f"{len(small)} cluster(s) with < 3 members assigned to train only: {small[:10]}",
                      SplitWarning, stacklevel=2)

    def cat(parts):
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    return SplitIndices(cat(train), cat(val), cat(test), seed, tuple(small))

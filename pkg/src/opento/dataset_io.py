"""OTO1 corpus container.

Layout (little-endian throughout)::

    magic   4F 54 4F 31 00 00 00 01
    record* u32 length of the record body that follows
            u16 flags (bit 0: labeled, i.e. the problem definition is stored)
            u32 nx, u32 ny, f64 cell_size, f64 volume_fraction
            [labeled only]
              loads:       u32 count, then per group
                           u8 kind, u8 dir flags (0), u32 n, u32 node ids[n], f64 fx, f64 fy
              constraints: u32 count, then per group
                           u8 kind, u8 dir flags (bit0 fix_x, bit1 fix_y), u32 n,
                           u32 node ids[n], f64 0, f64 0
            f32 densities[nx * ny]
            f64 compliance, u32 solver iterations, u64 seed, u64 index

Files are append-only; readers stream one record at a time.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .fea import ConstraintGroup, Domain, Kind, LoadGroup, ProblemSpec

MAGIC = bytes([0x4F, 0x54, 0x4F, 0x31, 0x00, 0x00, 0x00, 0x01])
FLAG_LABELED = 0x1

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<HIIdd")
_GROUP = struct.Struct("<BBI")
_FORCE = struct.Struct("<dd")
_TRAILER = struct.Struct("<dIQQ")


class CorpusError(ValueError):
    """Malformed OTO1 data."""

    def __init__(self, message, record=None, offset=None):
        super().__init__(message if record is None else f"record {record} at byte {offset}: {message}")
        self.record = record
        self.offset = offset


class MagicMismatch(CorpusError):
    pass


class TruncatedRecord(CorpusError):
    pass


class LengthMismatch(CorpusError):
    pass


@dataclass(eq=False)
class SampleRecord:
    domain: Domain
    topology: np.ndarray
    problem: ProblemSpec | None = None
    volume_fraction: float = math.nan
    final_compliance: float = math.nan
    solver_iterations: int = 0
    seed: int = 0
    index: int = 0

    def __post_init__(self):
        self.topology = np.asarray(self.topology, dtype="<f4")
        if self.problem is not None:
            if self.problem.domain != self.domain:
                raise ValueError("record domain differs from its problem's domain")
            self.volume_fraction = float(self.problem.volume_fraction)
        if self.topology.shape != (self.domain.n_elements,):
            raise ValueError(f"topology has shape {self.topology.shape}, domain needs ({self.domain.n_elements},)")

    @property
    def labeled(self) -> bool:
        return self.problem is not None

    @property
    def key(self) -> tuple[int, int]:
        return self.seed, self.index

    @classmethod
    def from_problem(cls, problem: ProblemSpec, topology=None, compliance=math.nan, iterations=0, seed=0, index=0):
        if topology is None:
            topology = np.full(problem.domain.n_elements, problem.volume_fraction)
        return cls(problem.domain, topology, problem, problem.volume_fraction, compliance, iterations, seed, index)


def encode_record(rec: SampleRecord) -> bytes:
    d = rec.domain
    parts = [_HEADER.pack(FLAG_LABELED if rec.labeled else 0, d.nx, d.ny, d.cell_size, rec.volume_fraction)]
    if rec.labeled:
        parts.append(_U32.pack(len(rec.problem.loads)))
        for g in rec.problem.loads:
            parts.append(_group(g.kind, 0, g.node_ids, g.force_per_node))
        parts.append(_U32.pack(len(rec.problem.constraints)))
        for g in rec.problem.constraints:
            parts.append(_group(g.kind, int(g.fix_x) | int(g.fix_y) << 1, g.node_ids, (0.0, 0.0)))
    parts.append(rec.topology.astype("<f4", copy=False).tobytes())
    parts.append(_TRAILER.pack(rec.final_compliance, rec.solver_iterations, rec.seed, rec.index))
    body = b"".join(parts)
    return _U32.pack(len(body)) + body


def _group(kind, flags, node_ids, force) -> bytes:
    ids = np.asarray(node_ids, dtype="<u4").tobytes()
    return _GROUP.pack(int(kind), flags, len(node_ids)) + ids + _FORCE.pack(*force)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise LengthMismatch(f"record body ends {self.pos + n - len(self.buf)} bytes early")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def decode_body(body: bytes) -> SampleRecord:
    cur = _Cursor(body)
    flags, nx, ny, cell, vf = cur.unpack(_HEADER)
    domain = Domain(nx, ny, cell)
    problem = None
    if flags & FLAG_LABELED:
        loads = []
        (count,) = cur.unpack(_U32)
        for _ in range(count):
            kind, _flags, ids, force = _read_group(cur)
            loads.append(LoadGroup(ids, force, kind))
        constraints = []
        (count,) = cur.unpack(_U32)
        for _ in range(count):
            kind, dflags, ids, _force = _read_group(cur)
            constraints.append(ConstraintGroup(ids, bool(dflags & 1), bool(dflags & 2), kind))
        problem = ProblemSpec(domain, loads, constraints, vf)
    topology = np.frombuffer(cur.take(4 * nx * ny), dtype="<f4").copy()
    compliance, iterations, seed, index = cur.unpack(_TRAILER)
    if cur.pos != len(body):
        raise LengthMismatch(f"{len(body) - cur.pos} unread bytes after the record trailer")
    return SampleRecord(domain, topology, problem, vf, compliance, iterations, seed, index)


def _read_group(cur: _Cursor):
    kind, flags, n = cur.unpack(_GROUP)
    ids = np.frombuffer(cur.take(4 * n), dtype="<u4").tolist()
    force = cur.unpack(_FORCE)
    return Kind(kind), flags, ids, force


class CorpusWriter:
    """Append-only OTO1 writer; a new or empty file gets the magic first."""

    def __init__(self, path, append: bool = False):
        self.path = os.fspath(path)
        exists = append and os.path.exists(self.path) and os.path.getsize(self.path) > 0
        if exists:
            with open(self.path, "rb") as fh:
                if fh.read(len(MAGIC)) != MAGIC:
                    raise MagicMismatch(f"{self.path} is not an OTO1 file")
        self._fh: BinaryIO = open(self.path, "ab" if exists else "wb")
        self.bytes_written = 0
        if not exists:
            self._fh.write(MAGIC)
            self.bytes_written += len(MAGIC)

    def write(self, record: SampleRecord) -> int:
        data = encode_record(record)
        self._fh.write(data)
        self.bytes_written += len(data)
        return len(data)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_corpus(records: Iterable[SampleRecord], path, append: bool = False) -> int:
    """Write records and return the number of bytes written."""
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty corpus")
    with CorpusWriter(path, append=append) as w:
        for rec in records:
            w.write(rec)
        return w.bytes_written


def iter_corpus(path) -> Iterator[SampleRecord]:
    """Stream records; a damaged record raises after all earlier ones were yielded."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise MagicMismatch(f"{os.fspath(path)} does not start with the OTO1 magic")
        offset = len(MAGIC)
        k = 0
        while True:
            head = fh.read(_U32.size)
            if not head:
                return
            if len(head) < _U32.size:
                raise TruncatedRecord("partial length field", k, offset)
            (length,) = _U32.unpack(head)
            body = fh.read(length)
            if len(body) < length:
                raise TruncatedRecord(f"declared {length} bytes, only {len(body)} remain", k, offset)
            try:
                yield decode_body(body)
            except LengthMismatch as exc:
                raise LengthMismatch(str(exc), k, offset) from None
            except (ValueError, struct.error) as exc:
                raise LengthMismatch(f"undecodable body ({exc})", k, offset) from None
            offset += _U32.size + length
            k += 1


def read_corpus(path) -> list[SampleRecord]:
    return list(iter_corpus(path))


def split_fraction(key: tuple[int, int], salt: int = 0) -> float:
    """Deterministic pseudo-uniform value in [0, 1) for a (seed, index) key."""
    digest = hashlib.blake2b(struct.pack("<QQQ", salt, *key), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0**64


def split_corpus(path, train_path, test_path, test_fraction: float, salt: int = 0) -> tuple[int, int]:
    """Stream ``path`` into train/test files; membership depends only on the key.

    Returns (train count, test count).
    """
    if not 0 <= test_fraction <= 1:
        raise ValueError("test_fraction must lie in [0, 1]")
    counts = [0, 0]
    with CorpusWriter(train_path) as train, CorpusWriter(test_path) as test:
        for rec in iter_corpus(path):
            is_test = split_fraction(rec.key, salt) < test_fraction
            (test if is_test else train).write(rec)
            counts[is_test] += 1
    return counts[0], counts[1]


@dataclass
class CorpusStats:
    count: int
    labeled: int
    element_counts: np.ndarray
    aspect_ratios: np.ndarray
    volume_fractions: np.ndarray

    def histograms(self, bins: int = 10) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            "element_count": np.histogram(self.element_counts, bins=bins, range=(2**12, 2**14)),
            "aspect_ratio": np.histogram(np.log10(self.aspect_ratios), bins=bins, range=(-1, 1)),
            "volume_fraction": np.histogram(self.volume_fractions, bins=bins, range=(0, 1)),
        }

    def render(self, bins: int = 10) -> str:
        lines = [f"records: {self.count}", f"labeled: {self.labeled}"]
        if self.count:
            labels = {"element_count": "EC", "aspect_ratio": "log10 AR", "volume_fraction": "VF"}
            for name, (hist, edges) in self.histograms(bins).items():
                lines.append(f"{labels[name]} histogram:")
                top = max(1, int(hist.max()))
                for h, lo, hi in zip(hist, edges[:-1], edges[1:]):
                    lines.append(f"  [{lo:9.3f}, {hi:9.3f})  {h:6d}  {'#' * round(40 * h / top)}")
        return "\n".join(lines)


def corpus_stats(path) -> CorpusStats:
    ec, ar, vf = [], [], []
    count = labeled = 0
    for rec in iter_corpus(path):
        count += 1
        labeled += rec.labeled
        ec.append(rec.domain.n_elements)
        ar.append(rec.domain.aspect_ratio)
        vf.append(rec.volume_fraction)
    return CorpusStats(count, labeled, np.array(ec), np.array(ar), np.array(vf))

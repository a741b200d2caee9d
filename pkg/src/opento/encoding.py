"""Fixed-size problem embedding built from order-free point-set encoders.

Layout of the embedding vector (``EMBEDDING_DIM`` = 705 by default)::

    [ boundary set (256) | force set (256) | VF (64) | cell size (64) | aspect ratio (64) | null flag (1) ]

Weights are seeded and frozen. Point sets are canonically sorted before the
per-point map runs, so the pooled statistics are bit-identical under any
input permutation.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .fea import ProblemSpec


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 0
    point_hidden: int = 128
    point_width: int = 128
    set_dim: int = 256
    scalar_hidden: int = 64
    scalar_dim: int = 64

    @property
    def blocks(self) -> tuple[tuple[str, int], ...]:
        return (
            ("boundary", self.set_dim),
            ("force", self.set_dim),
            ("volume_fraction", self.scalar_dim),
            ("cell_size", self.scalar_dim),
            ("aspect_ratio", self.scalar_dim),
            ("null_flag", 1),
        )

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.blocks)

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, n in self.blocks:
            out[name] = slice(start, start + n)
            start += n
        return out


EMBEDDING_DIM = EncoderConfig().dim


@dataclass(frozen=True, eq=False)
class PointSet:
    """Points in [0, 1]^2 with one feature row per point."""

    points: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=float)
        if feats.size == 0 and len(pts) == 0:
            feats = feats.reshape(0, feats.shape[-1] if feats.ndim == 2 else 2)
        if feats.ndim != 2 or len(feats) != len(pts):
            raise ValueError(f"features must have shape ({len(pts)}, k), got {feats.shape}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return len(self.points)

    def rows(self) -> np.ndarray:
        """Canonically ordered (x, y, features...) rows."""
        table = np.hstack([self.points, self.features])
        if len(table) < 2:
            return table
        order = np.lexsort(table.T[::-1])
        return table[order]


class FeedForward:
    """Dense ReLU network with frozen, seeded weights (no output activation)."""

    def __init__(self, sizes, seed: int, tag: int):
        rng = np.random.Generator(np.random.Philox(key=[seed, tag]))
        self.layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out))
            b = rng.normal(0.0, 0.01, fan_out)
            W.setflags(write=False)
            b.setflags(write=False)
            self.layers.append((W, b))

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def __call__(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for k, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if k < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h


def pool(mapped: np.ndarray) -> np.ndarray:
    """Concatenate mean, max and min over the rows of ``mapped``."""
    mapped = np.asarray(mapped, dtype=float)
    if len(mapped) == 0:
        raise ValueError("cannot pool an empty set")
    return np.concatenate([mapped.sum(axis=0) / len(mapped), mapped.max(axis=0), mapped.min(axis=0)])


class SetEncoder:
    """Shared per-point map, mean/max/min pooling, then a linear projection."""

    def __init__(self, feature_dim: int, config: EncoderConfig, tag: int):
        self.point_map = FeedForward((2 + feature_dim, config.point_hidden, config.point_width), config.seed, tag)
        self.project = FeedForward((3 * config.point_width, config.set_dim), config.seed, tag + 1)
        self.dim = config.set_dim

    def pooled(self, s: PointSet) -> np.ndarray:
        return pool(self.point_map(s.rows()))

    def __call__(self, s: PointSet) -> np.ndarray:
        if len(s) == 0:
            return np.zeros(self.dim)
        return self.project(self.pooled(s))


def bpom_encode(s: PointSet, encoder: SetEncoder) -> np.ndarray:
    return encoder(s)


def boundary_points(problem: ProblemSpec) -> PointSet:
    """One point per fixed node with (fix_x, fix_y) flags ORed over groups."""
    flags: dict[int, list[bool]] = {}
    for g in problem.constraints:
        for n in g.node_ids:
            f = flags.setdefault(n, [False, False])
            f[0] |= g.fix_x
            f[1] |= g.fix_y
    return _to_points(problem, flags)


def force_points(problem: ProblemSpec) -> PointSet:
    """One point per loaded node carrying the summed force."""
    forces: dict[int, list[float]] = {}
    for g in problem.loads:
        for n in g.node_ids:
            f = forces.setdefault(n, [0.0, 0.0])
            f[0] += g.force_per_node[0]
            f[1] += g.force_per_node[1]
    return _to_points(problem, forces)


def _to_points(problem: ProblemSpec, table: dict) -> PointSet:
    d = problem.domain
    ids = np.array(sorted(table), dtype=np.int64)
    i, j = d.node_coords(ids)
    pts = np.column_stack([i / d.nx, j / d.ny]) if len(ids) else np.zeros((0, 2))
    feats = np.array([table[n] for n in ids.tolist()], dtype=float).reshape(len(ids), 2)
    return PointSet(pts, feats)


class ProblemEncoder:
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        self.config = config
        self.boundary = SetEncoder(2, config, tag=1)
        self.force = SetEncoder(2, config, tag=3)
        sizes = (1, config.scalar_hidden, config.scalar_dim)
        self.vf = FeedForward(sizes, config.seed, 5)
        self.cell = FeedForward(sizes, config.seed, 6)
        self.ratio = FeedForward(sizes, config.seed, 7)
        self.slices = config.block_slices()

    @property
    def dim(self) -> int:
        return self.config.dim

    def encode(self, problem: ProblemSpec, drop_boundary: bool = False, drop_force: bool = False) -> np.ndarray:
        """Concatenated embedding; ``drop_*`` zero one set block."""
        d = problem.domain
        empty = PointSet(np.zeros((0, 2)), np.zeros((0, 2)))
        parts = [
            self.boundary(empty if drop_boundary else boundary_points(problem)),
            self.force(empty if drop_force else force_points(problem)),
            # scale inputs are log-compressed so typical values sit near O(1)
            self.vf([problem.volume_fraction]),
            self.cell([math.log2(d.cell_size) / 10.0]),
            self.ratio([math.log(d.aspect_ratio)]),
            np.zeros(1),
        ]
        return np.concatenate(parts)

    def null(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.slices["null_flag"]] = 1.0
        return out

    def is_null(self, embedding) -> bool:
        return bool(np.asarray(embedding)[self.slices["null_flag"]][0] == 1.0)


@functools.lru_cache(maxsize=4)
def default_encoder(seed: int = 0) -> ProblemEncoder:
    return ProblemEncoder(EncoderConfig(seed=seed))


def encode_problem(problem: ProblemSpec, seed: int = 0) -> np.ndarray:
    return default_encoder(seed).encode(problem)


def null_embedding(seed: int = 0) -> np.ndarray:
    return default_encoder(seed).null()

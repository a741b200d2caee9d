"""Classic benchmark load cases on rectangular grids."""
from __future__ import annotations

from .fea import ConstraintGroup, Domain, Kind, LoadGroup, ProblemSpec


def mbb_beam(nx: int = 60, ny: int = 20, volume_fraction: float = 0.5) -> ProblemSpec:
    """Symmetric half of a simply supported beam, unit load at the top-left."""
    d = Domain(nx, ny)
    left = [int(d.node_id(0, j)) for j in range(ny + 1)]
    return ProblemSpec(
        d,
        [LoadGroup([int(d.node_id(0, ny))], (0.0, -1.0), Kind.CORNER_POINT)],
        [ConstraintGroup(left, True, False, Kind.FULL_EDGE),
         ConstraintGroup([int(d.node_id(nx, 0))], False, True, Kind.CORNER_POINT)],
        volume_fraction,
    )


def cantilever(nx: int = 64, ny: int = 64, volume_fraction: float = 0.4) -> ProblemSpec:
    """Clamped left edge, unit downward load at the middle of the right edge."""
    d = Domain(nx, ny)
    left = [int(d.node_id(0, j)) for j in range(ny + 1)]
    return ProblemSpec(
        d,
        [LoadGroup([int(d.node_id(nx, ny // 2))], (0.0, -1.0), Kind.EDGE_POINT)],
        [ConstraintGroup(left, True, True, Kind.FULL_EDGE)],
        volume_fraction,
    )


def bridge(nx: int = 64, ny: int = 64, volume_fraction: float = 0.3) -> ProblemSpec:
    """Pinned bottom corners, unit total load spread over the top edge."""
    d = Domain(nx, ny)
    top = [int(d.node_id(i, ny)) for i in range(nx + 1)]
    return ProblemSpec(
        d,
        [LoadGroup(top, (0.0, -1.0 / len(top)), Kind.FULL_EDGE)],
        [ConstraintGroup([int(d.node_id(0, 0)), int(d.node_id(nx, 0))], True, True, Kind.CORNER_POINT)],
        volume_fraction,
    )


CANONICAL = {"mbb": mbb_beam, "cantilever": cantilever, "bridge": bridge}

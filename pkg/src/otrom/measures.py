"""Discrete probability measures built from gridded solution fields.

A nodal field is recast as a weighted point cloud: the support is the
set of physical node coordinates and the weights are the shifted,
mass-normalized nodal values. Ground costs between supports are
Euclidean distances raised to a power ``p``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "InvalidFieldError",
    "MeasureError",
    "GridGeometry",
    "Field",
    "DiscreteMeasure",
    "CostMatrix",
    "unit_grid",
    "tensor_axes",
    "normalize_field",
    "cost_matrix",
    "second_moment",
]

WEIGHT_SUM_TOL = 1e-12


class InvalidFieldError(ValueError):
    """A nodal field is empty or contains non-finite values."""


class MeasureError(ValueError):
    """A discrete-measure invariant is violated."""


def _frozen_array(a, dtype=np.float64) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridGeometry:
    """Structured node layout on the unit square.

    Nodes are ordered row-major, ``node = iy * nx + ix``, so a flat field
    reshapes to an ``(ny, nx)`` image. ``coords[node]`` is the physical
    (x, y) position of a node; for space-time problems the second
    coordinate is time rescaled to [0, 1].
    """

    nx: int
    ny: int
    coords: np.ndarray

    def __post_init__(self):
        coords = _frozen_array(np.atleast_2d(self.coords))
        object.__setattr__(self, "coords", coords)
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one node per axis")
        if coords.shape != (self.nx * self.ny, 2):
            raise ValueError(
                f"expected {self.nx * self.ny} coordinate rows of dimension 2, "
                f"got shape {coords.shape}"
            )
        if coords.min() < -1e-12 or coords.max() > 1.0 + 1e-12:
            raise ValueError("node coordinates must lie in [0, 1] per axis")

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny


def unit_grid(nx: int, ny: int) -> GridGeometry:
    """Uniform tensor grid covering the unit square (a single line if ny=1)."""
    x = np.linspace(0.0, 1.0, nx) if nx > 1 else np.zeros(1)
    y = np.linspace(0.0, 1.0, ny) if ny > 1 else np.zeros(1)
    xx, yy = np.meshgrid(x, y)  # shape (ny, nx), row-major node order
    coords = np.column_stack([xx.ravel(), yy.ravel()])
    return GridGeometry(nx=nx, ny=ny, coords=coords)


def tensor_axes(geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray] | None:
    """Return the (x, y) axis vectors if the grid is an exact tensor product."""
    x = geometry.coords[: geometry.nx, 0]
    y = geometry.coords[:: geometry.nx, 1]
    xx, yy = np.meshgrid(x, y)
    rebuilt = np.column_stack([xx.ravel(), yy.ravel()])
    if np.array_equal(rebuilt, geometry.coords):
        return x.copy(), y.copy()
    return None


@dataclass(frozen=True)
class Field:
    """Nodal solution values attached to a grid."""

    values: np.ndarray
    geometry: GridGeometry

    def __post_init__(self):
        values = _frozen_array(np.ravel(self.values))
        object.__setattr__(self, "values", values)
        if values.size == 0:
            raise InvalidFieldError("field has no nodes")
        if values.size != self.geometry.n_nodes:
            raise InvalidFieldError(
                f"field has {values.size} values for {self.geometry.n_nodes} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidFieldError("field contains non-finite values")

    def as_image(self) -> np.ndarray:
        """Return the field as an (ny, nx) array."""
        return self.values.reshape(self.geometry.ny, self.geometry.nx)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud with probability weights.

    ``shift`` and ``total_mass`` record how the originating field was
    made nonnegative and normalized, so the transformation stays
    invertible.
    """

    support: np.ndarray
    weights: np.ndarray
    shift: float = 0.0
    total_mass: float = 1.0

    def __post_init__(self):
        support = _frozen_array(np.atleast_2d(self.support))
        weights = _frozen_array(np.ravel(self.weights))
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)
        if support.shape[0] != weights.size:
            raise MeasureError(
                f"{support.shape[0]} support points but {weights.size} weights"
            )
        if weights.size == 0:
            raise MeasureError("measure has empty support")
        if np.any(weights < 0.0):
            raise MeasureError("weights must be nonnegative")
        total = float(weights.sum())
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise MeasureError(f"weights sum to {total!r}, expected 1")

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs, entries = ground distance ** order."""

    entries: np.ndarray
    order: float

    def __post_init__(self):
        entries = _frozen_array(np.atleast_2d(self.entries))
        object.__setattr__(self, "entries", entries)
        if self.order < 1.0:
            raise ValueError("cost order must satisfy p >= 1")
        if np.any(entries < 0.0):
            raise ValueError("cost entries must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def normalize_field(field: Field) -> DiscreteMeasure:
    """Turn a nodal field into a probability measure on the grid nodes.

    Negative fields are shifted up by their minimum before the mass
    normalization, preserving the relative spatial structure. A field
    whose shifted values sum to zero maps to the uniform measure so that
    degenerate snapshots never abort a batch run.
    """
    values = field.values
    shift = float(min(values.min(), 0.0))
    shifted = values - shift
    total = float(shifted.sum())
    if total <= 0.0:
        weights = np.full(values.size, 1.0 / values.size)
    else:
        weights = shifted / total
        weights = weights / weights.sum()
    return DiscreteMeasure(
        support=field.geometry.coords,
        weights=weights,
        shift=shift,
        total_mass=total,
    )


def cost_matrix(source: DiscreteMeasure, target: DiscreteMeasure, p: float = 2.0) -> CostMatrix:
    """Euclidean ground cost raised to ``p`` between two supports.

    Computed from explicit coordinate differences so that identical
    supports give an exactly zero diagonal.
    """
    if source.dim != target.dim:
        raise MeasureError(
            f"support dimensions differ: {source.dim} vs {target.dim}"
        )
    if p < 1.0:
        raise ValueError("cost order must satisfy p >= 1")
    diff = source.support[:, None, :] - target.support[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    entries = sq if p == 2.0 else sq ** (p / 2.0)
    return CostMatrix(entries=entries, order=p)


def second_moment(m: DiscreteMeasure) -> float:
    """Weighted sum of squared support norms, sum_i |x_i|^2 w_i."""
    return float(m.weights @ np.einsum("ij,ij->i", m.support, m.support))

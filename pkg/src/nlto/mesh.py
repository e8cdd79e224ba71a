"""Structured quadrilateral mesh of the rectangular design domain.

Node ids run row-major from the top-left corner: node = row * (nx + 1) + col,
with row 0 on the top edge and col 0 on the left edge. Element ids follow the
same row-major order. This fixed convention is what makes the channel images
of the dataset reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Mesh:
    """Uniform grid of square bilinear quads.

    elem_conn lists the four nodes of each element counter-clockwise
    (bottom-left, bottom-right, top-right, top-left in x/y coordinates,
    y growing upward), so the isoparametric Jacobian is positive.
    """

    nx: int
    ny: int
    width: float
    height: float
    node_coords: np.ndarray
    elem_conn: np.ndarray

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elems(self) -> int:
        return self.nx * self.ny

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def side(self) -> float:
        """Element edge length (elements are square by construction)."""
        return self.width / self.nx

    def left_nodes(self) -> np.ndarray:
        return np.arange(self.ny + 1) * (self.nx + 1)

    def right_nodes(self) -> np.ndarray:
        return np.arange(self.ny + 1) * (self.nx + 1) + self.nx

    def element_centers(self) -> np.ndarray:
        """(n_elems, 2) centers in x/y coordinates, element-id order."""
        rows, cols = np.divmod(np.arange(self.n_elems), self.nx)
        h = self.side
        x = (cols + 0.5) * h
        y = self.height - (rows + 0.5) * h
        return np.column_stack([x, y])


@dataclass(frozen=True)
class BoundaryConditions:
    """Clamped left edge plus a single point load on the right edge.

    All prescribed displacements are zero. fixed_dofs is sorted; the loaded
    node is never part of it (left and right edge sets are disjoint for
    nx >= 1).
    """

    fixed_dofs: np.ndarray
    load_dof_pair: tuple
    load_vector: tuple

    def load_full(self, n_dofs: int) -> np.ndarray:
        """Global load vector with the point load scattered in."""
        f = np.zeros(n_dofs)
        f[self.load_dof_pair[0]] = self.load_vector[0]
        f[self.load_dof_pair[1]] = self.load_vector[1]
        return f


def build_grid(nx: int, ny: int, width: float, height: float) -> Mesh:
    """Build the uniform mesh; raises ValueError on degenerate arguments."""
    if nx < 1 or ny < 1:
        raise ValueError(f"element counts must be >= 1, got nx={nx}, ny={ny}")
    if width <= 0 or height <= 0:
        raise ValueError(f"domain dimensions must be positive, got {width} x {height}")
    if abs(width / nx - height / ny) > 1e-12 * max(width / nx, height / ny):
        raise ValueError("mesh must consist of square elements (width/nx == height/ny)")

    cols, rows = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    x = cols.ravel() * (width / nx)
    y = height - rows.ravel() * (height / ny)
    node_coords = np.column_stack([x, y])

    er, ec = np.divmod(np.arange(nx * ny), nx)
    n_bl = (er + 1) * (nx + 1) + ec
    conn = np.column_stack([n_bl, n_bl + 1, n_bl - (nx + 1) + 1, n_bl - (nx + 1)])

    return Mesh(nx=nx, ny=ny, width=float(width), height=float(height),
                node_coords=node_coords, elem_conn=conn.astype(np.int64))


def make_boundary(mesh: Mesh, load_row: int, angle: float, magnitude: float) -> BoundaryConditions:
    """Clamp the left edge and place a point load at the given right-edge row."""
    if not 0 <= load_row <= mesh.ny:
        raise ValueError(f"load_row must lie in [0, {mesh.ny}], got {load_row}")

    left = mesh.left_nodes()
    fixed = np.sort(np.concatenate([2 * left, 2 * left + 1]))

    node = load_row * (mesh.nx + 1) + mesh.nx
    load = (magnitude * np.cos(angle), magnitude * np.sin(angle))
    return BoundaryConditions(fixed_dofs=fixed,
                              load_dof_pair=(2 * node, 2 * node + 1),
                              load_vector=load)


def element_dofs(mesh: Mesh, e: int) -> np.ndarray:
    """The 8 global dof indices (x, y per node, counter-clockwise) of element e."""
    if not 0 <= e < mesh.n_elems:
        raise ValueError(f"element id {e} out of range [0, {mesh.n_elems})")
    nodes = mesh.elem_conn[e]
    dofs = np.empty(8, dtype=np.int64)
    dofs[0::2] = 2 * nodes
    dofs[1::2] = 2 * nodes + 1
    return dofs


def all_element_dofs(mesh: Mesh) -> np.ndarray:
    """(n_elems, 8) dof map, same layout as element_dofs per row."""
    dofs = np.empty((mesh.n_elems, 8), dtype=np.int64)
    dofs[:, 0::2] = 2 * mesh.elem_conn
    dofs[:, 1::2] = 2 * mesh.elem_conn + 1
    return dofs

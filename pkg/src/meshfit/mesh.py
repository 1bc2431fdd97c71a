"""2D meshes with per-element polynomial orders and hanging-order edge constraints.

Element node coordinates are stored per element as a (2, num_nodes) block.
Independent ("true") position unknowns live at mesh vertices, on edge
interiors at the edge's governing order (the minimum of the two adjacent
element orders), and inside elements.  On a mixed-order edge the high-order
side carries no independent edge unknowns: its edge nodes are interpolated
from the low-order side's trace, which keeps the geometry continuous across
the edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .basis import (QUAD, TRI, basis_tables, gauss_lobatto_nodes, lagrange_1d,
                    reference_element, _gauss_lobatto_cached)
from .errors import MeshInvalidError, MeshStructureError


@dataclass
class MeshElement:
    geometry: str
    verts: np.ndarray        # vertex ids, counterclockwise
    order: int
    coords: np.ndarray       # (2, num_nodes) node coordinates
    attribute: int = 1

    def copy(self) -> "MeshElement":
        return MeshElement(self.geometry, self.verts.copy(), self.order,
                           self.coords.copy(), self.attribute)


@dataclass(frozen=True)
class EdgeSide:
    element: int
    local_edge: int
    forward: bool  # local traversal runs from the smaller to the larger vertex id


@dataclass(frozen=True)
class EdgeRecord:
    verts: tuple[int, int]   # (min vertex id, max vertex id)
    sides: tuple[EdgeSide, ...]


@dataclass(frozen=True)
class EdgeConstraint:
    """Interpolation rule tying a high-order edge trace to the low-order side."""
    edge: int
    order_low: int
    order_high: int
    matrix: np.ndarray       # (order_high + 1, order_low + 1) trace interpolation

    def __post_init__(self):
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=float))


@lru_cache(maxsize=None)
def prolongation_matrix(order_low: int, order_high: int) -> np.ndarray:
    """Edge-trace interpolation from order_low to order_high Gauss-Lobatto nodes."""
    if order_high < order_low:
        raise ValueError("order_high must be >= order_low")
    if order_high == order_low:
        out = np.eye(order_low + 1)
    else:
        out = lagrange_1d(_gauss_lobatto_cached(order_low),
                          _gauss_lobatto_cached(order_high))
    out.flags.writeable = False
    return out


class MixedOrderMesh:
    """Mesh of quads or triangles with an independent order per element."""

    dimension = 2

    def __init__(self, vertices, elements, marked_faces=()):
        self.vertices = np.array(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshStructureError("vertices must be an (n, 2) array")
        self.elements: list[MeshElement] = list(elements)
        self.marked_faces: set[int] = set(marked_faces)
        self._edges: tuple[EdgeRecord, ...] | None = None
        self._edge_index: dict[tuple[int, int], int] | None = None
        self._dofmap: DofMap | None = None
        nv = len(self.vertices)
        for e, el in enumerate(self.elements):
            el.verts = np.asarray(el.verts, dtype=int)
            if el.verts.min(initial=0) < 0 or el.verts.max(initial=-1) >= nv:
                raise MeshStructureError(f"element {e} references unknown vertices")
            ref = reference_element(el.geometry, el.order)
            el.coords = np.asarray(el.coords, dtype=float)
            if el.coords.shape != (2, ref.num_nodes):
                raise MeshStructureError(
                    f"element {e} has coords {el.coords.shape}, "
                    f"expected (2, {ref.num_nodes})")

    # -- connectivity -----------------------------------------------------

    @property
    def edges(self) -> tuple[EdgeRecord, ...]:
        if self._edges is None:
            self._build_edges()
        return self._edges

    def edge_id(self, v0: int, v1: int) -> int:
        if self._edge_index is None:
            self._build_edges()
        key = (min(v0, v1), max(v0, v1))
        if key not in self._edge_index:
            raise MeshStructureError(f"no edge between vertices {v0} and {v1}")
        return self._edge_index[key]

    def _build_edges(self):
        found: dict[tuple[int, int], list[EdgeSide]] = {}
        order_of_keys: list[tuple[int, int]] = []
        for e, el in enumerate(self.elements):
            nverts = len(el.verts)
            for le in range(nverts):
                a = int(el.verts[le])
                b = int(el.verts[(le + 1) % nverts])
                if a == b:
                    raise MeshStructureError(f"element {e} has a degenerate edge")
                key = (min(a, b), max(a, b))
                if key not in found:
                    found[key] = []
                    order_of_keys.append(key)
                found[key].append(EdgeSide(e, le, forward=(a < b)))
        records = []
        for key in order_of_keys:
            sides = found[key]
            if len(sides) > 2:
                raise MeshStructureError(f"edge {key} is shared by {len(sides)} elements")
            if len(sides) == 2 and sides[0].forward == sides[1].forward:
                raise MeshStructureError(
                    f"edge {key} is traversed in the same direction by both elements; "
                    "element orientations are inconsistent")
            records.append(EdgeRecord(key, tuple(sides)))
        self._edges = tuple(records)
        self._edge_index = {r.verts: k for k, r in enumerate(records)}

    def boundary_edges(self) -> list[int]:
        return [k for k, r in enumerate(self.edges) if len(r.sides) == 1]

    def edge_order(self, edge_id: int) -> int:
        """Governing order of an edge: the minimum of the adjacent element orders."""
        rec = self.edges[edge_id]
        return min(self.elements[s.element].order for s in rec.sides)

    # -- geometry evaluation ----------------------------------------------

    def eval_map(self, e: int, ref_points) -> np.ndarray:
        """Physical image of reference points under element ``e``'s map, (npts, 2)."""
        el = self.elements[e]
        B = reference_element(el.geometry, el.order).eval_basis(ref_points)
        return B @ el.coords.T

    def eval_jacobian(self, e: int, ref_points) -> np.ndarray:
        """Jacobians of element ``e``'s map at reference points, (npts, 2, 2)."""
        el = self.elements[e]
        G = reference_element(el.geometry, el.order).eval_basis_grad(ref_points)
        return np.einsum("ai,mib->mab", el.coords, G)

    def _sample_dets(self, e: int) -> np.ndarray:
        """det of the map Jacobian at quadrature plus nodal sample points."""
        el = self.elements[e]
        tables = basis_tables(el.geometry, el.order)
        dets = []
        for G in (tables.grad_at_quad, tables.grad_at_nodes):
            A = np.einsum("ai,mib->mab", el.coords, G)
            dets.append(A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0])
        return np.concatenate(dets)

    def min_det_jacobian(self, e: int) -> float:
        """Minimum Jacobian determinant of element ``e`` over the sample set."""
        return float(self._sample_dets(e).min())

    def min_det(self, element_ids=None) -> float:
        """Minimum Jacobian determinant over (a subset of) the mesh."""
        ids = range(len(self.elements)) if element_ids is None else element_ids
        return min(self.min_det_jacobian(e) for e in ids)

    def is_valid(self) -> bool:
        return self.min_det() > 0.0

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.hypot(*(hi - lo)))

    def element_diameter(self, e: int) -> float:
        c = self.elements[e].coords
        return float(np.hypot(*(c.max(axis=1) - c.min(axis=1))))

    # -- mutation ----------------------------------------------------------

    def invalidate(self):
        self._dofmap = None

    def set_order(self, e: int, new_order: int):
        """Resample element ``e`` at a new order.

        Raising the order preserves the geometry exactly; lowering it
        interpolates the current map at the lower-order node set.
        """
        el = self.elements[e]
        if new_order == el.order:
            return
        new_nodes = reference_element(el.geometry, new_order).nodes
        new_coords = self.eval_map(e, new_nodes).T.copy()
        el.order = new_order
        el.coords = new_coords
        self.invalidate()

    def copy(self) -> "MixedOrderMesh":
        out = MixedOrderMesh(self.vertices.copy(),
                             [el.copy() for el in self.elements],
                             set(self.marked_faces))
        return out

    # -- degrees of freedom -----------------------------------------------

    def dof_map(self) -> "DofMap":
        if self._dofmap is None:
            self._dofmap = DofMap(self)
        return self._dofmap

    @property
    def num_position_dofs(self) -> int:
        """Number of independent position nodes (vertices + edge + interior)."""
        return self.dof_map().num_nodes

    def order_histogram(self) -> dict[int, int]:
        hist: dict[int, int] = {}
        for el in self.elements:
            hist[el.order] = hist.get(el.order, 0) + 1
        return dict(sorted(hist.items()))


class DofMap:
    """Mapping between independent position nodes and element node blocks.

    Node numbering: vertices first, then edge-interior nodes per edge at the
    edge's governing order, then element-interior nodes.  ``expand`` is a
    sparse matrix taking a per-node vector (or (n, k) stack) to the
    concatenation of all element node blocks, applying trace interpolation on
    constrained high-order edge nodes.
    """

    def __init__(self, mesh: MixedOrderMesh):
        edges = mesh.edges
        nv = len(mesh.vertices)
        self.num_vertices = nv
        self.edge_offsets = np.zeros(len(edges), dtype=int)
        self.edge_counts = np.zeros(len(edges), dtype=int)
        pos = nv
        for k in range(len(edges)):
            cnt = mesh.edge_order(k) - 1
            self.edge_offsets[k] = pos
            self.edge_counts[k] = cnt
            pos += cnt
        self.interior_offsets = np.zeros(len(mesh.elements), dtype=int)
        self.interior_counts = np.zeros(len(mesh.elements), dtype=int)
        for e, el in enumerate(mesh.elements):
            ref = reference_element(el.geometry, el.order)
            self.interior_offsets[e] = pos
            self.interior_counts[e] = len(ref.interior)
            pos += len(ref.interior)
        self.num_nodes = pos

        # owner side of each edge: a side at the governing order, lowest
        # element id first, so extraction is deterministic
        self.edge_owner: list[EdgeSide] = []
        for k, rec in enumerate(edges):
            p_edge = mesh.edge_order(k)
            owner = min((s for s in rec.sides
                         if mesh.elements[s.element].order == p_edge),
                        key=lambda s: s.element)
            self.edge_owner.append(owner)

        self.element_slices: list[slice] = []
        self.local_node_ids: list[np.ndarray] = []
        rows, cols, vals = [], [], []
        base = 0
        for e, el in enumerate(mesh.elements):
            ref = reference_element(el.geometry, el.order)
            n = ref.num_nodes
            self.element_slices.append(slice(base, base + n))
            ids = np.full(n, -1, dtype=int)
            for c, v in zip(ref.corners, el.verts):
                ids[c] = int(v)
            for le, enodes in enumerate(ref.edge_nodes):
                a = int(el.verts[le])
                b = int(el.verts[(le + 1) % len(el.verts)])
                k = mesh.edge_id(a, b)
                p_edge = mesh.edge_order(k)
                forward = a < b
                canonical = enodes if forward else enodes[::-1]
                if el.order == p_edge:
                    for idx in range(1, el.order):
                        ids[canonical[idx]] = self.edge_offsets[k] + idx - 1
                else:
                    P = prolongation_matrix(p_edge, el.order)
                    vmin, vmax = edges[k].verts
                    low_cols = ([vmin]
                                + [self.edge_offsets[k] + i for i in range(p_edge - 1)]
                                + [vmax])
                    for idx in range(1, el.order):
                        local = canonical[idx]
                        for col, w in zip(low_cols, P[idx]):
                            rows.append(base + local)
                            cols.append(col)
                            vals.append(w)
            for idx, node in enumerate(ref.interior):
                ids[node] = self.interior_offsets[e] + idx
            mapped = ids >= 0
            rows.extend((base + np.nonzero(mapped)[0]).tolist())
            cols.extend(ids[mapped].tolist())
            vals.extend([1.0] * int(mapped.sum()))
            self.local_node_ids.append(ids)
            base += n
        self.total_local = base
        self.expand = sp.csr_matrix(
            (vals, (rows, cols)), shape=(base, self.num_nodes))

    def extract(self, mesh: MixedOrderMesh) -> np.ndarray:
        """Independent node positions, shape (num_nodes, 2)."""
        t = np.empty((self.num_nodes, 2))
        t[:self.num_vertices] = mesh.vertices
        for k, owner in enumerate(self.edge_owner):
            cnt = self.edge_counts[k]
            if cnt == 0:
                continue
            el = mesh.elements[owner.element]
            enodes = reference_element(el.geometry, el.order).edge_nodes[owner.local_edge]
            canonical = enodes if owner.forward else enodes[::-1]
            o = self.edge_offsets[k]
            t[o:o + cnt] = el.coords[:, canonical[1:-1]].T
        for e, el in enumerate(mesh.elements):
            cnt = self.interior_counts[e]
            if cnt == 0:
                continue
            ref = reference_element(el.geometry, el.order)
            o = self.interior_offsets[e]
            t[o:o + cnt] = el.coords[:, ref.interior].T
        return t

    def scatter(self, mesh: MixedOrderMesh, t: np.ndarray):
        """Write independent node positions back into vertex and element storage."""
        x_all = self.expand @ t
        mesh.vertices[:] = t[:self.num_vertices]
        for e, el in enumerate(mesh.elements):
            el.coords[:] = x_all[self.element_slices[e]].T

    def expand_blocks(self, t: np.ndarray) -> np.ndarray:
        """Concatenated element node values for a per-node vector or stack."""
        return self.expand @ t

    def extract_scalar(self, mesh: MixedOrderMesh, blocks: list[np.ndarray]) -> np.ndarray:
        """Independent nodal values of a per-element scalar field."""
        t = np.empty(self.num_nodes)
        for e, el in enumerate(mesh.elements):
            ids = self.local_node_ids[e]
            mapped = ids >= 0
            t[ids[mapped]] = np.asarray(blocks[e])[mapped]
        return t

    def scatter_scalar(self, t: np.ndarray) -> list[np.ndarray]:
        """Per-element blocks of a scalar field given independent nodal values."""
        x_all = self.expand @ t
        return [x_all[s].copy() for s in self.element_slices]

    def edge_node_ids(self, edge_id: int, mesh: MixedOrderMesh) -> np.ndarray:
        """Independent node ids along an edge in canonical order, endpoints included."""
        vmin, vmax = mesh.edges[edge_id].verts
        o = self.edge_offsets[edge_id]
        cnt = self.edge_counts[edge_id]
        return np.array([vmin] + list(range(o, o + cnt)) + [vmax], dtype=int)

    def marked_node_ids(self, mesh: MixedOrderMesh) -> np.ndarray:
        """Sorted independent node ids lying on the marked face set."""
        ids: set[int] = set()
        for k in sorted(mesh.marked_faces):
            ids.update(self.edge_node_ids(k, mesh).tolist())
        return np.array(sorted(ids), dtype=int)


def edge_constraints(mesh: MixedOrderMesh) -> list[EdgeConstraint]:
    """The active trace-interpolation constraints of all mixed-order edges."""
    out = []
    for k, rec in enumerate(mesh.edges):
        if len(rec.sides) < 2:
            continue
        orders = sorted(mesh.elements[s.element].order for s in rec.sides)
        if orders[0] != orders[1]:
            out.append(EdgeConstraint(k, orders[0], orders[1],
                                      prolongation_matrix(orders[0], orders[1])))
    return out


def apply_edge_constraints(mesh: MixedOrderMesh) -> MixedOrderMesh:
    """Overwrite dependent edge nodes from the governing low-order traces.

    Idempotent; a conforming equal-order mesh with consistent shared values is
    returned unchanged.
    """
    dm = mesh.dof_map()
    dm.scatter(mesh, dm.extract(mesh))
    return mesh


def require_valid(mesh: MixedOrderMesh, context: str = "operation"):
    md = mesh.min_det()
    if md <= 0.0:
        raise MeshInvalidError(
            f"{context} requires a non-inverted mesh (min det = {md:.3e})")


def element_groups(mesh: MixedOrderMesh) -> dict[tuple[str, int], np.ndarray]:
    """Element ids grouped by (geometry, order), for batched evaluation."""
    groups: dict[tuple[str, int], list[int]] = {}
    for e, el in enumerate(mesh.elements):
        groups.setdefault((el.geometry, el.order), []).append(e)
    return {key: np.array(ids, dtype=int) for key, ids in sorted(groups.items())}

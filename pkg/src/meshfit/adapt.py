"""Order adaptation driven by integrated face fitting error.

The driver alternates three moves until the marked faces stop changing:
measure how far each marked face sits from the target isocontour (an
arc-length weighted integral of sigma^2), raise the order of elements next to
badly fitted faces, and re-run the node-movement solver.  Optionally, after
each solve, faces that can be represented at lower order without losing
geometry are projected down again.  The result is a mixed-order mesh whose
high-order elements cluster along the interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield, replace

import numpy as np

from .basis import _gauss_legendre_01, gauss_lobatto_nodes, lagrange_1d, \
    lagrange_1d_deriv, reference_element
from .mesh import MixedOrderMesh, apply_edge_constraints
from .tmop import FitConfig, mark_interface_faces, solve_r_adaptivity

REFINE_KINDS = ("absolute", "relative")
DEREF_KINDS = ("ref", "change", "size")


@dataclass
class AdaptivityPlan:
    """Knobs of the order-adaptation loop.

    ``refine_kind`` selects the marking rule: ``"absolute"`` marks faces with
    error above ``refine_threshold``; ``"relative"`` marks faces with error
    at least ``refine_threshold`` times the current worst face error.

    ``deref_kind`` (active only when ``refine_step > 1``) selects the test a
    lower-order candidate must pass: ``"ref"`` keeps the projected error
    under ``deref_threshold * refine_threshold``; ``"change"`` allows the
    error to grow by at most a factor ``1 + deref_threshold``; ``"size"``
    requires the projected face to keep at least ``1 - deref_threshold`` of
    its arc length.  ``None`` disables derefinement.
    """
    p_init: int = 1
    p_max: int = 3
    refine_step: int = 1
    max_neighbor_diff: int | None = None   # None: only bounded by p_max
    refine_kind: str = "absolute"
    refine_threshold: float = 0.0
    deref_kind: str | None = None
    deref_threshold: float = 0.0
    fit_tol: float = 1e-8
    edge_touch_elevate: bool = False

    def validate(self):
        if not 1 <= self.p_init <= self.p_max:
            raise ValueError(f"need 1 <= p_init <= p_max, got "
                             f"{self.p_init}..{self.p_max}")
        if self.refine_step < 1:
            raise ValueError("refine_step must be >= 1")
        if self.max_neighbor_diff is not None and self.max_neighbor_diff < 1:
            raise ValueError("max_neighbor_diff must be >= 1 or None")
        if self.refine_kind not in REFINE_KINDS:
            raise ValueError(f"unknown refine criterion {self.refine_kind!r}")
        if self.deref_kind is not None and self.deref_kind not in DEREF_KINDS:
            raise ValueError(f"unknown deref criterion {self.deref_kind!r}")
        if self.refine_threshold < 0 or self.deref_threshold < 0:
            raise ValueError("thresholds must be >= 0")
        if self.fit_tol <= 0:
            raise ValueError("fit_tol must be positive")

    @property
    def neighbor_limit(self) -> int:
        return self.p_max if self.max_neighbor_diff is None \
            else self.max_neighbor_diff

    @property
    def outer_cap(self) -> int:
        return math.ceil((self.p_max - self.p_init) / self.refine_step) + 1


# ---------------------------------------------------------------------------
# Face traces and errors

def _face_trace(mesh: MixedOrderMesh, face: int) -> np.ndarray:
    """Nodal coordinates of a face's curve in canonical direction, (p+1, 2).

    The trace is taken from the side whose element is at the face's governing
    order, so it is exactly the conforming geometry of the edge.
    """
    rec = mesh.edges[face]
    order = mesh.edge_order(face)
    side = min((s for s in rec.sides
                if mesh.elements[s.element].order == order),
               key=lambda s: s.element)
    el = mesh.elements[side.element]
    ref = reference_element(el.geometry, el.order)
    ids = ref.edge_nodes[side.local_edge]
    coords = el.coords[:, ids].T
    if not side.forward:
        coords = coords[::-1]
    return coords


def _trace_error_and_length(coords: np.ndarray, field, nq: int):
    """Arc-length weighted sigma^2 integral and length of one trace."""
    p = len(coords) - 1
    tq, wq = _gauss_legendre_01(nq)
    nodes = gauss_lobatto_nodes(p)
    x = lagrange_1d(nodes, tq) @ coords
    dx = lagrange_1d_deriv(nodes, tq) @ coords
    speed = np.hypot(dx[:, 0], dx[:, 1])
    sigma = field.values(x)
    err = float(np.sum(wq * sigma * sigma * speed))
    length = float(np.sum(wq * speed))
    return err, length


def face_error(mesh: MixedOrderMesh, field, face: int) -> float:
    """Integral of sigma^2 over the physical face curve."""
    coords = _face_trace(mesh, face)
    nq = 2 * (len(coords) - 1) + 3
    return _trace_error_and_length(coords, field, nq)[0]


def face_arc_length(mesh: MixedOrderMesh, field, face: int) -> float:
    coords = _face_trace(mesh, face)
    nq = 2 * (len(coords) - 1) + 3
    return _trace_error_and_length(coords, field, nq)[1]


@dataclass
class FaceErrorReport:
    faces: list[int]
    errors: np.ndarray
    lengths: np.ndarray
    total_error: float
    max_error: float
    node_sigma_max: float

    def error_of(self, face: int) -> float:
        return float(self.errors[self.faces.index(face)])


def compute_face_errors(mesh: MixedOrderMesh, field,
                        faces=None) -> FaceErrorReport:
    """Fresh per-face error integrals over the marked face set."""
    if faces is None:
        faces = sorted(mesh.marked_faces)
    else:
        faces = sorted(faces)
    errors = np.zeros(len(faces))
    lengths = np.zeros(len(faces))
    for i, k in enumerate(faces):
        coords = _face_trace(mesh, k)
        nq = 2 * (len(coords) - 1) + 3
        errors[i], lengths[i] = _trace_error_and_length(coords, field, nq)
    dm = mesh.dof_map()
    marked_nodes = dm.marked_node_ids(mesh)
    if marked_nodes.size:
        pts = dm.extract(mesh)[marked_nodes]
        node_sigma = float(np.abs(field.values(pts)).max())
    else:
        node_sigma = 0.0
    return FaceErrorReport(faces=faces, errors=errors, lengths=lengths,
                           total_error=float(errors.sum()),
                           max_error=float(errors.max()) if len(faces) else 0.0,
                           node_sigma_max=node_sigma)


# ---------------------------------------------------------------------------
# Marking, refinement, propagation

def mark_for_refinement(report: FaceErrorReport,
                        plan: AdaptivityPlan) -> list[int]:
    """Faces whose error violates the plan's refine criterion."""
    if plan.refine_kind == "absolute":
        keep = report.errors > plan.refine_threshold
    else:
        keep = report.errors >= plan.refine_threshold * report.max_error
    return [f for f, k in zip(report.faces, keep) if k]


def apply_refinement(mesh: MixedOrderMesh, faces, plan: AdaptivityPlan):
    """Raise both neighbors of each face by refine_step, capped at p_max.

    Returns the set of elements whose order changed.
    """
    changed = set()
    targets: dict[int, int] = {}
    for k in faces:
        for side in mesh.edges[k].sides:
            e = side.element
            p_new = min(plan.p_max,
                        mesh.elements[e].order + plan.refine_step)
            targets[e] = max(targets.get(e, 0), p_new)
    for e, p_new in sorted(targets.items()):
        if p_new > mesh.elements[e].order:
            mesh.set_order(e, p_new)
            changed.add(e)
    return changed


def edge_touching_elevation(mesh: MixedOrderMesh) -> set[int]:
    """Raise elements that meet the interface only at a vertex.

    An element touching two or more marked faces through a single shared
    vertex (none of its own edges marked) is raised to the highest order
    among the elements adjacent to those faces, so the locally curved
    geometry does not wrap around an unrefined corner.  Returns the set of
    elements raised.
    """
    marked = mesh.marked_faces
    if not marked:
        return set()
    face_verts = {k: mesh.edges[k].verts for k in marked}
    vertex_faces: dict[int, list[int]] = {}
    for k, (a, b) in face_verts.items():
        vertex_faces.setdefault(a, []).append(k)
        vertex_faces.setdefault(b, []).append(k)
    changed = set()
    for e, el in enumerate(mesh.elements):
        own_edges = {mesh.edge_id(v0, v1)
                     for v0, v1 in zip(el.verts, np.roll(el.verts, -1))}
        if own_edges & marked:
            continue
        for v in el.verts:
            incident = vertex_faces.get(int(v), [])
            if len(incident) < 2:
                continue
            q = max(mesh.elements[s.element].order
                    for k in incident for s in mesh.edges[k].sides)
            if q > el.order:
                mesh.set_order(e, q)
                changed.add(e)
            break
    return changed


def propagate_orders(mesh: MixedOrderMesh, max_diff: int) -> set[int]:
    """Raise elements until no edge-neighbor exceeds them by more than max_diff.

    Orders only increase; the fixpoint does not depend on sweep order because
    each pass applies the pointwise maximum of the current requirements.
    Returns the set of elements raised.
    """
    changed = set()
    while True:
        raised = False
        for rec in mesh.edges:
            if len(rec.sides) != 2:
                continue
            a, b = (s.element for s in rec.sides)
            pa, pb = mesh.elements[a].order, mesh.elements[b].order
            if pa - pb > max_diff:
                mesh.set_order(b, pa - max_diff)
                changed.add(b)
                raised = True
            elif pb - pa > max_diff:
                mesh.set_order(a, pb - max_diff)
                changed.add(a)
                raised = True
        if not raised:
            return changed


# ---------------------------------------------------------------------------
# Derefinement

def _projected_trace(coords: np.ndarray, p_low: int) -> np.ndarray:
    nodes = gauss_lobatto_nodes(len(coords) - 1)
    return lagrange_1d(nodes, gauss_lobatto_nodes(p_low)) @ coords


def _deref_criterion_ok(plan: AdaptivityPlan, field, coords, p_hat: int,
                        err_now: float, len_now: float, nq: int) -> bool:
    proj = _projected_trace(coords, p_hat)
    err_hat, len_hat = _trace_error_and_length(proj, field, nq)
    if plan.deref_kind == "ref":
        return err_hat < plan.deref_threshold * plan.refine_threshold
    if plan.deref_kind == "change":
        return err_hat < (1.0 + plan.deref_threshold) * err_now
    return len_hat > (1.0 - plan.deref_threshold) * len_now


def _neighbors_of(mesh: MixedOrderMesh, elems) -> set[int]:
    out = set(elems)
    for e in list(elems):
        el = mesh.elements[e]
        for v0, v1 in zip(el.verts, np.roll(el.verts, -1)):
            rec = mesh.edges[mesh.edge_id(int(v0), int(v1))]
            out.update(s.element for s in rec.sides)
    return out


def _orders_within(mesh: MixedOrderMesh, elems, max_diff: int) -> bool:
    for e in elems:
        el = mesh.elements[e]
        for v0, v1 in zip(el.verts, np.roll(el.verts, -1)):
            rec = mesh.edges[mesh.edge_id(int(v0), int(v1))]
            if len(rec.sides) != 2:
                continue
            pa, pb = (mesh.elements[s.element].order for s in rec.sides)
            if abs(pa - pb) > max_diff:
                return False
    return True


def try_derefine(mesh: MixedOrderMesh, field, plan: AdaptivityPlan,
                 face: int):
    """Lower the order of a face's neighbors if geometry survives it.

    Candidate orders run from p_init upward; the first one whose projected
    trace passes the plan's derefinement test, and whose application leaves
    every touched element and edge-neighbor with a positive Jacobian and all
    neighbor order differences within bounds, is applied.  Application
    prefers lowering both neighbors, falling back to one side at a time.
    Returns the accepted order, or None if the face keeps its order.
    """
    p_face = mesh.edge_order(face)
    if p_face <= plan.p_init:
        return None
    coords = _face_trace(mesh, face)
    nq = 2 * p_face + 3
    err_now, len_now = _trace_error_and_length(coords, field, nq)
    elems = [s.element for s in mesh.edges[face].sides]
    variants = [list(elems)]
    if len(elems) == 2:
        variants += [[elems[0]], [elems[1]]]
    for p_hat in range(plan.p_init, p_face):
        if not _deref_criterion_ok(plan, field, coords, p_hat,
                                   err_now, len_now, nq):
            continue
        for variant in variants:
            lowered = [e for e in variant
                       if mesh.elements[e].order > p_hat]
            if not lowered:
                continue
            # constraint re-application rewrites edge nodes of the whole
            # neighborhood, so the rollback snapshot must cover it too
            touched = sorted(_neighbors_of(mesh, lowered))
            snapshot = [(e, mesh.elements[e].order,
                         mesh.elements[e].coords.copy()) for e in touched]
            for e in lowered:
                mesh.set_order(e, p_hat)
            apply_edge_constraints(mesh)
            ok = _orders_within(mesh, lowered, plan.neighbor_limit) and \
                mesh.min_det(touched) > 0.0
            if ok:
                return p_hat
            for e, order, c in snapshot:
                mesh.elements[e].order = order
                mesh.elements[e].coords = c
            mesh.invalidate()
    return None


def derefinement_pass(mesh: MixedOrderMesh, field, plan: AdaptivityPlan):
    """Attempt derefinement on every marked face, ascending by face id.

    Returns {face: accepted_order} for the faces that changed.
    """
    accepted = {}
    for face in sorted(mesh.marked_faces):
        p_hat = try_derefine(mesh, field, plan, face)
        if p_hat is not None:
            accepted[face] = p_hat
    return accepted


# ---------------------------------------------------------------------------
# Driver

@dataclass
class AdaptRecord:
    outer: int
    phase: str                 # initial | fit | refine | derefine | final
    dofs: int
    total_error: float
    max_error: float
    node_sigma_max: float
    histogram: dict[int, int]
    solver_status: str | None = None
    solver_iterations: int | None = None


@dataclass
class AdaptResult:
    mesh: MixedOrderMesh
    records: list[AdaptRecord] = dfield(default_factory=list)
    outer_iterations: int = 0
    exit_reason: str = ""

    @property
    def final(self) -> AdaptRecord:
        return self.records[-1]


def run_rp_adaptivity(mesh: MixedOrderMesh, field, fit: FitConfig,
                      plan: AdaptivityPlan,
                      boundary_fit: bool = False) -> AdaptResult:
    """Fit the mesh to the field and adapt element orders along the interface.

    The mesh must be at uniform order ``plan.p_init``.  One initial node
    movement solve aligns the marked faces; then each outer iteration
    measures face errors, refines the neighbors of badly fitted faces,
    re-solves, and (when ``refine_step > 1`` and a derefinement criterion is
    set) projects over-resolved faces back down.  The loop exits when no
    face needs refinement or after ``plan.outer_cap`` iterations.
    """
    plan.validate()
    for e, el in enumerate(mesh.elements):
        if el.order != plan.p_init:
            raise ValueError(f"element {e} at order {el.order}, expected "
                             f"uniform p_init={plan.p_init}")
    controls = replace(fit.controls, fit_tol=plan.fit_tol)
    fit = replace(fit, controls=controls)
    mark_interface_faces(mesh, field, boundary_mode=boundary_fit)
    result = AdaptResult(mesh)

    def record(outer, phase, status=None, iters=None):
        report = compute_face_errors(mesh, field)
        result.records.append(AdaptRecord(
            outer=outer, phase=phase, dofs=mesh.num_position_dofs,
            total_error=report.total_error, max_error=report.max_error,
            node_sigma_max=report.node_sigma_max,
            histogram=mesh.order_histogram(),
            solver_status=status, solver_iterations=iters))
        return report

    record(0, "initial")
    _, solve_rep = solve_r_adaptivity(fit.problem(mesh, field))
    report = record(0, "fit", solve_rep.status, solve_rep.num_iterations)

    derefine = plan.refine_step > 1 and plan.deref_kind is not None
    for outer in range(1, plan.outer_cap + 1):
        result.outer_iterations = outer
        marked = mark_for_refinement(report, plan)
        changed = apply_refinement(mesh, marked, plan)
        if plan.edge_touch_elevate:
            changed |= edge_touching_elevation(mesh)
        if not changed:
            result.exit_reason = "no faces refined"
            break
        changed |= propagate_orders(mesh, plan.neighbor_limit)
        apply_edge_constraints(mesh)
        record(outer, "refine")
        _, solve_rep = solve_r_adaptivity(fit.problem(mesh, field))
        report = record(outer, "fit", solve_rep.status,
                        solve_rep.num_iterations)
        if derefine:
            accepted = derefinement_pass(mesh, field, plan)
            if accepted:
                propagate_orders(mesh, plan.neighbor_limit)
                apply_edge_constraints(mesh)
            report = record(outer, "derefine")
        if all(mesh.elements[s.element].order >= plan.p_max
               for k in mesh.marked_faces for s in mesh.edges[k].sides):
            result.exit_reason = "interface at p_max"
            break
    else:
        result.exit_reason = "outer iteration cap"
    record(result.outer_iterations, "final")
    return result

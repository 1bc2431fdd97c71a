"""Target-matrix mesh quality optimization with level-set surface fitting.

The objective combines an element quality term and a penalty pulling marked
nodes onto the zero isocontour of a scalar field:

    F(x) = sum_elements integral mu(T) over the target element
         + fit_weight * sum_{marked nodes s} sigma(x_s)^2

where T = A W^{-1} couples the map Jacobian A to a per-element target matrix
W.  Minimization moves only the independent position nodes; dependent
mixed-order edge nodes follow through the trace-interpolation constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .basis import QUAD, TRI, basis_tables, reference_element
from .errors import MeshInvalidError
from .mesh import (MixedOrderMesh, apply_edge_constraints, element_groups,
                   require_valid)

IDEAL_TRIANGLE_TARGET = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])
IDEAL_TRIANGLE_TARGET.flags.writeable = False

METRIC_IDS = ("mu2", "mu77", "mu80")


@dataclass(frozen=True)
class QualityMetric:
    """Pointwise mesh quality measure of the relative Jacobian T = A W^{-1}.

    - ``mu2``: shape metric |T|^2 / (2 det T) - 1, zero for any rotation and
      isotropic scaling of the target.
    - ``mu77``: size metric (det T - 1/det T)^2 / 2, zero at unit volume ratio.
    - ``mu80``: convex combination gamma * mu2 + (1 - gamma) * mu77.

    All three blow up to +inf as det T -> 0+ and are +inf for det T <= 0,
    which acts as the mesh-validity barrier during optimization.
    """
    metric_id: str
    gamma: float = 0.5

    def __post_init__(self):
        if self.metric_id not in METRIC_IDS:
            raise ValueError(f"unknown metric {self.metric_id!r}, "
                             f"expected one of {METRIC_IDS}")
        if self.metric_id == "mu80" and not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    def values(self, T: np.ndarray) -> np.ndarray:
        """Metric values for a (..., 2, 2) stack; +inf where det T <= 0."""
        T = np.asarray(T, dtype=float)
        tau = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
        good = tau > 0.0
        safe = np.where(good, tau, 1.0)
        out = np.empty(tau.shape)
        if self.metric_id in ("mu2", "mu80"):
            frob2 = np.sum(T * T, axis=(-2, -1))
            mu2 = frob2 / (2.0 * safe) - 1.0
        if self.metric_id in ("mu77", "mu80"):
            d = safe - 1.0 / safe
            mu77 = 0.5 * d * d
        if self.metric_id == "mu2":
            out = mu2
        elif self.metric_id == "mu77":
            out = mu77
        else:
            out = self.gamma * mu2 + (1.0 - self.gamma) * mu77
        return np.where(good, out, np.inf)

    def second_deriv_coeffs(self, tau: np.ndarray, frob2: np.ndarray):
        """Coefficients of the four structural terms of d2(mu)/dT2.

        In 2D the Hessian of each metric in T decomposes as

            c_id * (delta_ab delta_cd) + c_sym * sym(T (x) adj)
            + c_dd * (adj (x) adj) + c_eps * (eps_ab eps_cd)

        with adj = d(tau)/dT and eps the alternating symbol.  Only the scalar
        coefficients depend on the metric; callers assemble the terms.
        """
        tau = np.asarray(tau, dtype=float)
        safe = np.where(tau > 0.0, tau, 1.0)
        zeros = np.zeros_like(safe)
        if self.metric_id in ("mu2", "mu80"):
            c_id2 = 1.0 / safe
            c_sym2 = -1.0 / (safe * safe)
            c_dd2 = frob2 / safe ** 3
            c_eps2 = -frob2 / (2.0 * safe * safe)
        if self.metric_id in ("mu77", "mu80"):
            d = safe - 1.0 / safe
            fp = d * (1.0 + 1.0 / (safe * safe))
            fpp = (1.0 + 1.0 / (safe * safe)) ** 2 - 2.0 * d / safe ** 3
        if self.metric_id == "mu2":
            out = (c_id2, c_sym2, c_dd2, c_eps2)
        elif self.metric_id == "mu77":
            out = (zeros, zeros, fpp, fp)
        else:
            g1, g2 = self.gamma, 1.0 - self.gamma
            out = (g1 * c_id2, g1 * c_sym2,
                   g1 * c_dd2 + g2 * fpp, g1 * c_eps2 + g2 * fp)
        bad = tau <= 0.0
        return tuple(np.where(bad, 0.0, c) for c in out)

    def values_and_derivs(self, T: np.ndarray):
        """Metric values and d(mu)/dT for a (..., 2, 2) stack.

        Entries with det T <= 0 get value +inf and derivative 0; callers must
        treat the whole configuration as invalid.
        """
        T = np.asarray(T, dtype=float)
        tau = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
        good = tau > 0.0
        safe = np.where(good, tau, 1.0)
        dtau = np.empty_like(T)
        dtau[..., 0, 0] = T[..., 1, 1]
        dtau[..., 0, 1] = -T[..., 1, 0]
        dtau[..., 1, 0] = -T[..., 0, 1]
        dtau[..., 1, 1] = T[..., 0, 0]
        val = np.zeros(tau.shape)
        der = np.zeros_like(T)
        if self.metric_id in ("mu2", "mu80"):
            frob2 = np.sum(T * T, axis=(-2, -1))
            mu2 = frob2 / (2.0 * safe) - 1.0
            dmu2 = (T / safe[..., None, None]
                    - (frob2 / (2.0 * safe * safe))[..., None, None] * dtau)
        if self.metric_id in ("mu77", "mu80"):
            d = safe - 1.0 / safe
            mu77 = 0.5 * d * d
            dmu77 = (d * (1.0 + 1.0 / (safe * safe)))[..., None, None] * dtau
        if self.metric_id == "mu2":
            val, der = mu2, dmu2
        elif self.metric_id == "mu77":
            val, der = mu77, dmu77
        else:
            val = self.gamma * mu2 + (1.0 - self.gamma) * mu77
            der = self.gamma * dmu2 + (1.0 - self.gamma) * dmu77
        val = np.where(good, val, np.inf)
        der = np.where(good[..., None, None], der, 0.0)
        return val, der


def metric_value(metric: QualityMetric, T) -> float:
    """Metric value for a single 2x2 matrix."""
    return float(metric.values(np.asarray(T, dtype=float)))


def element_quality(mesh: "MixedOrderMesh", metric: QualityMetric,
                    target: "TargetSpec | None" = None,
                    reduce: str = "max") -> np.ndarray:
    """Per-element metric values sampled at the quality quadrature points.

    Returns an array over elements holding the max (default) or mean of the
    metric across each element's sample points; inverted samples give inf.
    """
    if reduce not in ("max", "mean"):
        raise ValueError(f"unknown reduction {reduce!r}")
    target = target or TargetSpec()
    out = np.empty(len(mesh.elements))
    for (geometry, order), ids in element_groups(mesh).items():
        tables = basis_tables(geometry, order, rule="lobatto")
        Winv = np.linalg.inv(target.for_geometry(geometry))
        K = np.einsum("qib,bc->qic", tables.grad_at_quad, Winv)
        X = np.stack([mesh.elements[e].coords.T for e in ids])
        mu = metric.values(_contract_jac(X, K))
        out[ids] = mu.max(axis=1) if reduce == "max" else mu.mean(axis=1)
    return out


@dataclass(frozen=True)
class TargetSpec:
    """Per-element target Jacobian.

    ``ideal`` targets the unit square for quads and the unit equilateral
    triangle for triangles; ``matrix`` uses a fixed user matrix with positive
    determinant.
    """
    kind: str = "ideal"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("ideal", "matrix"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "matrix":
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (2, 2):
                raise ValueError("target matrix must be 2x2")
            if np.linalg.det(m) <= 0.0:
                raise ValueError("target matrix must have positive determinant")
            object.__setattr__(self, "matrix", m)

    def for_geometry(self, geometry: str) -> np.ndarray:
        if self.kind == "matrix":
            return self.matrix
        return IDEAL_TRIANGLE_TARGET if geometry == TRI else np.eye(2)


@dataclass
class SolverControls:
    """Knobs of the fitting solver."""
    max_iterations: int = 200
    fit_tol: float = 1e-8
    grad_rtol: float = 1e-12
    grad_atol: float = 1e-13
    max_backtracks: int = 12
    weight_growth: float = 10.0
    weight_trigger: float = 1.1
    weight_cap: float = 1e10
    initial_damping: float = 1e-4


@dataclass
class FitConfig:
    """Mesh-independent part of a fitting problem, reusable across solves."""
    metric: QualityMetric = dfield(default_factory=lambda: QualityMetric("mu2"))
    target: TargetSpec = dfield(default_factory=TargetSpec)
    fit_weight: float = 1.0
    controls: SolverControls = dfield(default_factory=SolverControls)
    boundary: str = "slide"

    def problem(self, mesh: "MixedOrderMesh", field=None) -> "TmopProblem":
        return TmopProblem(mesh, self.metric, self.target, field,
                           self.fit_weight, self.controls, self.boundary)


@dataclass
class TmopProblem:
    """One r-adaptivity problem: mesh, metric, target, field, and penalty weight."""
    mesh: MixedOrderMesh
    metric: QualityMetric
    target: TargetSpec = dfield(default_factory=TargetSpec)
    field: object | None = None
    fit_weight: float = 1.0
    controls: SolverControls = dfield(default_factory=SolverControls)
    boundary: str = "slide"  # "slide" | "fixed" | "free"

    def marked_node_ids(self) -> np.ndarray:
        return self.mesh.dof_map().marked_node_ids(self.mesh)


# ---------------------------------------------------------------------------
# Material attributes and the marked face set

def assign_materials(mesh: MixedOrderMesh, field) -> None:
    """Set element attributes from the field sign at element centers (1 in, 2 out)."""
    for e, el in enumerate(mesh.elements):
        center = reference_element(el.geometry, el.order).center
        value = float(field.values(mesh.eval_map(e, center[None, :]))[0])
        el.attribute = 1 if value < 0.0 else 2


def mark_interface_faces(mesh: MixedOrderMesh, field=None,
                         boundary_mode: bool = False) -> set[int]:
    """Select the face set to fit and store it on the mesh.

    Interior mode marks edges whose two adjacent elements carry different
    material attributes.  Boundary mode marks domain-boundary edges of
    interior-material elements instead.  When ``field`` is given, material
    attributes are (re)assigned from it first.
    """
    if field is not None:
        assign_materials(mesh, field)
    marked: set[int] = set()
    for k, rec in enumerate(mesh.edges):
        if boundary_mode:
            if len(rec.sides) == 1 and \
                    mesh.elements[rec.sides[0].element].attribute == 1:
                marked.add(k)
        elif len(rec.sides) == 2:
            a, b = (mesh.elements[s.element].attribute for s in rec.sides)
            if a != b:
                marked.add(k)
    mesh.marked_faces = marked
    return marked


# ---------------------------------------------------------------------------
# Assembly

def _contract_jac(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """T[e, q, a, c] = sum_i X[e, i, a] G[q, i, c] as one batched product.

    X holds per-element node coordinates (E, n, 2) and G per-point basis
    gradients (Q, n, 2).  Routing the contraction through matmul keeps the
    inner loops in BLAS, which matters because this runs once per objective,
    gradient and Hessian evaluation.
    """
    n_el = X.shape[0]
    nq = G.shape[0]
    Gf = G.transpose(1, 0, 2).reshape(X.shape[1], 2 * nq)
    out = X.transpose(0, 2, 1) @ Gf
    return out.reshape(n_el, 2, nq, 2).transpose(0, 2, 1, 3)


def _contract_grad(D: np.ndarray, K: np.ndarray) -> np.ndarray:
    """out[e, i, a] = sum_{q,c} D[e, q, a, c] K[q, i, c], batched over e."""
    n_el, nq = D.shape[:2]
    nn = K.shape[1]
    Df = D.transpose(0, 2, 1, 3).reshape(n_el, 2, 2 * nq)
    Kf = K.transpose(0, 2, 1).reshape(2 * nq, nn)
    return (Df @ Kf).transpose(0, 2, 1)


class _Assembly:
    """Cached quantities for objective/gradient/Hessian evaluation."""

    def __init__(self, problem: TmopProblem):
        mesh = problem.mesh
        self.mesh = mesh
        self.dm = mesh.dof_map()
        self.expand = self.dm.expand
        self.marked = self.dm.marked_node_ids(mesh)
        self.groups = []
        for (geometry, order), ids in element_groups(mesh).items():
            # quality integration on a Lobatto rule: its boundary samples let
            # the metric barrier feel corner degeneration that interior Gauss
            # points cannot see
            tables = basis_tables(geometry, order, rule="lobatto")
            W = problem.target.for_geometry(geometry)
            Winv = np.linalg.inv(W)
            detW = float(np.linalg.det(W))
            starts = np.array([self.dm.element_slices[e].start for e in ids])
            nn = tables.ref.num_nodes
            gather = starts[:, None] + np.arange(nn)[None, :]
            # basis gradient contracted with the target inverse, and the
            # nodal+quadrature gradient stack used for validity sampling
            K = np.einsum("qib,bc->qic", tables.grad_at_quad, Winv)
            Gall = np.concatenate([tables.grad_at_quad, tables.grad_at_nodes])
            self.groups.append({
                "ids": ids, "tables": tables, "Winv": Winv, "detW": detW,
                "gather": gather, "K": K, "Gall": Gall,
            })
        self._E2 = None
        self._hpattern = None

    @property
    def E2(self):
        if self._E2 is None:
            self._E2 = sp.kron(self.expand, sp.eye(2), format="csr")
        return self._E2

    def x_all(self, t: np.ndarray) -> np.ndarray:
        return self.expand @ t

    def min_det(self, t: np.ndarray) -> float:
        """Minimum map determinant over quadrature and nodal samples."""
        x_all = self.x_all(t)
        worst = np.inf
        for g in self.groups:
            X = x_all[g["gather"]]
            A = _contract_jac(X, g["Gall"])
            det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
            worst = min(worst, float(det.min()))
        return worst


def _quality_terms(asm: _Assembly, metric: QualityMetric, t: np.ndarray,
                   want_grad: bool):
    """Quality objective and optionally its gradient on independent nodes."""
    x_all = asm.x_all(t)
    total = 0.0
    g_all = np.zeros((asm.dm.total_local, 2)) if want_grad else None
    for g in asm.groups:
        X = x_all[g["gather"]]
        tables = g["tables"]
        T = _contract_jac(X, g["K"])
        if want_grad:
            mu, dmu = metric.values_and_derivs(T)
        else:
            mu = metric.values(T)
        if np.isinf(mu).any():
            return np.inf, None
        wq = tables.quad_weights
        total += g["detW"] * float((mu @ wq).sum())
        if want_grad:
            contrib = g["detW"] * _contract_grad(
                wq[None, :, None, None] * dmu, g["K"])
            g_all[g["gather"]] = contrib
    return total, g_all


def _fit_terms(asm: _Assembly, problem: TmopProblem, t: np.ndarray,
               fit_weight: float, want_grad: bool):
    if problem.field is None or asm.marked.size == 0 or fit_weight == 0.0:
        return 0.0, None, 0.0
    pts = t[asm.marked]
    sigma = problem.field.values(pts)
    value = fit_weight * float(sigma @ sigma)
    sigma_max = float(np.abs(sigma).max())
    grad = None
    if want_grad:
        grads = problem.field.gradients(pts)
        grad = 2.0 * fit_weight * sigma[:, None] * grads
    return value, grad, sigma_max


def objective(problem: TmopProblem, coords: np.ndarray | None = None) -> float:
    """Total objective at the mesh's (or the given) independent node positions."""
    asm = _Assembly(problem)
    t = asm.dm.extract(problem.mesh) if coords is None else coords
    fq, _ = _quality_terms(asm, problem.metric, t, want_grad=False)
    if np.isinf(fq):
        return np.inf
    fs, _, _ = _fit_terms(asm, problem, t, problem.fit_weight, want_grad=False)
    return fq + fs


def gradient(problem: TmopProblem, coords: np.ndarray | None = None,
             project_boundary: bool = False) -> np.ndarray:
    """Analytic gradient dF/dx on independent nodes, shape (num_nodes, 2).

    Dependent mixed-order edge nodes contribute through the transpose of
    their trace interpolation.  ``project_boundary`` applies the boundary
    movement policy (slide along boundary lines, corners fixed).
    """
    asm = _Assembly(problem)
    t = asm.dm.extract(problem.mesh) if coords is None else coords
    fq, g_all = _quality_terms(asm, problem.metric, t, want_grad=True)
    if np.isinf(fq):
        raise MeshInvalidError("gradient requested on an inverted configuration")
    g = asm.expand.T @ g_all
    _, g_fit, _ = _fit_terms(asm, problem, t, problem.fit_weight, want_grad=True)
    if g_fit is not None:
        g[asm.marked] += g_fit
    if project_boundary:
        kinds, tangents = boundary_freedom(problem.mesh, problem.boundary)
        g = project_motion(g, kinds, tangents)
    return g


# ---------------------------------------------------------------------------
# Boundary movement policy

def boundary_freedom(mesh: MixedOrderMesh, mode: str = "slide"):
    """Per-node movement freedom: 0 free, 1 along a line, 2 fixed.

    Boundary nodes slide along their boundary edge's line; vertices where two
    boundary lines meet at an angle are fixed.  Returns (kinds, tangents).
    """
    if mode not in ("slide", "fixed", "free"):
        raise ValueError(f"unknown boundary mode {mode!r}")
    dm = mesh.dof_map()
    kinds = np.zeros(dm.num_nodes, dtype=int)
    tangents = np.zeros((dm.num_nodes, 2))
    if mode == "free":
        return kinds, tangents
    for k in mesh.boundary_edges():
        vmin, vmax = mesh.edges[k].verts
        tangent = mesh.vertices[vmax] - mesh.vertices[vmin]
        norm = float(np.hypot(*tangent))
        if norm == 0.0:
            continue
        tangent = tangent / norm
        ids = dm.edge_node_ids(k, mesh)
        for node in ids:
            if mode == "fixed":
                kinds[node] = 2
            elif kinds[node] == 0:
                kinds[node] = 1
                tangents[node] = tangent
            elif kinds[node] == 1:
                cross = abs(tangents[node, 0] * tangent[1]
                            - tangents[node, 1] * tangent[0])
                if cross > 1e-12:
                    kinds[node] = 2  # corner: two distinct boundary lines
    return kinds, tangents


def project_motion(vec: np.ndarray, kinds: np.ndarray,
                   tangents: np.ndarray) -> np.ndarray:
    """Project per-node motions onto the allowed movement subspaces."""
    out = vec.copy()
    line = kinds == 1
    dots = np.sum(out[line] * tangents[line], axis=1)
    out[line] = dots[:, None] * tangents[line]
    out[kinds == 2] = 0.0
    return out


def _projector_matrices(kinds: np.ndarray, tangents: np.ndarray):
    """Sparse projector P and complement (I - P) on interleaved coordinates."""
    n = len(kinds)
    rows, cols, vals = [], [], []
    crows, ccols, cvals = [], [], []
    for i in range(n):
        if kinds[i] == 0:
            for a in range(2):
                rows.append(2 * i + a)
                cols.append(2 * i + a)
                vals.append(1.0)
        elif kinds[i] == 1:
            tt = np.outer(tangents[i], tangents[i])
            comp = np.eye(2) - tt
            for a in range(2):
                for b in range(2):
                    rows.append(2 * i + a)
                    cols.append(2 * i + b)
                    vals.append(tt[a, b])
                    crows.append(2 * i + a)
                    ccols.append(2 * i + b)
                    cvals.append(comp[a, b])
        else:
            for a in range(2):
                crows.append(2 * i + a)
                ccols.append(2 * i + a)
                cvals.append(1.0)
    shape = (2 * n, 2 * n)
    P = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    C = sp.csr_matrix((cvals, (crows, ccols)), shape=shape)
    return P, C


# ---------------------------------------------------------------------------
# Gauss-Newton model Hessian

def _hessian(asm: _Assembly, problem: TmopProblem, t: np.ndarray,
             fit_weight: float) -> sp.csr_matrix:
    """Model of d2F/dx2 on interleaved independent coordinates.

    The quality term is differentiated exactly (closed-form metric Hessian in
    2D); the fitting term uses the Gauss-Newton block 2 w (grad sigma)(grad
    sigma)^T per marked node, exact for affine fields.  Indefiniteness of the
    quality part is handled by the solver's damping, not here.
    """
    x_all = asm.x_all(t)
    blocks_rows, blocks_cols, blocks_vals = [], [], []
    for g in asm.groups:
        X = x_all[g["gather"]]
        tables = g["tables"]
        K = g["K"]
        nn = tables.ref.num_nodes
        nq = K.shape[0]
        T = _contract_jac(X, K)
        tau = T[..., 0, 0] * T[..., 1, 1] - T[..., 0, 1] * T[..., 1, 0]
        frob2 = np.sum(T * T, axis=(-2, -1))
        adj = np.empty_like(T)
        adj[..., 0, 0] = T[..., 1, 1]
        adj[..., 0, 1] = -T[..., 1, 0]
        adj[..., 1, 0] = -T[..., 0, 1]
        adj[..., 1, 1] = T[..., 0, 0]
        c_id, c_sym, c_dd, c_eps = \
            problem.metric.second_deriv_coeffs(tau, frob2)
        base_w = g["detW"] * tables.quad_weights[None, :]
        # per-point products of T (and its adjugate) with the basis gradient,
        # flattened to the interleaved block index 2 * node + component
        tK = np.matmul(K[None], T.transpose(0, 1, 3, 2)).reshape(-1, nq, 2 * nn)
        dK = np.matmul(K[None], adj.transpose(0, 1, 3, 2)).reshape(-1, nq, 2 * nn)
        if "KKf" not in g:
            g["KKf"] = np.einsum("qic,qjc->qij", K, K).reshape(nq, nn * nn)
            g["Wepsf"] = (K[:, :, None, 0] * K[:, None, :, 1]
                          - K[:, :, None, 1] * K[:, None, :, 0]) \
                .reshape(nq, nn * nn)
            base = 2 * g["gather"][:, 0]  # first interleaved row of each block
            offs = base[:, None] + np.arange(2 * nn)[None, :]
            g["hrows"] = np.repeat(offs[:, :, None], 2 * nn, axis=2).ravel()
            g["hcols"] = np.repeat(offs[:, None, :], 2 * nn, axis=1).ravel()
        Hid = ((base_w * c_id) @ g["KKf"]).reshape(-1, nn, nn)
        Heps = ((base_w * c_eps) @ g["Wepsf"]).reshape(-1, nn, nn)
        He = np.matmul(np.swapaxes(tK * (base_w * c_sym)[:, :, None], 1, 2), dK)
        He = He + np.swapaxes(He, 1, 2)
        He += np.matmul(np.swapaxes(dK * (base_w * c_dd)[:, :, None], 1, 2), dK)
        He5 = He.reshape(-1, nn, 2, nn, 2)
        He5[:, :, 0, :, 0] += Hid
        He5[:, :, 1, :, 1] += Hid
        He5[:, :, 0, :, 1] += Heps
        He5[:, :, 1, :, 0] -= Heps
        blocks_rows.append(g["hrows"])
        blocks_cols.append(g["hcols"])
        blocks_vals.append(He.ravel())
    size = 2 * asm.dm.total_local
    B = sp.csr_matrix((np.concatenate(blocks_vals),
                       (np.concatenate(blocks_rows), np.concatenate(blocks_cols))),
                      shape=(size, size))
    E2 = asm.E2
    H = (E2.T @ B @ E2).tocsr()
    if problem.field is not None and asm.marked.size and fit_weight > 0.0:
        grads = problem.field.gradients(t[asm.marked])
        rows, cols, vals = [], [], []
        for s, gr in zip(asm.marked, grads):
            block = 2.0 * fit_weight * np.outer(gr, gr)
            for a in range(2):
                for b in range(2):
                    rows.append(2 * s + a)
                    cols.append(2 * s + b)
                    vals.append(block[a, b])
        H = H + sp.csr_matrix((vals, (rows, cols)), shape=H.shape)
    return H


# ---------------------------------------------------------------------------
# Solver

@dataclass
class IterationRecord:
    index: int
    objective_before: float
    objective_after: float
    fit_weight: float
    sigma_max: float | None
    step_size: float
    grad_norm: float
    min_det: float
    backtracks: int
    direction: str


@dataclass
class SolveReport:
    status: str = "converged"            # converged | stalled | max_iterations
    reason: str = ""
    iterations: list[IterationRecord] = dfield(default_factory=list)
    initial_objective: float = np.nan
    final_objective: float = np.nan
    initial_sigma_max: float | None = None
    final_sigma_max: float | None = None
    final_fit_weight: float = np.nan
    final_min_det: float = np.nan

    @property
    def num_iterations(self) -> int:
        return len(self.iterations)


def solve_r_adaptivity(problem: TmopProblem):
    """Minimize the combined quality + fitting objective by node movement.

    Runs a damped Gauss-Newton descent with a halving line search.  Steps are
    accepted only when they decrease the objective and keep every element's
    Jacobian determinant positive on the sample set.  When the worst marked
    node residual stalls (decrease factor below ``weight_trigger``), the
    fitting weight is multiplied by ``weight_growth`` up to ``weight_cap``.

    Returns
    -------
    (mesh, report)
        The mesh is updated in place.  ``report.status`` is ``converged``
        (fit tolerance or gradient tolerance reached), ``stalled`` (no
        decreasing valid step found), or ``max_iterations``.
    """
    mesh = problem.mesh
    controls = problem.controls
    apply_edge_constraints(mesh)
    require_valid(mesh, "solve_r_adaptivity")
    asm = _Assembly(problem)
    kinds, tangents = boundary_freedom(mesh, problem.boundary)
    P, C = _projector_matrices(kinds, tangents)
    t = asm.dm.extract(mesh)
    w = float(problem.fit_weight)
    report = SolveReport()

    def fit_state(tv):
        return _fit_terms(asm, problem, tv, w, want_grad=False)[2] \
            if (problem.field is not None and asm.marked.size) else None

    def obj(tv):
        fq, _ = _quality_terms(asm, problem.metric, tv, want_grad=False)
        if np.isinf(fq):
            return np.inf
        fs, _, _ = _fit_terms(asm, problem, tv, w, want_grad=False)
        return fq + fs

    def grad_projected(tv):
        fq, g_all = _quality_terms(asm, problem.metric, tv, want_grad=True)
        g = asm.expand.T @ g_all
        _, g_fit, _ = _fit_terms(asm, problem, tv, w, want_grad=True)
        if g_fit is not None:
            g[asm.marked] += g_fit
        return project_motion(g, kinds, tangents)

    F = obj(t)
    sigma = fit_state(t)
    report.initial_objective = F
    report.initial_sigma_max = sigma
    fitting = sigma is not None

    def finish(status, reason):
        report.status = status
        report.reason = reason
        report.final_objective = F
        report.final_sigma_max = fit_state(t)
        report.final_fit_weight = w
        report.final_min_det = asm.min_det(t)
        asm.dm.scatter(mesh, t)
        return mesh, report

    if fitting and sigma <= controls.fit_tol:
        return finish("converged", "marked nodes already on the isocontour")
    gp = grad_projected(t)
    gnorm0 = float(np.linalg.norm(gp))
    if gnorm0 <= controls.grad_atol:
        return finish("converged", "gradient already negligible")

    lam = controls.initial_damping
    sigma_prev = sigma
    # cap the initial trial displacement at a fraction of the smallest
    # element diameter so a stiff penalty cannot tangle the mesh in one jump
    h_min = min(mesh.element_diameter(e) for e in range(len(mesh.elements)))
    step_cap = 0.5 * h_min
    for it in range(1, controls.max_iterations + 1):
        H = _hessian(asm, problem, t, w)
        Hp = (P @ H @ P + C).tocsc()
        diag = Hp.diagonal()
        dfloor = np.maximum(diag, 1e-12 * diag.max() + 1e-300)
        gflat = gp.ravel()

        direction = "newton"
        d = None
        lam_try = lam
        for _ in range(8):
            M = Hp + sp.diags(lam_try * dfloor)
            try:
                cand = spla.spsolve(M, -gflat)
            except RuntimeError:
                lam_try *= 16.0
                continue
            if not np.all(np.isfinite(cand)):
                lam_try *= 16.0
                continue
            if cand @ gflat < 0.0:
                d = project_motion(cand.reshape(-1, 2), kinds, tangents)
                break
            lam_try *= 16.0
        if d is None:
            direction = "steepest"
            d = -gp
        lam = lam_try

        def line_search(dvec, start_step):
            alpha = start_step
            for bt in range(controls.max_backtracks + 1):
                t_new = t + alpha * dvec
                F_new = obj(t_new)
                if F_new < F and asm.min_det(t_new) > 0.0:
                    return t_new, F_new, alpha, bt
                alpha *= 0.5
            return None, None, None, None

        dmax = float(np.abs(d).max())
        start = min(1.0, step_cap / dmax) if dmax > 0.0 else 1.0
        t_new, F_new, alpha, bt = line_search(d, start)
        if t_new is None and direction == "newton":
            direction = "steepest"
            d = -gp
            Hg = (Hp @ d.ravel()) @ d.ravel()
            dmax = max(float(np.abs(d).max()), 1e-300)
            scale = (d.ravel() @ d.ravel()) / Hg if Hg > 0.0 else \
                0.1 * mesh.diameter() / dmax
            t_new, F_new, alpha, bt = line_search(d, min(scale, step_cap / dmax))
            lam *= 16.0
        if t_new is None:
            return finish("stalled", "no valid decreasing step found")

        t, F_before, F = t_new, F, F_new
        lam = max(lam * 0.25, 1e-10)
        sigma = fit_state(t)
        gp = grad_projected(t)
        gnorm = float(np.linalg.norm(gp))
        report.iterations.append(IterationRecord(
            index=it, objective_before=F_before, objective_after=F,
            fit_weight=w, sigma_max=sigma, step_size=alpha, grad_norm=gnorm,
            min_det=asm.min_det(t), backtracks=bt, direction=direction))

        if fitting and sigma <= controls.fit_tol:
            return finish("converged", "fit tolerance reached")
        if gnorm <= max(controls.grad_rtol * gnorm0, controls.grad_atol):
            return finish("converged", "gradient tolerance reached")
        if fitting and w < controls.weight_cap and \
                sigma_prev / max(sigma, 1e-300) < controls.weight_trigger:
            w = min(w * controls.weight_growth, controls.weight_cap)
            F = obj(t)
            gp = grad_projected(t)
        sigma_prev = sigma

    return finish("max_iterations",
                  f"no convergence in {controls.max_iterations} iterations")

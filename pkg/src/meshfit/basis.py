"""Nodal reference elements, Gauss-Lobatto nodes, and quadrature on [0,1]-based domains.

The reference quadrilateral is the unit square [0,1]^2 and the reference
triangle is the unit triangle {x >= 0, y >= 0, x + y <= 1}.  Nodal sets use
Gauss-Lobatto points along edges (tensor products for quads, warp-and-blend
interior placement for triangles), so edge traces of two elements that share
an edge are interpolants on the same 1D point set.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import eval_jacobi, gammaln

QUAD = "quad"
TRI = "tri"
EDGE = "edge"

GEOMETRIES = (QUAD, TRI)

#: Blend exponents for the triangular warp-and-blend nodal sets, indexed by order.
_WARP_ALPHA = (0.0, 0.0, 1.4152, 0.1001, 0.2751, 0.9800, 1.0999, 1.2832,
               1.3648, 1.4773, 1.4959, 1.5743, 1.5770, 1.6223, 1.6258)


@lru_cache(maxsize=None)
def _gauss_lobatto_cached(p: int) -> np.ndarray:
    n = p + 1
    if p == 1:
        x = np.array([-1.0, 1.0])
    else:
        # Newton iteration on the Gauss-Lobatto conditions, seeded with
        # Chebyshev-Lobatto points; the update uses the Legendre recurrence.
        x = -np.cos(np.pi * np.arange(n) / p)
        legendre = np.zeros((n, n))
        for _ in range(100):
            legendre[:, 0] = 1.0
            legendre[:, 1] = x
            for k in range(2, n):
                legendre[:, k] = ((2 * k - 1) * x * legendre[:, k - 1]
                                  - (k - 1) * legendre[:, k - 2]) / k
            dx = (x * legendre[:, p] - legendre[:, p - 1]) / (n * legendre[:, p])
            x -= dx
            if np.max(np.abs(dx)) < 1e-15:
                break
        x[0], x[-1] = -1.0, 1.0
        x = 0.5 * (x - x[::-1])  # enforce symmetry about the midpoint
    out = 0.5 * (x + 1.0)
    out.flags.writeable = False
    return out


def gauss_lobatto_nodes(p: int) -> np.ndarray:
    """Gauss-Lobatto nodes of order ``p`` on [0, 1].

    Returns the ``p + 1`` sorted nodes, always including both endpoints,
    symmetric about 0.5.

    Parameters
    ----------
    p : int
        Polynomial order, at least 1.
    """
    if p < 1:
        raise ValueError(f"polynomial order must be >= 1, got {p}")
    return _gauss_lobatto_cached(p).copy()


def lagrange_1d(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of the 1D Lagrange basis on ``nodes`` at points ``x``.

    Shape (len(x), len(nodes)).  Evaluation at a node reproduces the
    Kronecker delta exactly.
    """
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = nodes.size
    diff = x[:, None] - nodes[None, :]
    out = np.empty((x.size, n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        num = np.prod(diff[:, others], axis=1) if others else np.ones(x.size)
        den = np.prod(nodes[i] - nodes[others]) if others else 1.0
        out[:, i] = num / den
    return out


def lagrange_1d_deriv(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """First derivatives of the 1D Lagrange basis, shape (len(x), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = nodes.size
    diff = x[:, None] - nodes[None, :]
    out = np.zeros((x.size, n))
    for i in range(n):
        others = [j for j in range(n) if j != i]
        den = np.prod(nodes[i] - nodes[others]) if others else 1.0
        acc = np.zeros(x.size)
        for k in others:
            rest = [j for j in others if j != k]
            acc += np.prod(diff[:, rest], axis=1) if rest else 1.0
        out[:, i] = acc / den
    return out


@lru_cache(maxsize=None)
def _gauss_legendre_01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=None)
def _gauss_lobatto_01(n: int):
    """Gauss-Lobatto points and weights on [0, 1]; endpoints included."""
    if n < 2:
        raise ValueError(f"Lobatto rule needs >= 2 points, got {n}")
    x01 = _gauss_lobatto_cached(n - 1)
    xs = 2.0 * x01 - 1.0
    # weights 2 / (n (n-1) P_{n-1}(x)^2), halved for the unit interval
    pk = np.polynomial.legendre.Legendre.basis(n - 1)(xs)
    w = 1.0 / (n * (n - 1) * pk * pk)
    x = x01.copy()
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


def quadrature_rule(geometry: str, npoints: int):
    """Quadrature points and weights on a reference edge, quad, or triangle.

    Parameters
    ----------
    geometry : str
        One of ``"edge"``, ``"quad"``, ``"tri"``.
    npoints : int
        Number of Gauss-Legendre points per direction (>= 1).

    Returns
    -------
    points, weights
        ``points`` has shape (n,) for edges and (n, 2) otherwise; weights sum
        to the reference measure (1 for edge and quad, 1/2 for the triangle).
        The triangle rule is a collapsed tensor product.
    """
    if npoints < 1:
        raise ValueError(f"npoints must be >= 1, got {npoints}")
    x, w = _gauss_legendre_01(npoints)
    if geometry == EDGE:
        return x.copy(), w.copy()
    if geometry == QUAD:
        X, Y = np.meshgrid(x, x, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        wts = np.outer(w, w).ravel()
        return pts, wts
    if geometry == TRI:
        A, B = np.meshgrid(x, x, indexing="ij")
        pts = np.column_stack([(A * (1.0 - B)).ravel(), B.ravel()])
        wts = (np.outer(w, w) * (1.0 - B)).ravel()
        return pts, wts
    raise ValueError(f"unsupported geometry {geometry!r}")


# ---------------------------------------------------------------------------
# Triangle nodal sets (warp and blend) and the orthogonal Dubiner basis.

def _warp_factor(p: int, r: np.ndarray) -> np.ndarray:
    """1D warp moving equidistant points toward Gauss-Lobatto, sampled at r in [-1,1]."""
    gl = 2.0 * _gauss_lobatto_cached(p) - 1.0
    req = np.linspace(-1.0, 1.0, p + 1)
    warp = lagrange_1d(req, r) @ (gl - req)
    interior = np.abs(r) < 1.0 - 1e-10
    scale = 1.0 - (interior * r) ** 2
    return warp / scale + warp * (interior - 1.0)


def _tri_lattice(p: int) -> np.ndarray:
    """Integer lattice (i, j) with i + j <= p, j varying slowest."""
    out = [(i, j) for j in range(p + 1) for i in range(p + 1 - j)]
    return np.array(out, dtype=int)


def _tri_nodes(p: int) -> np.ndarray:
    """Warp-and-blend nodes on the unit triangle, ordered like ``_tri_lattice``."""
    lattice = _tri_lattice(p)
    if p == 1:
        nodes = lattice.astype(float)
    else:
        alpha = _WARP_ALPHA[p] if p < len(_WARP_ALPHA) else 5.0 / 3.0
        l3 = lattice[:, 0] / p
        l1 = lattice[:, 1] / p
        l2 = 1.0 - l1 - l3
        x = l3 - l2
        y = (2.0 * l1 - l2 - l3) / np.sqrt(3.0)
        blend1 = 4.0 * l2 * l3
        blend2 = 4.0 * l1 * l3
        blend3 = 4.0 * l1 * l2
        w1 = blend1 * _warp_factor(p, l3 - l2) * (1.0 + (alpha * l1) ** 2)
        w2 = blend2 * _warp_factor(p, l1 - l3) * (1.0 + (alpha * l2) ** 2)
        w3 = blend3 * _warp_factor(p, l2 - l1) * (1.0 + (alpha * l3) ** 2)
        x = x + w1 + np.cos(2.0 * np.pi / 3.0) * (w2 + w3)
        y = y + np.sin(2.0 * np.pi / 3.0) * (w2 - w3)
        # equilateral coordinates back to unit-triangle barycentrics
        m1 = (np.sqrt(3.0) * y + 1.0) / 3.0             # weight of vertex (0, 1)
        m3 = (3.0 * x - np.sqrt(3.0) * y + 2.0) / 6.0   # weight of vertex (1, 0)
        nodes = np.column_stack([m3, m1])
    # Snap edge nodes to their exact Gauss-Lobatto positions so that edge
    # traces of neighboring elements interpolate on identical point sets.
    gl = _gauss_lobatto_cached(p)
    i, j = lattice[:, 0], lattice[:, 1]
    bottom = j == 0
    nodes[bottom, 0] = gl[i[bottom]]
    nodes[bottom, 1] = 0.0
    left = i == 0
    nodes[left, 0] = 0.0
    nodes[left, 1] = gl[j[left]]
    hypo = i + j == p
    nodes[hypo, 0] = gl[p - j[hypo]]
    nodes[hypo, 1] = 1.0 - gl[p - j[hypo]]
    nodes[0] = (0.0, 0.0)
    nodes[p] = (1.0, 0.0)
    nodes[-1] = (0.0, 1.0)
    return nodes


def _jacobi_norm(n: int, a: float, b: float) -> float:
    """L2 norm of the Jacobi polynomial P_n^{a,b} under its weight on [-1,1]."""
    ln = ((a + b + 1.0) * np.log(2.0) - np.log(2.0 * n + a + b + 1.0)
          + gammaln(n + a + 1.0) + gammaln(n + b + 1.0)
          - gammaln(n + 1.0) - gammaln(n + a + b + 1.0))
    return np.exp(0.5 * ln)


def _jacobi(n: int, a: float, b: float, x: np.ndarray) -> np.ndarray:
    return eval_jacobi(n, a, b, x) / _jacobi_norm(n, a, b)


def _jacobi_deriv(n: int, a: float, b: float, x: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.zeros_like(x)
    d = 0.5 * (n + a + b + 1.0) * eval_jacobi(n - 1, a + 1.0, b + 1.0, x)
    return d / _jacobi_norm(n, a, b)


def _dubiner(points: np.ndarray, p: int, with_grad: bool):
    """Orthogonal modal basis on the unit triangle via collapsed coordinates.

    Returns values of shape (npts, nmodes) and, when requested, gradients with
    respect to the unit-triangle coordinates of shape (npts, nmodes, 2).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r = 2.0 * pts[:, 0] - 1.0
    s = 2.0 * pts[:, 1] - 1.0
    near_top = np.abs(1.0 - s) < 1e-14
    denom = np.where(near_top, 1.0, 1.0 - s)
    a = np.where(near_top, -1.0, 2.0 * (1.0 + r) / denom - 1.0)
    b = s
    half1mb = 0.5 * (1.0 - b)
    nmodes = (p + 1) * (p + 2) // 2
    vals = np.empty((pts.shape[0], nmodes))
    grads = np.empty((pts.shape[0], nmodes, 2)) if with_grad else None
    m = 0
    for i in range(p + 1):
        fa = _jacobi(i, 0.0, 0.0, a)
        dfa = _jacobi_deriv(i, 0.0, 0.0, a)
        poweri = half1mb ** i
        powerim1 = half1mb ** (i - 1) if i > 0 else None
        for j in range(p + 1 - i):
            gb = _jacobi(j, 2.0 * i + 1.0, 0.0, b)
            vals[:, m] = np.sqrt(2.0) * fa * gb * poweri
            if with_grad:
                dgb = _jacobi_deriv(j, 2.0 * i + 1.0, 0.0, b)
                if i > 0:
                    dr = dfa * gb * powerim1
                    ds = dfa * gb * (0.5 * (1.0 + a)) * powerim1
                    ds = ds + fa * (dgb * poweri - 0.5 * i * gb * powerim1)
                else:
                    dr = dfa * gb
                    ds = fa * dgb
                # unit-triangle coordinates scale (r,s) by a factor of 2
                grads[:, m, 0] = 2.0 * np.sqrt(2.0) * dr
                grads[:, m, 1] = 2.0 * np.sqrt(2.0) * ds
            m += 1
    return vals, grads


class ReferenceElement:
    """Nodal reference element of a fixed geometry and polynomial order.

    Attributes
    ----------
    geometry : "quad" or "tri"
    order : polynomial order p
    nodes : (num_nodes, 2) reference coordinates of the nodal points
    corners : node indices of the element vertices, counterclockwise
    edge_nodes : per local edge, node indices from edge start to edge end
    interior : node indices not lying on any edge
    """

    def __init__(self, geometry: str, order: int):
        if geometry not in GEOMETRIES:
            raise ValueError(f"unsupported geometry {geometry!r}")
        if order < 1:
            raise ValueError(f"polynomial order must be >= 1, got {order}")
        self.geometry = geometry
        self.order = order
        p = order
        gl = _gauss_lobatto_cached(p)
        if geometry == QUAD:
            X, Y = np.meshgrid(gl, gl, indexing="xy")
            self.nodes = np.column_stack([X.ravel(), Y.ravel()])

            def nid(i, j):
                return j * (p + 1) + i

            self.corners = np.array([nid(0, 0), nid(p, 0), nid(p, p), nid(0, p)])
            self.edge_nodes = (
                np.array([nid(i, 0) for i in range(p + 1)]),
                np.array([nid(p, j) for j in range(p + 1)]),
                np.array([nid(i, p) for i in range(p, -1, -1)]),
                np.array([nid(0, j) for j in range(p, -1, -1)]),
            )
            self.interior = np.array(
                [nid(i, j) for j in range(1, p) for i in range(1, p)], dtype=int)
            self.center = np.array([0.5, 0.5])
            self._vinv = None
        else:
            self.nodes = _tri_nodes(p)
            lattice = _tri_lattice(p)
            index = {(int(i), int(j)): k for k, (i, j) in enumerate(lattice)}
            self.corners = np.array([index[0, 0], index[p, 0], index[0, p]])
            self.edge_nodes = (
                np.array([index[i, 0] for i in range(p + 1)]),
                np.array([index[p - j, j] for j in range(p + 1)]),
                np.array([index[0, p - j] for j in range(p + 1)]),
            )
            self.interior = np.array(
                [index[i, j] for i, j in map(tuple, lattice)
                 if i > 0 and j > 0 and i + j < p], dtype=int)
            self.center = np.array([1.0, 1.0]) / 3.0
            vand, _ = _dubiner(self.nodes, p, with_grad=False)
            self._vinv = np.linalg.inv(vand)
        self.num_nodes = len(self.nodes)
        self.nodes.flags.writeable = False

    def eval_basis(self, points: np.ndarray) -> np.ndarray:
        """Nodal basis values at reference points, shape (npts, num_nodes)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.geometry == QUAD:
            gl = _gauss_lobatto_cached(self.order)
            lx = lagrange_1d(gl, pts[:, 0])
            ly = lagrange_1d(gl, pts[:, 1])
            return np.einsum("mi,mj->mji", lx, ly).reshape(pts.shape[0], -1)
        vals, _ = _dubiner(pts, self.order, with_grad=False)
        return vals @ self._vinv

    def eval_basis_grad(self, points: np.ndarray) -> np.ndarray:
        """Nodal basis gradients at reference points, shape (npts, num_nodes, 2)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.geometry == QUAD:
            gl = _gauss_lobatto_cached(self.order)
            lx = lagrange_1d(gl, pts[:, 0])
            ly = lagrange_1d(gl, pts[:, 1])
            dlx = lagrange_1d_deriv(gl, pts[:, 0])
            dly = lagrange_1d_deriv(gl, pts[:, 1])
            n = pts.shape[0]
            gx = np.einsum("mi,mj->mji", dlx, ly).reshape(n, -1)
            gy = np.einsum("mi,mj->mji", lx, dly).reshape(n, -1)
            return np.stack([gx, gy], axis=-1)
        vals, grads = _dubiner(pts, self.order, with_grad=True)
        return np.einsum("mkd,kn->mnd", grads, self._vinv)

    def contains(self, point: np.ndarray, tol: float = 1e-10) -> bool:
        x, y = point
        if self.geometry == QUAD:
            return (-tol <= x <= 1.0 + tol) and (-tol <= y <= 1.0 + tol)
        return x >= -tol and y >= -tol and x + y <= 1.0 + tol

    def boundary_distance(self, point: np.ndarray) -> float:
        """Signed distance-like margin to the reference boundary (positive inside)."""
        x, y = point
        if self.geometry == QUAD:
            return min(x, y, 1.0 - x, 1.0 - y)
        return min(x, y, 1.0 - x - y)

    def clamp(self, point: np.ndarray) -> np.ndarray:
        """Closest-point style projection of a reference point into the domain."""
        x, y = float(point[0]), float(point[1])
        if self.geometry == QUAD:
            return np.array([min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)])
        x, y = max(x, 0.0), max(y, 0.0)
        if x + y > 1.0:
            shift = 0.5 * (x + y - 1.0)
            x, y = x - shift, y - shift
            x, y = max(x, 0.0), max(y, 0.0)
            if x > 1.0:
                x = 1.0
            if y > 1.0:
                y = 1.0
        return np.array([x, y])

    def edge_point(self, local_edge: int, t) -> np.ndarray:
        """Reference coordinates of parameter(s) t in [0,1] along a local edge."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        zero = np.zeros_like(t)
        one = np.ones_like(t)
        if self.geometry == QUAD:
            segs = ((t, zero), (one, t), (1.0 - t, one), (zero, 1.0 - t))
        else:
            segs = ((t, zero), (1.0 - t, t), (zero, 1.0 - t))
        x, y = segs[local_edge]
        return np.column_stack([x, y])

    def __repr__(self):
        return f"ReferenceElement({self.geometry!r}, p={self.order})"


@lru_cache(maxsize=None)
def reference_element(geometry: str, order: int) -> ReferenceElement:
    """Shared, cached reference element instances."""
    return ReferenceElement(geometry, order)


class BasisTables:
    """Precomputed quadrature and basis evaluations for one (geometry, order).

    ``rule`` selects the integration points: ``"legendre"`` (interior Gauss
    points) or, for quads, ``"lobatto"`` (tensor Gauss-Lobatto, which places
    samples on element corners and edges).  The Lobatto variant matters for
    barrier-type integrands that must detect degeneration at the element
    boundary, where Gauss points never look.
    """

    def __init__(self, geometry: str, order: int, rule: str = "legendre"):
        ref = reference_element(geometry, order)
        n = 2 * order + 3
        if rule == "legendre" or geometry != QUAD:
            pts, wts = quadrature_rule(geometry, n)
        elif rule == "lobatto":
            x, w = _gauss_lobatto_01(n)
            X, Y = np.meshgrid(x, x, indexing="ij")
            pts = np.column_stack([X.ravel(), Y.ravel()])
            wts = np.outer(w, w).ravel()
        else:
            raise ValueError(f"unknown quadrature rule {rule!r}")
        self.ref = ref
        self.quad_points = pts
        self.quad_weights = wts
        self.basis_at_quad = ref.eval_basis(pts)
        self.grad_at_quad = ref.eval_basis_grad(pts)
        self.grad_at_nodes = ref.eval_basis_grad(ref.nodes)
        for arr in (self.quad_points, self.quad_weights, self.basis_at_quad,
                    self.grad_at_quad, self.grad_at_nodes):
            arr.flags.writeable = False


@lru_cache(maxsize=None)
def basis_tables(geometry: str, order: int,
                 rule: str = "legendre") -> BasisTables:
    return BasisTables(geometry, order, rule)

"""Element-level kernels shared by the space and form modules.

Reference triangle is {(xi, eta): xi, eta >= 0, xi + eta <= 1} with
barycentric coordinates (1 - xi - eta, xi, eta).  Quadratic (P2) scalar
elements carry six local nodes: vertices 0,1,2 followed by the midpoints
of edges (0,1), (1,2), (2,0).  Linear (P1) elements carry the vertices.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .mesh import Mesh, QuadratureRule, triangle_quadrature

P2_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


def p2_node_table(mesh: Mesh):
    """Global P2 node numbering: mesh vertices first, then one node per
    unique element edge (the midpoint).

    Returns (coords, elem_dofs, edge_to_node) where coords is
    (n_p2_nodes, 2), elem_dofs is (n_elements, 6) and edge_to_node maps a
    sorted vertex pair to its midpoint node id.
    """
    nv = mesh.n_nodes
    edge_to_node = {}
    mid_coords = []
    elem_dofs = np.empty((mesh.n_elements, 6), dtype=np.int64)
    for e, tri in enumerate(mesh.elements):
        elem_dofs[e, :3] = tri
        for k, (a, b) in enumerate(P2_LOCAL_EDGES):
            key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            node = edge_to_node.get(key)
            if node is None:
                node = nv + len(mid_coords)
                edge_to_node[key] = node
                mid_coords.append(0.5 * (mesh.nodes[key[0]] + mesh.nodes[key[1]]))
            elem_dofs[e, 3 + k] = node
    coords = np.vstack([mesh.nodes, np.asarray(mid_coords)]) if mid_coords else mesh.nodes.copy()
    return coords, elem_dofs, edge_to_node


def tabulate_p2(points: np.ndarray):
    """P2 shape functions and reference gradients at barycentric points.

    Returns (vals, grads) with shapes (6, nq) and (6, nq, 2).
    """
    lam0, lam1, lam2 = points[:, 0], points[:, 1], points[:, 2]
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    lam = [lam0, lam1, lam2]
    nq = points.shape[0]
    vals = np.empty((6, nq))
    grads = np.empty((6, nq, 2))
    for i in range(3):
        vals[i] = lam[i] * (2.0 * lam[i] - 1.0)
        grads[i] = np.outer(4.0 * lam[i] - 1.0, dl[i])
    for k, (i, j) in enumerate(P2_LOCAL_EDGES):
        vals[3 + k] = 4.0 * lam[i] * lam[j]
        grads[3 + k] = 4.0 * (np.outer(lam[i], dl[j]) + np.outer(lam[j], dl[i]))
    return vals, grads


def tabulate_p1(points: np.ndarray):
    lam0, lam1, lam2 = points[:, 0], points[:, 1], points[:, 2]
    vals = np.stack([lam0, lam1, lam2])
    grads = np.broadcast_to(
        np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])[:, None, :],
        (3, points.shape[0], 2),
    ).copy()
    return vals, grads


class ElementGeometry:
    """Affine map data per element: Jacobians, determinants, inverses."""

    def __init__(self, mesh: Mesh):
        p = mesh.nodes[mesh.elements]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0.0):
            raise ValueError("element with non-positive Jacobian determinant")
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1] / det
        inv[:, 0, 1] = -jac[:, 0, 1] / det
        inv[:, 1, 0] = -jac[:, 1, 0] / det
        inv[:, 1, 1] = jac[:, 0, 0] / det
        self.origin = p[:, 0]
        self.jac = jac
        self.det = det
        self.inv_t = np.ascontiguousarray(inv.transpose(0, 2, 1))

    def physical_points(self, mesh: Mesh, bary: np.ndarray) -> np.ndarray:
        """Quadrature points in physical coordinates, shape (ne, nq, 2)."""
        verts = mesh.nodes[mesh.elements]
        return np.einsum("qk,ekd->eqd", bary, verts)


class ElementBasis:
    """Tabulated basis values and physical gradients for one quadrature rule.

    ``grads`` has shape (n_elements, n_local, nq, 2) and already includes
    the inverse-Jacobian transform.
    """

    def __init__(self, geo: ElementGeometry, rule: QuadratureRule, order: int):
        if order == 2:
            vals, ref_grads = tabulate_p2(rule.points)
        elif order == 1:
            vals, ref_grads = tabulate_p1(rule.points)
        else:
            raise ValueError(f"unsupported element order {order}")
        self.vals = vals
        self.grads = np.einsum("edk,lqk->elqd", geo.inv_t, ref_grads)
        self.rule = rule
        self.order = order


class CsrPattern:
    """Precomputed CSR sparsity for repeated scatter of (ne, nl, nl) element
    blocks onto one fixed DOF map; assembly reduces to one bincount."""

    def __init__(self, dofs: np.ndarray, n: int):
        nl = dofs.shape[1]
        rows = np.repeat(dofs, nl, axis=1).ravel()
        cols = np.tile(dofs, (1, nl)).ravel()
        key = rows.astype(np.int64) * n + cols
        unique_key = np.unique(key)
        self.pos = np.searchsorted(unique_key, key)
        self.nnz = unique_key.size
        r_u = (unique_key // n).astype(np.int32)
        self.indices = (unique_key % n).astype(np.int32)
        self.indptr = np.zeros(n + 1, dtype=np.int32)
        np.cumsum(np.bincount(r_u, minlength=n), out=self.indptr[1:])
        self.shape = (n, n)

    def build(self, values: np.ndarray):
        data = np.bincount(self.pos, weights=values.ravel(), minlength=self.nnz)
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


class FemContext:
    """Per-(mesh, quadrature degree) cache of geometry and tabulated bases."""

    def __init__(self, mesh: Mesh, degree: int = 6):
        self.mesh = mesh
        self.rule = triangle_quadrature(degree)
        self.geo = ElementGeometry(mesh)
        self.p2_coords, self.elem_p2, self.edge_to_node = p2_node_table(mesh)
        self.n_p2 = self.p2_coords.shape[0]
        self.n_p1 = mesh.n_nodes
        self.elem_p1 = mesh.elements
        self.p2 = ElementBasis(self.geo, self.rule, 2)
        self.p1 = ElementBasis(self.geo, self.rule, 1)
        self.points_xy = self.geo.physical_points(mesh, self.rule.points)
        # quadrature weight times |det J| per (element, point)
        self.wdet = self.rule.weights[None, :] * self.geo.det[:, None]
        self._p2_pattern = None

    @property
    def p2_pattern(self) -> CsrPattern:
        if self._p2_pattern is None:
            self._p2_pattern = CsrPattern(self.elem_p2, self.n_p2)
        return self._p2_pattern

    def basis(self, order: int) -> ElementBasis:
        return self.p2 if order == 2 else self.p1

    def dofs(self, order: int) -> np.ndarray:
        return self.elem_p2 if order == 2 else self.elem_p1

    def n_dofs(self, order: int) -> int:
        return self.n_p2 if order == 2 else self.n_p1


def scatter_matrix(values, rows_dofs, cols_dofs, shape):
    """Accumulate per-element dense blocks (ne, nr, nc) into a CSR matrix."""
    ne, nr, nc = values.shape
    rows = np.repeat(rows_dofs, nc, axis=1).ravel()
    cols = np.tile(cols_dofs, (1, nr)).ravel()
    return sparse.coo_matrix((values.ravel(), (rows, cols)), shape=shape).tocsr()


def assemble_bilinear(ctx: FemContext, kernel, row_order: int, col_order: int):
    """Assemble ``sum_q w_q |J| kernel(q)`` with kernel returning per-point
    (ne, nr, nc) contributions built from the tabulated bases."""
    rb, cb = ctx.basis(row_order), ctx.basis(col_order)
    nr, nc = rb.vals.shape[0], cb.vals.shape[0]
    ne = ctx.mesh.n_elements
    acc = np.zeros((ne, nr, nc))
    for q in range(ctx.rule.n_points):
        acc += ctx.wdet[:, q, None, None] * kernel(q, rb, cb)
    return scatter_matrix(
        acc,
        ctx.dofs(row_order),
        ctx.dofs(col_order),
        (ctx.n_dofs(row_order), ctx.n_dofs(col_order)),
    )


def scalar_mass(ctx: FemContext, order: int = 2):
    def kernel(q, rb, cb):
        return rb.vals[None, :, q, None] * cb.vals[None, None, :, q]

    return assemble_bilinear(ctx, kernel, order, order)


def scalar_stiffness(ctx: FemContext, order: int = 2):
    def kernel(q, rb, cb):
        return np.einsum("eid,ejd->eij", rb.grads[:, :, q, :], cb.grads[:, :, q, :])

    return assemble_bilinear(ctx, kernel, order, order)


def partial_stiffness(ctx: FemContext, da: int, db: int, order: int = 2):
    """Matrix of integrals (d phi_i / d x_da)(d phi_j / d x_db)."""

    def kernel(q, rb, cb):
        return rb.grads[:, :, q, da][:, :, None] * cb.grads[:, :, q, db][:, None, :]

    return assemble_bilinear(ctx, kernel, order, order)


def weighted_scalar_mass(ctx: FemContext, weight_eq: np.ndarray, order: int = 2):
    """Mass matrix weighted by a per-(element, point) field."""
    b = ctx.basis(order)
    acc = np.einsum("eq,lq,mq->elm", ctx.wdet * weight_eq, b.vals, b.vals, optimize=True)
    if order == 2:
        return ctx.p2_pattern.build(acc)
    n = ctx.n_dofs(order)
    return scatter_matrix(acc, ctx.dofs(order), ctx.dofs(order), (n, n))


# ---------------------------------------------------------------------------
# boundary-edge machinery

EDGE_TRACE_NODES = 3  # two endpoints plus midpoint


class BoundaryEdgeData:
    """Geometry and P2 trace data for the boundary edges of one tag.

    For an edge (n0, n1) oriented counter-clockwise around the domain the
    outward normal is (t_y, -t_x).  Trace basis functions are the quadratic
    Lagrange functions at parameters 0, 1, 1/2 mapping to the local order
    (endpoint0, endpoint1, midpoint).
    """

    def __init__(self, ctx: FemContext, tag: str, rule: QuadratureRule):
        mesh = ctx.mesh
        edges = [(a, b) for (a, b, t) in mesh.boundary_edges if t == tag]
        self.tag = tag
        self.rule = rule
        ne = len(edges)
        self.n_edges = ne
        self.nodes = np.empty((ne, EDGE_TRACE_NODES), dtype=np.int64)
        self.normals = np.empty((ne, 2))
        self.lengths = np.empty(ne)
        self.points_xy = np.empty((ne, rule.n_points, 2))
        for k, (a, b) in enumerate(edges):
            mid = ctx.edge_to_node[(min(a, b), max(a, b))]
            self.nodes[k] = (a, b, mid)
            pa, pb = mesh.nodes[a], mesh.nodes[b]
            t = pb - pa
            length = float(np.hypot(t[0], t[1]))
            self.lengths[k] = length
            self.normals[k] = (t[1] / length, -t[0] / length)
            self.points_xy[k] = pa[None, :] + rule.points[:, None] * t[None, :]
        s = rule.points
        self.trace = np.stack(
            [2.0 * (s - 0.5) * (s - 1.0), 2.0 * s * (s - 0.5), 4.0 * s * (1.0 - s)]
        )
        # weight * edge length per (edge, point)
        self.wlen = rule.weights[None, :] * self.lengths[:, None]

    def all_nodes(self) -> np.ndarray:
        """Sorted unique P2 node ids touching this boundary part."""
        return np.unique(self.nodes.ravel())

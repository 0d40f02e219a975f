"""Variational forms of the coupled flow/heat system.

Volume forms: the curl-curl viscous form ``int rot(u) rot(psi)``, the
gradient diffusion form ``int grad(w).grad(phi)``, the rotational-form
convection integral ``int (rot u x v) . w`` (which vanishes pointwise when
the last two slots coincide), the scalar advection integral
``int (z . grad w) phi``, the weak divergence coupling and the buoyancy
coupling.  Boundary forms: the normal-pressure load on Gamma1 and the heat
flux load on Gamma2.

Assembled matrices act on full coefficient vectors (constrained entries are
expected to be zero); restriction to unconstrained DOFs happens in the
eigenvalue and solver routines.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import _fem
from .mesh import GAMMA1, GAMMA2, MAX_TRI_DEGREE, Mesh, edge_quadrature
from .spaces import (
    HEAD,
    TEMPERATURE,
    VELOCITY,
    DiscreteField,
    FunctionSpace,
    PolynomialField,
    boundary_nodes,
    vector_rot_matrix,
)

DEFAULT_EDGE_DEGREE = 6

_ctx_cache: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()
_edge_cache: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()


def fem_context(mesh: Mesh, degree: int) -> _fem.FemContext:
    per_mesh = _ctx_cache.setdefault(mesh, {})
    ctx = per_mesh.get(degree)
    if ctx is None:
        ctx = _fem.FemContext(mesh, degree=degree)
        per_mesh[degree] = ctx
    return ctx


def boundary_data(mesh: Mesh, tag: str, degree: int = DEFAULT_EDGE_DEGREE) -> _fem.BoundaryEdgeData:
    per_mesh = _edge_cache.setdefault(mesh, {})
    key = (tag, degree)
    data = per_mesh.get(key)
    if data is None:
        data = _fem.BoundaryEdgeData(fem_context(mesh, 6), tag, edge_quadrature(degree))
        per_mesh[key] = data
    return data


@dataclass(eq=False)
class AssembledOperator:
    """Sparse matrix realization of one form, tagged by kind.  ``frozen_field``
    records the advecting field a convection/advection matrix was linearized
    at."""

    kind: str
    matrix: sparse.csr_matrix
    frozen_field: object = None

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


# ---------------------------------------------------------------------------
# field evaluation at quadrature points


def _field_degree(f) -> int:
    if isinstance(f, DiscreteField):
        return 2
    return int(f.poly_degree)


def _velocity_values(f, ctx: _fem.FemContext) -> np.ndarray:
    """Values of a velocity-valued field per (element, point), shape (ne, nq, 2)."""
    if isinstance(f, DiscreteField):
        cx, cy = f.components()
        loc_x = cx[ctx.elem_p2]
        loc_y = cy[ctx.elem_p2]
        ux = np.einsum("el,lq->eq", loc_x, ctx.p2.vals)
        uy = np.einsum("el,lq->eq", loc_y, ctx.p2.vals)
        return np.stack([ux, uy], axis=-1)
    return f.velocity(ctx.points_xy[..., 0], ctx.points_xy[..., 1])


def _velocity_rot(f, ctx: _fem.FemContext) -> np.ndarray:
    """Scalar curl d(u_y)/dx - d(u_x)/dy per (element, point)."""
    if isinstance(f, DiscreteField):
        cx, cy = f.components()
        gx = ctx.p2.grads[..., 0]
        gy = ctx.p2.grads[..., 1]
        return np.einsum("el,elq->eq", cy[ctx.elem_p2], gx) - np.einsum(
            "el,elq->eq", cx[ctx.elem_p2], gy
        )
    return f.rot(ctx.points_xy[..., 0], ctx.points_xy[..., 1])


def _scalar_values(f: DiscreteField, ctx: _fem.FemContext) -> np.ndarray:
    return np.einsum("el,lq->eq", f.coeffs[ctx.elem_p2], ctx.p2.vals)


def _scalar_grads(f: DiscreteField, ctx: _fem.FemContext) -> np.ndarray:
    return np.einsum("el,elqd->eqd", f.coeffs[ctx.elem_p2], ctx.p2.grads)


def _pick_mesh(*fields) -> Mesh:
    meshes = [f.space.mesh for f in fields if isinstance(f, DiscreteField)]
    if not meshes:
        raise ValueError("at least one discrete field is required to infer the mesh")
    for m in meshes[1:]:
        if m is not meshes[0]:
            raise ValueError("fields live on different meshes")
    return meshes[0]


def eval_b(u, v, w, degree: int | None = None) -> float:
    """Rotational-form convection integral ``int (rot u x v) . w``.

    Arguments may be velocity DiscreteFields or analytic polynomial fields.
    The quadrature degree defaults to the exact total degree of the
    integrand, so polynomial identities hold to rounding error.
    """
    if degree is None:
        degree = min(_field_degree(u) + _field_degree(v) + _field_degree(w), MAX_TRI_DEGREE)
    ctx = fem_context(_pick_mesh(u, v, w), degree)
    om = _velocity_rot(u, ctx)
    vv = _velocity_values(v, ctx)
    wv = _velocity_values(w, ctx)
    cross = vv[..., 0] * wv[..., 1] - vv[..., 1] * wv[..., 0]
    return float(np.sum(ctx.wdet * om * cross))


def eval_c(z, w: DiscreteField, phi: DiscreteField, degree: int | None = None) -> float:
    """Scalar advection integral ``int (z . grad w) phi``."""
    if w.space.kind != TEMPERATURE or phi.space.kind != TEMPERATURE:
        raise ValueError("second and third arguments must be temperature fields")
    if degree is None:
        degree = min(_field_degree(z) + _field_degree(w) + _field_degree(phi), MAX_TRI_DEGREE)
    ctx = fem_context(_pick_mesh(z, w, phi), degree)
    zv = _velocity_values(z, ctx)
    gw = _scalar_grads(w, ctx)
    pv = _scalar_values(phi, ctx)
    return float(np.sum(ctx.wdet * (zv[..., 0] * gw[..., 0] + zv[..., 1] * gw[..., 1]) * pv))


# ---------------------------------------------------------------------------
# volume operators


def assemble_mass(space: FunctionSpace) -> AssembledOperator:
    kind = "mass_z" if space.kind == VELOCITY else "mass_w" if space.kind == TEMPERATURE else "mass_head"
    return AssembledOperator(kind, space.mass)


def assemble_rot_stiffness(space: FunctionSpace, grad_div: bool = True) -> AssembledOperator:
    """Viscous matrix over stacked velocity DOFs.

    With ``grad_div=True`` (default) the matrix is curl-curl plus grad-div,
    ``int rot(u) rot(psi) + int div(u) div(psi)``.  The two terms coincide
    with the pure curl-curl form on divergence-free fields (where the
    viscous form is defined), and the grad-div part restores coercivity
    over the discrete space: the quadratic Lagrange space contains exactly
    curl-free, weakly divergence-free spline modes on which the pure
    curl-curl form vanishes.  ``grad_div=False`` returns the raw curl-curl
    matrix for diagnostics.
    """
    mat = vector_rot_matrix(space)
    if grad_div:
        from .spaces import vector_grad_div_matrix

        mat = (mat + vector_grad_div_matrix(space)).tocsr()
    return AssembledOperator("rot_stiffness", mat)


def assemble_grad_stiffness(space: FunctionSpace) -> AssembledOperator:
    """Diffusion matrix ``int grad(w).grad(phi)`` over temperature DOFs."""
    if space.kind != TEMPERATURE:
        raise ValueError("grad stiffness requires a temperature space")
    return AssembledOperator("grad_stiffness", space.stiffness)


def assemble_divergence(v_space: FunctionSpace, q_space: FunctionSpace) -> AssembledOperator:
    """Weak divergence matrix D with (D z)_q = int q div(z)."""
    if v_space.kind != VELOCITY or q_space.kind != HEAD:
        raise ValueError("divergence couples a velocity space with a head space")
    ctx = v_space.ctx
    ne = ctx.mesh.n_elements
    dx = np.zeros((ne, 3, 6))
    dy = np.zeros((ne, 3, 6))
    for q in range(ctx.rule.n_points):
        w = ctx.wdet[:, q]
        p1v = ctx.p1.vals[:, q]
        dx += w[:, None, None] * (p1v[None, :, None] * ctx.p2.grads[:, :, q, 0][:, None, :])
        dy += w[:, None, None] * (p1v[None, :, None] * ctx.p2.grads[:, :, q, 1][:, None, :])
    shape = (ctx.n_p1, ctx.n_p2)
    mdx = _fem.scatter_matrix(dx, ctx.elem_p1, ctx.elem_p2, shape)
    mdy = _fem.scatter_matrix(dy, ctx.elem_p1, ctx.elem_p2, shape)
    return AssembledOperator("divergence", sparse.hstack([mdx, mdy], format="csr"))


def assemble_buoyancy(v_space: FunctionSpace, w_space: FunctionSpace, g, beta: float) -> AssembledOperator:
    """Coupling matrix G with psi^T G w = beta * int w (g . psi)."""
    g = np.asarray(g, dtype=float)
    ms = _fem.scalar_mass(v_space.ctx, order=2)
    mat = sparse.vstack([beta * g[0] * ms, beta * g[1] * ms], format="csr")
    return AssembledOperator("buoyancy", mat)


def assemble_convection_rot(space: FunctionSpace, z) -> AssembledOperator:
    """Convection matrix linearized at advecting field ``z``: its action on
    trial v tested with w reproduces ``eval_b(z, v, w)``.

    The block structure [[0, -W], [W, 0]] with symmetric W makes the matrix
    exactly skew-symmetric, so kinetic energy cannot be produced by
    convection at the discrete level.
    """
    ctx = space.ctx
    om = _velocity_rot(z, ctx)
    wmat = _fem.weighted_scalar_mass(ctx, om, order=2)
    n = ctx.n_p2
    zero = sparse.csr_matrix((n, n))
    mat = sparse.bmat([[zero, -wmat], [wmat, zero]], format="csr")
    return AssembledOperator("convection_rot", mat, frozen_field=z)


def assemble_advection(space: FunctionSpace, z) -> AssembledOperator:
    """Advection matrix linearized at ``z``: action on w tested with phi
    reproduces ``eval_c(z, w, phi)``."""
    if space.kind != TEMPERATURE:
        raise ValueError("advection matrix lives on the temperature space")
    ctx = space.ctx
    zv = _velocity_values(z, ctx)
    conv = (
        zv[:, None, :, 0] * ctx.p2.grads[..., 0] + zv[:, None, :, 1] * ctx.p2.grads[..., 1]
    )  # (ne, nl, nq): z . grad(phi_m) at each point
    acc = np.einsum("eq,lq,emq->elm", ctx.wdet, ctx.p2.vals, conv, optimize=True)
    return AssembledOperator("advection", ctx.p2_pattern.build(acc), frozen_field=z)


def _grad_weighted(ctx: _fem.FemContext, weight_eq: np.ndarray, axis: int) -> sparse.csr_matrix:
    """Matrix of integrals weight * phi_i * d(phi_j)/d x_axis."""
    acc = np.einsum(
        "eq,lq,emq->elm", ctx.wdet * weight_eq, ctx.p2.vals, ctx.p2.grads[..., axis],
        optimize=True,
    )
    return ctx.p2_pattern.build(acc)


def assemble_convection_rot_wrt_advector(space: FunctionSpace, z) -> AssembledOperator:
    """Derivative of ``assemble_convection_rot(.) @ z`` with respect to the
    advecting slot: maps a velocity perturbation d to the load of
    ``eval_b(d, z, .)``.  Needed by the discrete adjoint."""
    ctx = space.ctx
    zv = _velocity_values(z, ctx)
    z1, z2 = zv[..., 0], zv[..., 1]
    ny_z2 = _grad_weighted(ctx, z2, 1)
    nx_z2 = _grad_weighted(ctx, z2, 0)
    ny_z1 = _grad_weighted(ctx, z1, 1)
    nx_z1 = _grad_weighted(ctx, z1, 0)
    mat = sparse.bmat([[ny_z2, -nx_z2], [-ny_z1, nx_z1]], format="csr")
    return AssembledOperator("convection_rot_wrt_advector", mat, frozen_field=z)


def assemble_advection_wrt_advector(space: FunctionSpace, w) -> AssembledOperator:
    """Derivative of the skew-symmetrized advection term with respect to the
    advecting velocity: maps a velocity perturbation d to
    0.5 * [eval_c(d, w, .) - eval_c(d, ., w)] over temperature tests."""
    if space.kind != TEMPERATURE:
        raise ValueError("advection derivative lives on the temperature space")
    ctx = space.ctx
    gw = _scalar_grads(w, ctx)
    wv = _scalar_values(w, ctx)
    blocks = []
    for axis in range(2):
        p = _fem.weighted_scalar_mass(ctx, gw[..., axis], order=2)
        qm = _grad_weighted(ctx, wv, axis)
        blocks.append(0.5 * (p - qm.T))
    mat = sparse.hstack(blocks, format="csr")
    return AssembledOperator("advection_wrt_advector", mat, frozen_field=w)


# ---------------------------------------------------------------------------
# boundary loads and control couplings


def assemble_pressure_load(space: FunctionSpace, fn, degree: int = DEFAULT_EDGE_DEGREE) -> np.ndarray:
    """Load with entries ``int_Gamma1 (v1 . n)(psi . n) ds`` for vector data
    ``fn(x, y) -> (2,)``; only normal velocity components receive load."""
    if space.kind != VELOCITY:
        raise ValueError("pressure load acts on a velocity space")
    bd = boundary_data(space.mesh, GAMMA1, degree)
    n = space.n_scalar_nodes
    out = np.zeros(2 * n)
    for e in range(bd.n_edges):
        xs, ys = bd.points_xy[e, :, 0], bd.points_xy[e, :, 1]
        vals = np.array([np.asarray(fn(x, y), dtype=float) for x, y in zip(xs, ys)])
        vn = vals @ bd.normals[e]
        contrib = bd.trace @ (bd.wlen[e] * vn)  # per local trace node
        for l, node in enumerate(bd.nodes[e]):
            out[node] += contrib[l] * bd.normals[e, 0]
            out[n + node] += contrib[l] * bd.normals[e, 1]
    return out


def assemble_flux_load(space: FunctionSpace, fn, degree: int = DEFAULT_EDGE_DEGREE) -> np.ndarray:
    """Load with entries ``int_Gamma2 v2 phi ds`` for scalar data ``fn``."""
    if space.kind != TEMPERATURE:
        raise ValueError("flux load acts on a temperature space")
    bd = boundary_data(space.mesh, GAMMA2, degree)
    out = np.zeros(space.n_total)
    for e in range(bd.n_edges):
        xs, ys = bd.points_xy[e, :, 0], bd.points_xy[e, :, 1]
        vals = np.array([float(fn(x, y)) for x, y in zip(xs, ys)])
        contrib = bd.trace @ (bd.wlen[e] * vals)
        for l, node in enumerate(bd.nodes[e]):
            out[node] += contrib[l]
    return out


def control_coupling_v1(space: FunctionSpace, degree: int = DEFAULT_EDGE_DEGREE):
    """Sparse map R1 from nodal Gamma1 control values to the velocity load.

    Control values are stored per Gamma1 node with both components, flat
    index 2*j + comp.  Returns (R1, gamma1_nodes).
    """
    if space.kind != VELOCITY:
        raise ValueError("v1 coupling acts on a velocity space")
    g1 = boundary_nodes(space, GAMMA1)
    pos = {int(node): j for j, node in enumerate(g1)}
    bd = boundary_data(space.mesh, GAMMA1, degree)
    n = space.n_scalar_nodes
    rows, cols, vals = [], [], []
    for e in range(bd.n_edges):
        nrm = bd.normals[e]
        block = bd.trace @ (bd.wlen[e, :, None] * bd.trace.T)  # int chi_li chi_lj
        for li, ni in enumerate(bd.nodes[e]):
            for lj, nj in enumerate(bd.nodes[e]):
                jc = pos[int(nj)]
                for ci in range(2):
                    for cj in range(2):
                        rows.append(ci * n + ni)
                        cols.append(2 * jc + cj)
                        vals.append(block[li, lj] * nrm[ci] * nrm[cj])
    r1 = sparse.coo_matrix((vals, (rows, cols)), shape=(2 * n, 2 * len(g1))).tocsr()
    return r1, g1


def control_coupling_v2(space: FunctionSpace, degree: int = DEFAULT_EDGE_DEGREE):
    """Sparse map R2 from nodal Gamma2 control values to the temperature
    load.  Returns (R2, gamma2_nodes)."""
    if space.kind != TEMPERATURE:
        raise ValueError("v2 coupling acts on a temperature space")
    g2 = boundary_nodes(space, GAMMA2)
    pos = {int(node): j for j, node in enumerate(g2)}
    bd = boundary_data(space.mesh, GAMMA2, degree)
    rows, cols, vals = [], [], []
    for e in range(bd.n_edges):
        block = bd.trace @ (bd.wlen[e, :, None] * bd.trace.T)
        for li, ni in enumerate(bd.nodes[e]):
            for lj, nj in enumerate(bd.nodes[e]):
                rows.append(ni)
                cols.append(pos[int(nj)])
                vals.append(block[li, lj])
    r2 = sparse.coo_matrix((vals, (rows, cols)), shape=(space.n_total, len(g2))).tocsr()
    return r2, g2


def boundary_control_mass(space: FunctionSpace, tag: str, degree: int = DEFAULT_EDGE_DEGREE):
    """Boundary mass matrix over the nodal control values of one tag
    (scalar blocks; velocity controls use it per component)."""
    nodes = boundary_nodes(space, tag)
    pos = {int(node): j for j, node in enumerate(nodes)}
    bd = boundary_data(space.mesh, tag, degree)
    rows, cols, vals = [], [], []
    for e in range(bd.n_edges):
        block = bd.trace @ (bd.wlen[e, :, None] * bd.trace.T)
        for li, ni in enumerate(bd.nodes[e]):
            for lj, nj in enumerate(bd.nodes[e]):
                rows.append(pos[int(ni)])
                cols.append(pos[int(nj)])
                vals.append(block[li, lj])
    m = sparse.coo_matrix((vals, (rows, cols)), shape=(len(nodes), len(nodes))).tocsr()
    return m, nodes


# ---------------------------------------------------------------------------
# restriction helpers and Lemma-style constant estimates


def restrict(mat: sparse.spmatrix, rows: np.ndarray, cols: np.ndarray | None = None) -> sparse.csr_matrix:
    mat = mat.tocsr()
    out = mat[rows]
    return out[:, rows if cols is None else cols].tocsr()


def estimate_coercivity(space: FunctionSpace, operator, gram=None, tol: float = 1e-8,
                        max_iter: int = 500) -> float:
    """Smallest generalized eigenvalue of ``operator x = lambda gram x`` on
    the unconstrained DOFs, by inverse power iteration.

    ``gram`` defaults to the H1 Gram matrix of the space.  Raises
    RuntimeError if the Rayleigh quotient has not settled after
    ``max_iter`` iterations.
    """
    a = operator.matrix if isinstance(operator, AssembledOperator) else operator
    g = gram.matrix if isinstance(gram, AssembledOperator) else gram
    if g is None:
        g = space.h1_gram
    free = space.free
    a_f = restrict(a, free)
    g_f = restrict(g, free)
    lu = splu(a_f.tocsc())
    x = np.ones(a_f.shape[0])
    x[::2] += 0.5  # break symmetry against odd eigenvectors
    x /= np.sqrt(x @ (g_f @ x))
    lam_old = np.inf
    for _ in range(max_iter):
        y = lu.solve(g_f @ x)
        ny = np.sqrt(y @ (g_f @ y))
        if not np.isfinite(ny) or ny == 0.0:
            raise RuntimeError("inverse power iteration broke down")
        x = y / ny
        lam = float(x @ (a_f @ x))
        if abs(lam - lam_old) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_old = lam
    raise RuntimeError(f"inverse power iteration did not converge in {max_iter} iterations")


def random_field(space: FunctionSpace, rng: np.random.Generator, scale: float = 1.0) -> DiscreteField:
    coeffs = np.zeros(space.n_total)
    free = space.free
    coeffs[free] = scale * rng.standard_normal(free.size)
    return DiscreteField(space, coeffs)


def random_smooth_velocity(space: FunctionSpace, rng: np.random.Generator,
                           poly_degree: int = 2) -> DiscreteField:
    """Interpolant of a random smooth div-free field whose law does not
    depend on the mesh: stream function = boundary bubble times a random
    polynomial.  Vanishes on the whole boundary, so it lies in the
    constrained space for any tagging; used for refinement-stable sampled
    constants."""
    from .spaces import AnalyticDivFreeField, interpolate, poly_product_1d

    bubble = np.outer(
        poly_product_1d([0, 0, 1.0], [1.0, -2.0, 1.0]),
        poly_product_1d([0, 0, 1.0], [1.0, -2.0, 1.0]),
    )
    pcoef = rng.standard_normal((poly_degree + 1, poly_degree + 1))
    stream = _poly2d_mul(bubble, pcoef)
    field = AnalyticDivFreeField(16.0 * stream)
    return interpolate(space, lambda x, y: np.moveaxis(field.velocity(x, y), -1, 0))


def random_smooth_temperature(space: FunctionSpace, rng: np.random.Generator,
                              poly_degree: int = 2) -> DiscreteField:
    """Interpolant of a random smooth scalar vanishing on the whole
    boundary (mesh-independent law)."""
    from .spaces import interpolate

    pcoef = rng.standard_normal((poly_degree + 1, poly_degree + 1))

    def f(x, y):
        base = x * (1.0 - x) * y * (1.0 - y)
        return 4.0 * base * np.polynomial.polynomial.polyval2d(x, y, pcoef)

    return interpolate(space, f)


def _poly2d_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i : i + b.shape[0], j : j + b.shape[1]] += a[i, j] * b
    return out


def estimate_continuity(form: str, v_space: FunctionSpace, w_space: FunctionSpace | None = None,
                        n_samples: int = 200, rng: np.random.Generator | None = None) -> float:
    """Largest sampled ratio |form(u,v,w)| / (||u|| ||v|| ||w||) in H1 norms.

    Samples are interpolants of random smooth fields with a mesh-independent
    law, so the estimate is stable under refinement (rough coefficient
    noise would drive the ratio to zero with its exploding H1 norms)."""
    from .spaces import h1_norm

    rng = rng if rng is not None else np.random.default_rng(0)
    best = 0.0
    for _ in range(n_samples):
        if form == "b":
            u, v, w = (random_smooth_velocity(v_space, rng) for _ in range(3))
            val = abs(eval_b(u, v, w))
        elif form == "c":
            if w_space is None:
                raise ValueError("continuity of the advection form needs the temperature space")
            u = random_smooth_velocity(v_space, rng)
            v = random_smooth_temperature(w_space, rng)
            w = random_smooth_temperature(w_space, rng)
            val = abs(eval_c(u, v, w))
        else:
            raise ValueError(f"unknown form {form!r}")
        denom = h1_norm(u) * h1_norm(v) * h1_norm(w)
        if denom > 0:
            best = max(best, val / denom)
    return best


def operator_bound_samples(space: FunctionSpace, n_samples: int = 50,
                           rng: np.random.Generator | None = None) -> np.ndarray:
    """Sampled ratios ||B(z) z||_dual / ||z||^2 over random smooth fields,
    the dual norm taken against the H1 Gram of the unconstrained DOFs."""
    rng = rng if rng is not None else np.random.default_rng(0)
    free = space.free
    g_f = restrict(space.h1_gram, free)
    lu = splu(g_f.tocsc())
    ratios = np.empty(n_samples)
    for i in range(n_samples):
        z = random_smooth_velocity(space, rng)
        bmat = assemble_convection_rot(space, z).matrix
        f = (bmat @ z.coeffs)[free]
        dual = np.sqrt(max(f @ lu.solve(f), 0.0))
        nrm2 = z.coeffs @ (space.h1_gram @ z.coeffs)
        ratios[i] = dual / nrm2
    return ratios


@dataclass
class ConstantsReport:
    """Estimated coercivity/continuity constants of the bilinear and
    trilinear forms (sampled lower/upper bounds, not sharp values)."""

    c1_hat: float
    c1p_hat: float
    c2_hat: float
    c3_hat: float
    cB_hat: float

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(
                {
                    "c1_hat": self.c1_hat,
                    "c1p_hat": self.c1p_hat,
                    "c2_hat": self.c2_hat,
                    "c3_hat": self.c3_hat,
                    "cB_hat": self.cB_hat,
                },
                f,
                indent=2,
                sort_keys=True,
            )
            f.write("\n")


def build_constants_report(v_space: FunctionSpace, w_space: FunctionSpace,
                           rng: np.random.Generator, n_samples: int = 50) -> ConstantsReport:
    c1 = estimate_coercivity(v_space, assemble_rot_stiffness(v_space))
    c1p = estimate_coercivity(w_space, assemble_grad_stiffness(w_space))
    c2 = estimate_continuity("b", v_space, n_samples=n_samples, rng=rng)
    c3 = estimate_continuity("c", v_space, w_space, n_samples=n_samples, rng=rng)
    cb = float(np.max(operator_bound_samples(v_space, n_samples=n_samples, rng=rng)))
    return ConstantsReport(c1_hat=c1, c1p_hat=c1p, c2_hat=c2, c3_hat=c3, cB_hat=cb)


def analytic_h1_norm(field: PolynomialField, mesh: Mesh, degree: int | None = None) -> float:
    """H1 norm of an analytic vector field by quadrature."""
    if degree is None:
        degree = min(2 * field.poly_degree, MAX_TRI_DEGREE)
    ctx = fem_context(mesh, max(degree, 2))
    xs, ys = ctx.points_xy[..., 0], ctx.points_xy[..., 1]
    vals = field.velocity(xs, ys)
    grads = field.gradient(xs, ys)
    dens = np.sum(vals**2, axis=-1) + np.sum(grads**2, axis=(-2, -1))
    return float(np.sqrt(np.sum(ctx.wdet * dens)))

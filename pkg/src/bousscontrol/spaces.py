"""Constrained finite-element spaces and discrete/analytic fields.

Three space kinds on one triangulation:

* ``velocity`` -- piecewise-quadratic vector field.  Both components vanish
  on Gamma2 edges; on Gamma1 edges only the tangential component vanishes
  (the normal component stays free so the total-head boundary condition can
  act on it).  Corner nodes accumulate the essential constraints of every
  boundary edge they touch.
* ``temperature`` -- piecewise-quadratic scalar field vanishing on the
  closure of Gamma1.
* ``head`` -- piecewise-linear scalar field for the total-head multiplier,
  unconstrained.

Velocity DOFs are stacked by component: dof = comp * n_p2_nodes + node.
Coefficient vectors always cover every DOF; constrained entries are pinned
to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import sparse

from . import _fem
from .mesh import GAMMA1, GAMMA2, Mesh

VELOCITY = "velocity"
TEMPERATURE = "temperature"
HEAD = "head"
KINDS = (VELOCITY, TEMPERATURE, HEAD)


@dataclass(frozen=True, eq=False)
class FunctionSpace:
    kind: str
    mesh: Mesh
    ctx: _fem.FemContext
    n_total: int
    constrained: np.ndarray  # bool mask over all DOFs
    constrained_reason: dict
    mass: sparse.csr_matrix
    stiffness: sparse.csr_matrix
    _extra: dict = dc_field(default_factory=dict)

    @property
    def n_dofs(self) -> int:
        """Unconstrained DOF count."""
        return int(self.n_total - np.count_nonzero(self.constrained))

    @property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.constrained)

    @property
    def constrained_dofs(self) -> np.ndarray:
        return np.flatnonzero(self.constrained)

    @property
    def h1_gram(self) -> sparse.csr_matrix:
        return self._extra["h1_gram"]

    @property
    def n_scalar_nodes(self) -> int:
        """Scalar nodes underlying this space (P2 nodes, or vertices for head)."""
        return self.ctx.n_p2 if self.kind in (VELOCITY, TEMPERATURE) else self.ctx.n_p1

    @property
    def node_coords(self) -> np.ndarray:
        return self.ctx.p2_coords if self.kind in (VELOCITY, TEMPERATURE) else self.mesh.nodes

    def zero_field(self) -> "DiscreteField":
        return DiscreteField(self, np.zeros(self.n_total))

    def apply_constraints(self, coeffs: np.ndarray) -> np.ndarray:
        out = np.array(coeffs, dtype=float, copy=True)
        out[self.constrained] = 0.0
        return out


@dataclass(eq=False)
class DiscreteField:
    """Coefficient vector over a function space; constrained DOFs stay 0."""

    space: FunctionSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_total,):
            raise ValueError(
                f"coefficient vector has shape {self.coeffs.shape}, "
                f"expected ({self.space.n_total},)"
            )

    def copy(self) -> "DiscreteField":
        return DiscreteField(self.space, self.coeffs.copy())

    def components(self):
        """Velocity only: (x-part, y-part) views of the coefficient vector."""
        n = self.space.n_scalar_nodes
        return self.coeffs[:n], self.coeffs[n:]


def _edge_p2_nodes(ctx: _fem.FemContext, a: int, b: int):
    mid = ctx.edge_to_node[(min(a, b), max(a, b))]
    return (a, b, mid)


def build_space(mesh: Mesh, kind: str, ctx: _fem.FemContext | None = None,
                constrain: bool = True, quad_degree: int = 6) -> FunctionSpace:
    """Assemble DOF bookkeeping, constraint masks and Gram matrices.

    ``constrain=False`` builds the unconstrained variant of the same space
    (used by tests that need fields violating the boundary conditions).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown space kind {kind!r}")
    if ctx is None:
        ctx = _fem.FemContext(mesh, degree=quad_degree)

    if kind == HEAD:
        n_total = ctx.n_p1
        constrained = np.zeros(n_total, dtype=bool)
        reasons: dict = {}
        mass = _fem.scalar_mass(ctx, order=1)
        stiff = _fem.scalar_stiffness(ctx, order=1)
    elif kind == TEMPERATURE:
        n_total = ctx.n_p2
        constrained = np.zeros(n_total, dtype=bool)
        reasons = {}
        if constrain:
            for (a, b, tag) in mesh.boundary_edges:
                if tag == GAMMA1:
                    for node in _edge_p2_nodes(ctx, a, b):
                        constrained[node] = True
                        reasons[node] = GAMMA1
        mass = _fem.scalar_mass(ctx, order=2)
        stiff = _fem.scalar_stiffness(ctx, order=2)
    else:  # velocity
        n = ctx.n_p2
        n_total = 2 * n
        constrained = np.zeros(n_total, dtype=bool)
        reasons = {}
        if constrain:
            for (a, b, tag) in mesh.boundary_edges:
                nodes = _edge_p2_nodes(ctx, a, b)
                if tag == GAMMA2:
                    for node in nodes:
                        for comp in (0, 1):
                            constrained[comp * n + node] = True
                            reasons[comp * n + node] = GAMMA2
                else:
                    # axis-aligned Gamma1 edge: the tangential component is
                    # the axis the edge runs along
                    t = mesh.nodes[b] - mesh.nodes[a]
                    comp = 0 if abs(t[0]) > abs(t[1]) else 1
                    for node in nodes:
                        dof = comp * n + node
                        constrained[dof] = True
                        reasons.setdefault(dof, f"{GAMMA1}-tangential")
        ms = _fem.scalar_mass(ctx, order=2)
        ks = _fem.scalar_stiffness(ctx, order=2)
        mass = sparse.block_diag([ms, ms], format="csr")
        stiff = sparse.block_diag([ks, ks], format="csr")

    space = FunctionSpace(
        kind=kind,
        mesh=mesh,
        ctx=ctx,
        n_total=n_total,
        constrained=constrained,
        constrained_reason=reasons,
        mass=mass,
        stiffness=stiff,
    )
    space._extra["h1_gram"] = (mass + stiff).tocsr()
    return space


def _eval_at_points(f, xs: np.ndarray, ys: np.ndarray, n_comp: int) -> np.ndarray:
    """Evaluate a user function at many points, vectorized when possible."""
    try:
        out = np.asarray(f(xs, ys), dtype=float)
        if n_comp == 1:
            out = np.broadcast_to(out, xs.shape).astype(float)
            return out
        if out.shape == (n_comp,) + xs.shape:
            return np.moveaxis(out, 0, -1)
        if out.shape == xs.shape + (n_comp,):
            return out
        raise ValueError
    except Exception:
        if n_comp == 1:
            return np.array([float(f(x, y)) for x, y in zip(xs, ys)])
        return np.array([np.asarray(f(x, y), dtype=float) for x, y in zip(xs, ys)])


def interpolate(space: FunctionSpace, f) -> DiscreteField:
    """Nodal interpolant of ``f``; constrained DOFs are forced to zero.

    ``f(x, y)`` returns a scalar for temperature/head and a length-2
    sequence for velocity.  Vectorized callables are used directly.
    """
    xy = space.node_coords
    if space.kind == VELOCITY:
        vals = _eval_at_points(f, xy[:, 0], xy[:, 1], 2)
        coeffs = np.concatenate([vals[:, 0], vals[:, 1]])
    else:
        coeffs = _eval_at_points(f, xy[:, 0], xy[:, 1], 1)
    return DiscreteField(space, space.apply_constraints(coeffs))


def l2_norm(field: DiscreteField) -> float:
    c = field.coeffs
    return float(np.sqrt(max(c @ (field.space.mass @ c), 0.0)))


def h1_norm(field: DiscreteField) -> float:
    c = field.coeffs
    return float(np.sqrt(max(c @ (field.space.h1_gram @ c), 0.0)))


def rot_seminorm(field: DiscreteField) -> float:
    """Seminorm induced by the scalar curl d(z_y)/dx - d(z_x)/dy."""
    if field.space.kind != VELOCITY:
        raise ValueError("rot_seminorm is defined for velocity fields only")
    a1 = vector_rot_matrix(field.space)
    c = field.coeffs
    return float(np.sqrt(max(c @ (a1 @ c), 0.0)))


def vector_rot_matrix(space: FunctionSpace) -> sparse.csr_matrix:
    """Matrix of integrals rot(phi_i) rot(phi_j) over stacked velocity DOFs."""
    if space.kind != VELOCITY:
        raise ValueError("rot matrix requires a velocity space")
    cached = space._extra.get("rot_matrix")
    if cached is not None:
        return cached
    ctx = space.ctx
    sxx = _fem.partial_stiffness(ctx, 0, 0)
    syy = _fem.partial_stiffness(ctx, 1, 1)
    sxy = _fem.partial_stiffness(ctx, 0, 1)
    a1 = sparse.bmat([[syy, -sxy.T], [-sxy, sxx]], format="csr")
    space._extra["rot_matrix"] = a1
    return a1


def vector_grad_div_matrix(space: FunctionSpace) -> sparse.csr_matrix:
    """Matrix of integrals div(phi_i) div(phi_j) over stacked velocity DOFs.

    Vanishes on pointwise divergence-free fields; added to the curl-curl
    matrix it removes the spurious curl-free spline modes of the quadratic
    Lagrange space (gradients of C1 piecewise cubics) that otherwise make
    the viscous form singular on the discretely div-free subspace.
    """
    if space.kind != VELOCITY:
        raise ValueError("grad-div matrix requires a velocity space")
    cached = space._extra.get("grad_div_matrix")
    if cached is not None:
        return cached
    ctx = space.ctx
    sxx = _fem.partial_stiffness(ctx, 0, 0)
    syy = _fem.partial_stiffness(ctx, 1, 1)
    sxy = _fem.partial_stiffness(ctx, 0, 1)
    gd = sparse.bmat([[sxx, sxy], [sxy.T, syy]], format="csr")
    space._extra["grad_div_matrix"] = gd
    return gd


def boundary_nodes(space: FunctionSpace, tag: str) -> np.ndarray:
    """Sorted P2 node ids lying on edges with the given tag."""
    nodes = set()
    for (a, b, t) in space.mesh.boundary_edges:
        if t == tag:
            nodes.update(_edge_p2_nodes(space.ctx, a, b))
    return np.array(sorted(nodes), dtype=np.int64)


def dump_field_csv(field: DiscreteField, path) -> None:
    """Velocity fields dump as (node_id, zx, zy); scalars as (dof_id, value)."""
    with open(path, "w", newline="") as f:
        if field.space.kind == VELOCITY:
            zx, zy = field.components()
            f.write("node_id,zx,zy\n")
            for i in range(field.space.n_scalar_nodes):
                f.write(f"{i},{float(zx[i])!r},{float(zy[i])!r}\n")
        else:
            f.write("dof_id,value\n")
            for i, v in enumerate(field.coeffs):
                f.write(f"{i},{float(v)!r}\n")


# ---------------------------------------------------------------------------
# analytic polynomial fields (test oracles)


def _polyder(c: np.ndarray, axis: int) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape[axis] <= 1:
        return np.zeros((1, 1))
    return npoly.polyder(c, axis=axis)


def poly_product_1d(*factors) -> np.ndarray:
    """Multiply 1D polynomial coefficient arrays (lowest degree first)."""
    out = np.array([1.0])
    for f in factors:
        out = npoly.polymul(out, np.asarray(f, dtype=float))
    return out


class PolynomialField:
    """Vector field with polynomial components c1[i,j], c2[i,j] on x^i y^j."""

    def __init__(self, c1: np.ndarray, c2: np.ndarray):
        self.c1 = np.atleast_2d(np.asarray(c1, dtype=float))
        self.c2 = np.atleast_2d(np.asarray(c2, dtype=float))

    @property
    def poly_degree(self) -> int:
        d1 = (self.c1.shape[0] - 1) + (self.c1.shape[1] - 1)
        d2 = (self.c2.shape[0] - 1) + (self.c2.shape[1] - 1)
        return max(d1, d2)

    def velocity(self, x, y) -> np.ndarray:
        u1 = npoly.polyval2d(x, y, self.c1)
        u2 = npoly.polyval2d(x, y, self.c2)
        return np.stack([u1, u2], axis=-1)

    def rot(self, x, y):
        return npoly.polyval2d(x, y, _polyder(self.c2, 0)) - npoly.polyval2d(
            x, y, _polyder(self.c1, 1)
        )

    def divergence(self, x, y):
        return npoly.polyval2d(x, y, _polyder(self.c1, 0)) + npoly.polyval2d(
            x, y, _polyder(self.c2, 1)
        )

    def gradient(self, x, y) -> np.ndarray:
        """Component gradients, shape (..., 2, 2) indexed [component, axis]."""
        rows = []
        for c in (self.c1, self.c2):
            rows.append(
                np.stack(
                    [npoly.polyval2d(x, y, _polyder(c, 0)), npoly.polyval2d(x, y, _polyder(c, 1))],
                    axis=-1,
                )
            )
        return np.stack(rows, axis=-2)


class AnalyticDivFreeField(PolynomialField):
    """Pointwise divergence-free field from a polynomial stream function:
    velocity = (d psi / dy, -d psi / dx)."""

    def __init__(self, stream_coeffs: np.ndarray):
        self.stream = np.atleast_2d(np.asarray(stream_coeffs, dtype=float))
        super().__init__(_polyder(self.stream, 1), -_polyder(self.stream, 0))

    @classmethod
    def from_1d_factors(cls, fx, fy) -> "AnalyticDivFreeField":
        """Stream function psi(x, y) = fx(x) * fy(y)."""
        return cls(np.outer(np.asarray(fx, dtype=float), np.asarray(fy, dtype=float)))

    @classmethod
    def boundary_bubble(cls, scale: float = 1.0) -> "AnalyticDivFreeField":
        """psi = x^2 (1-x)^2 y^2 (1-y)^2: velocity vanishes on the whole
        boundary of the unit square."""
        q = poly_product_1d([0, 0, 1.0], [1.0, -2.0, 1.0])  # x^2 (1-x)^2
        return cls.from_1d_factors(scale * q, q)

    @classmethod
    def slip_on_vertical_sides(cls, scale: float = 1.0) -> "AnalyticDivFreeField":
        """psi = x (1-x) y^2 (1-y)^2: velocity vanishes on y=0,1 and has
        zero normal component (free tangential part) on x=0,1."""
        fx = poly_product_1d([0, 1.0], [1.0, -1.0])  # x (1-x)
        fy = poly_product_1d([0, 0, 1.0], [1.0, -2.0, 1.0])  # y^2 (1-y)^2
        return cls.from_1d_factors(scale * fx, fy)

"""Structured triangulations of the unit square and reference quadrature rules.

The domain is fixed to (0,1)^2 with axis-aligned sides.  Each of the four
sides carries one of two boundary tags, ``Gamma1`` (total-head / pressure
side) or ``Gamma2`` (no-slip / heat-flux side).  Every grid cell is split
along the same diagonal so DOF counts are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GAMMA1 = "Gamma1"
GAMMA2 = "Gamma2"
SIDES = ("bottom", "right", "top", "left")

DEFAULT_TAGGING = {
    "left": GAMMA1,
    "right": GAMMA1,
    "bottom": GAMMA2,
    "top": GAMMA2,
}


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation of the unit square.

    Attributes
    ----------
    nodes : (n_nodes, 2) float array
        Vertex coordinates.
    elements : (n_elements, 3) int array
        Counter-clockwise vertex triples.
    boundary_edges : list of (n0, n1, tag)
        Boundary segments oriented counter-clockwise around the domain,
        so the outward normal of edge (n0, n1) is (t_y, -t_x).
    h : float
        Longest element edge.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: tuple
    h: float
    nx: int
    ny: int
    tagging: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def edges_with_tag(self, tag: str) -> list:
        return [(a, b) for (a, b, t) in self.boundary_edges if t == tag]

    def element_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        v1 = p[:, 1] - p[:, 0]
        v2 = p[:, 2] - p[:, 0]
        return 0.5 * (v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])

    def edge_normal(self, n0: int, n1: int) -> np.ndarray:
        t = self.nodes[n1] - self.nodes[n0]
        t = t / np.hypot(t[0], t[1])
        return np.array([t[1], -t[0]])


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Quadrature on the reference triangle or unit segment.

    Triangle points are stored as barycentric coordinates (n, 3) and the
    weights sum to the reference area 1/2.  Edge points are parameters in
    (0, 1) with weights summing to 1.  All weights are positive.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


def build_unit_square_mesh(nx: int, ny: int, tagging: dict | None = None) -> Mesh:
    """Triangulate (0,1)^2 into 2*nx*ny right triangles with tagged boundary.

    Parameters
    ----------
    nx, ny : int
        Subdivisions per direction, both >= 1.
    tagging : dict, optional
        Maps each side name in {"left","right","bottom","top"} to "Gamma1"
        or "Gamma2".  At least one side must be Gamma2.  Defaults to
        Gamma1 on x=0 and x=1, Gamma2 on y=0 and y=1.
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"subdivision counts must be >= 1, got nx={nx}, ny={ny}")
    tagging = dict(DEFAULT_TAGGING if tagging is None else tagging)
    unknown = set(tagging) - set(SIDES)
    if unknown:
        raise ValueError(f"unknown side names in tagging: {sorted(unknown)}")
    missing = set(SIDES) - set(tagging)
    if missing:
        raise ValueError(f"tagging must cover all four sides, missing {sorted(missing)}")
    bad = {s: t for s, t in tagging.items() if t not in (GAMMA1, GAMMA2)}
    if bad:
        raise ValueError(f"tags must be '{GAMMA1}' or '{GAMMA2}', got {bad}")
    if all(t != GAMMA2 for t in tagging.values()):
        raise ValueError("at least one side must be tagged Gamma2")

    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    xv, yv = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([xv.ravel(), yv.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    elements = []
    for j in range(ny):
        for i in range(nx):
            a = nid(i, j)
            b = nid(i + 1, j)
            c = nid(i + 1, j + 1)
            d = nid(i, j + 1)
            elements.append((a, b, c))
            elements.append((a, c, d))
    elements = np.asarray(elements, dtype=np.int64)

    # counter-clockwise traversal: bottom, right, top, left
    boundary = []
    for i in range(nx):
        boundary.append((nid(i, 0), nid(i + 1, 0), tagging["bottom"]))
    for j in range(ny):
        boundary.append((nid(nx, j), nid(nx, j + 1), tagging["right"]))
    for i in range(nx, 0, -1):
        boundary.append((nid(i, ny), nid(i - 1, ny), tagging["top"]))
    for j in range(ny, 0, -1):
        boundary.append((nid(0, j), nid(0, j - 1), tagging["left"]))

    h = math.hypot(1.0 / nx, 1.0 / ny)
    return Mesh(
        nodes=nodes,
        elements=elements,
        boundary_edges=tuple(boundary),
        h=h,
        nx=nx,
        ny=ny,
        tagging=tagging,
    )


# Symmetric triangle rules with positive weights (weights normalized to sum 1,
# scaled by the reference area 1/2 below).  The degree-3 request is served by
# the degree-4 rule; a negative-weight 4-point rule would break positivity.
_TRI_RULES = {
    1: [((1 / 3, 1 / 3, 1 / 3), 1.0)],
    2: [
        ((2 / 3, 1 / 6, 1 / 6), 1 / 3),
        ((1 / 6, 2 / 3, 1 / 6), 1 / 3),
        ((1 / 6, 1 / 6, 2 / 3), 1 / 3),
    ],
}


def _perm3(a: float, w: float):
    b = 1.0 - 2.0 * a
    return [((b, a, a), w), ((a, b, a), w), ((a, a, b), w)]


def _perm6(a: float, b: float, w: float):
    c = 1.0 - a - b
    return [
        ((a, b, c), w), ((a, c, b), w), ((b, a, c), w),
        ((b, c, a), w), ((c, a, b), w), ((c, b, a), w),
    ]


_TRI_RULES[4] = _perm3(0.445948490915965, 0.223381589678011) + _perm3(
    0.091576213509771, 0.109951743655322
)
_TRI_RULES[6] = (
    _perm3(0.063089014491502, 0.050844906370207)
    + _perm3(0.249286745170910, 0.116786275726379)
    + _perm6(0.053145049844817, 0.310352451033784, 0.082851075618374)
)

MAX_TABULATED_TRI_DEGREE = 6
MAX_TRI_DEGREE = 30


def triangle_quadrature(degree: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree <= ``degree`` on the
    reference triangle {x,y >= 0, x+y <= 1}.

    Degrees up to 6 use tabulated symmetric rules; higher degrees fall back
    to a collapsed Gauss-Legendre product rule (still positive weights).
    """
    if degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {degree}")
    if degree > MAX_TRI_DEGREE:
        raise ValueError(f"triangle quadrature supports degree <= {MAX_TRI_DEGREE}")
    if degree <= MAX_TABULATED_TRI_DEGREE:
        for d in sorted(_TRI_RULES):
            if d >= degree:
                pts = np.array([p for p, _ in _TRI_RULES[d]])
                wts = 0.5 * np.array([w for _, w in _TRI_RULES[d]])
                return QuadratureRule(points=pts, weights=wts, degree=d)
    return _collapsed_triangle_rule(degree)


def _collapsed_triangle_rule(degree: int) -> QuadratureRule:
    # map (u, v) in [0,1]^2 to (xi, eta) = (u, v(1-u)); the Jacobian (1-u)
    # raises the u-degree by one, hence the +2 below.
    n = (degree + 2 + 1) // 2 + 1
    gu, wu = np.polynomial.legendre.leggauss(n)
    gu = 0.5 * (gu + 1.0)
    wu = 0.5 * wu
    xi = np.repeat(gu, n)
    v = np.tile(gu, n)
    eta = v * (1.0 - xi)
    w = np.repeat(wu, n) * np.tile(wu, n) * (1.0 - xi)
    pts = np.column_stack([1.0 - xi - eta, xi, eta])
    return QuadratureRule(points=pts, weights=w, degree=degree)


def edge_quadrature(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on the unit segment, exact to ``degree``."""
    if degree < 1:
        raise ValueError(f"quadrature degree must be >= 1, got {degree}")
    n = (degree + 1) // 2 + 1
    g, w = np.polynomial.legendre.leggauss(n)
    pts = 0.5 * (g + 1.0)
    return QuadratureRule(points=pts, weights=0.5 * w, degree=degree)


def dump_mesh_csv(mesh: Mesh, directory) -> None:
    """Write nodes.csv (id,x,y), elements.csv (id,n0,n1,n2) and
    boundary.csv (id,n0,n1,tag) into ``directory``."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="") as f:
        f.write("id,x,y\n")
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"{i},{float(x)!r},{float(y)!r}\n")
    with open(directory / "elements.csv", "w", newline="") as f:
        f.write("id,n0,n1,n2\n")
        for i, (a, b, c) in enumerate(mesh.elements):
            f.write(f"{i},{a},{b},{c}\n")
    with open(directory / "boundary.csv", "w", newline="") as f:
        f.write("id,n0,n1,tag\n")
        for i, (a, b, t) in enumerate(mesh.boundary_edges):
            f.write(f"{i},{a},{b},{t}\n")

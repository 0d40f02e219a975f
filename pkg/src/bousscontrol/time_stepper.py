"""Implicit time integration of the coupled flow/temperature system.

Each backward-Euler step solves, with the advecting velocity frozen at the
previous Picard iterate ``a``:

    temperature:  (M_w/dt + k A2 + C_skew(a)) w+ = M_w w/dt + L2(v2) + f_w
    velocity:     (M/dt + nu A1 + B(a)) z+ + D^T P+ + G w+ = M z/dt + L1(v1) + f_z
    constraint:   D z+ = 0

B(a) is the rotational-form convection matrix (structurally
skew-symmetric) and C_skew(a) = (C(a) - C(a)^T)/2 is the skew part of the
advection matrix, so convection cancels exactly in the discrete kinetic
and thermal energy balances; the per-step residuals of those balances are
solver-tolerance small and are logged every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import forms, spaces
from .mesh import GAMMA1, GAMMA2, Mesh, build_unit_square_mesh
from .spaces import DiscreteField, build_space, interpolate


class PicardDiverged(RuntimeError):
    """Nonlinear iteration exceeded its budget without meeting tolerance."""

    def __init__(self, step: int, iterations: int, delta: float,
                 states=None, energy_log=None):
        super().__init__(
            f"Picard iteration did not reach tolerance at step {step}: "
            f"delta={delta:.3e} after {iterations} iterations"
        )
        self.step = step
        self.iterations = iterations
        self.delta = delta
        self.states = states
        self.energy_log = energy_log


class LinearSolveFailed(RuntimeError):
    """Direct solve left a residual above the configured tolerance."""


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    T: float
    nu: float = 1.0
    k: float = 1.0
    beta: float = 0.0
    g: tuple = (0.0, -1.0)
    picard_tol: float = 1e-10
    picard_max: int = 50
    lin_tol: float = 1e-9

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise ValueError("; ".join(errs))

    def validate(self):
        errs = []
        if not self.dt > 0:
            errs.append(f"dt must be positive, got {self.dt}")
        if self.T < 0:
            errs.append(f"T must be nonnegative, got {self.T}")
        if not self.nu > 0:
            errs.append(f"nu must be positive, got {self.nu}")
        if not self.k > 0:
            errs.append(f"k must be positive, got {self.k}")
        if self.beta < 0:
            errs.append(f"beta must be nonnegative, got {self.beta}")
        if not self.picard_tol > 0:
            errs.append(f"picard_tol must be positive, got {self.picard_tol}")
        if self.picard_max < 1:
            errs.append(f"picard_max must be >= 1, got {self.picard_max}")
        if not self.lin_tol > 0:
            errs.append(f"lin_tol must be positive, got {self.lin_tol}")
        return errs

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-9 * max(self.T, 1.0):
            raise ValueError(f"T={self.T} is not an integral multiple of dt={self.dt}")
        return n


@dataclass(eq=False)
class State:
    z: DiscreteField
    w: DiscreteField
    P: DiscreteField
    t: float

    def copy(self) -> "State":
        return State(self.z.copy(), self.w.copy(), self.P.copy(), self.t)


@dataclass
class EnergyRecord:
    step: int
    t: float
    kinetic: float
    thermal: float
    dissipation_z: float
    dissipation_w: float
    buoyancy_work: float
    boundary_work_z: float
    boundary_work_w: float
    forcing_work_z: float
    forcing_work_w: float
    residual_z: float
    residual_w: float
    scale_z: float
    scale_w: float
    div_residual: float
    picard_iters: int


CSV_COLUMNS = (
    "step", "t", "kinetic", "thermal", "dissipation_z", "dissipation_w",
    "boundary_work_z", "boundary_work_w", "residual_z", "residual_w",
)


class EnergyLog:
    """Per-step record of the discrete energy-balance terms."""

    def __init__(self):
        self.records: list[EnergyRecord] = []

    def append(self, rec: EnergyRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(",".join(CSV_COLUMNS) + "\n")
            for r in self.records:
                vals = [getattr(r, c) for c in CSV_COLUMNS]
                f.write(",".join(str(v) if isinstance(v, int) else repr(float(v)) for v in vals) + "\n")


@dataclass
class Forcing:
    """Optional volumetric sources: fz(x, y, t) -> (2,), fw(x, y, t) -> float."""

    fz: object = None
    fw: object = None
    steady: bool = False


class FlowProblem:
    """Spaces and time-independent operators for one mesh.

    Assembled once and shared by the stepper, the cost functional and the
    gradients, so repeated transient solves only rebuild the advection
    matrices.
    """

    def __init__(self, mesh: Mesh, quad_degree: int = 6):
        self.mesh = mesh
        self.V = build_space(mesh, spaces.VELOCITY, quad_degree=quad_degree)
        self.W = build_space(mesh, spaces.TEMPERATURE, ctx=self.V.ctx)
        self.Q = build_space(mesh, spaces.HEAD, ctx=self.V.ctx)
        self.mass_z = self.V.mass
        self.mass_w = self.W.mass
        self.visc = forms.assemble_rot_stiffness(self.V).matrix
        self.diff = forms.assemble_grad_stiffness(self.W).matrix
        self.div = forms.assemble_divergence(self.V, self.Q).matrix
        self.r1, self.gamma1_nodes = forms.control_coupling_v1(self.V)
        self.r2, self.gamma2_nodes = forms.control_coupling_v2(self.W)
        self.bmass1, _ = forms.boundary_control_mass(self.W, GAMMA1)
        self.bmass2, _ = forms.boundary_control_mass(self.W, GAMMA2)
        self.free_z = self.V.free
        self.free_w = self.W.free
        self.head_pinned = len(mesh.edges_with_tag(GAMMA1)) == 0
        self._div_free = self.div.tocsr()[:, self.free_z].tocsr()
        self._buoyancy_cache: dict = {}
        self._gram_lu: dict = {}
        self._const_blocks: dict = {}

    def const_blocks(self, cfg: "SolverConfig"):
        """Free-restricted constant parts of the step operators, cached per
        (dt, nu, k): mass/dt + nu * viscous and mass/dt + k * diffusion."""
        key = (cfg.dt, cfg.nu, cfg.k)
        blocks = self._const_blocks.get(key)
        if blocks is None:
            kz = forms.restrict(self.mass_z / cfg.dt + cfg.nu * self.visc, self.free_z)
            tw = forms.restrict(self.mass_w / cfg.dt + cfg.k * self.diff, self.free_w)
            blocks = (kz, tw)
            self._const_blocks[key] = blocks
        return blocks

    @property
    def n_gamma1(self) -> int:
        return len(self.gamma1_nodes)

    @property
    def n_gamma2(self) -> int:
        return len(self.gamma2_nodes)

    def buoyancy_matrix(self, cfg: SolverConfig) -> sparse.csr_matrix:
        key = (cfg.beta, tuple(cfg.g))
        mat = self._buoyancy_cache.get(key)
        if mat is None:
            mat = forms.assemble_buoyancy(self.V, self.W, cfg.g, cfg.beta).matrix
            self._buoyancy_cache[key] = mat
        return mat

    def gram_lu(self, which: str):
        """Cached factorization of the H1 Gram on the free DOFs (dual norms)."""
        lu = self._gram_lu.get(which)
        if lu is None:
            space = self.V if which == "z" else self.W
            g = forms.restrict(space.h1_gram, space.free)
            lu = splu(g.tocsc())
            self._gram_lu[which] = lu
        return lu

    def zero_state(self) -> State:
        return State(self.V.zero_field(), self.W.zero_field(), self.Q.zero_field(), 0.0)

    def gamma1_normals(self) -> np.ndarray:
        """Outward normal per Gamma1 control node (from the first edge the
        node belongs to; unambiguous for the default tagging)."""
        normals = np.zeros((self.n_gamma1, 2))
        pos = {int(n): i for i, n in enumerate(self.gamma1_nodes)}
        bd = forms.boundary_data(self.mesh, GAMMA1)
        for e in range(bd.n_edges):
            for node in bd.nodes[e]:
                i = pos[int(node)]
                if normals[i, 0] == 0.0 and normals[i, 1] == 0.0:
                    normals[i] = bd.normals[e]
        return normals


def _check_solve(mat, x, rhs, lin_tol, label):
    res = np.linalg.norm(mat @ x - rhs)
    if not np.isfinite(res) or res > lin_tol * (np.linalg.norm(rhs) + 1.0):
        raise LinearSolveFailed(f"{label} solve residual {res:.3e} exceeds tolerance")


def _skew_advection(problem: FlowProblem, a: DiscreteField) -> sparse.csr_matrix:
    c = forms.assemble_advection(problem.W, a).matrix
    return 0.5 * (c - c.T)


def solve_step(problem: FlowProblem, state: State, v1, v2, cfg: SolverConfig,
               fz_load=None, fw_load=None, disable_temperature: bool = False):
    """One backward-Euler step with Picard iteration on the advecting field.

    ``v1``/``v2`` are nodal control values at the new time level, shaped
    (n_gamma1, 2) and (n_gamma2,); ``fz_load``/``fw_load`` are optional
    pre-assembled volumetric load vectors.  Returns (state+, EnergyRecord).
    """
    dt = cfg.dt
    v_sp, w_sp, q_sp = problem.V, problem.W, problem.Q
    fz, fw = problem.free_z, problem.free_w

    load_z = np.zeros(v_sp.n_total) if fz_load is None else np.asarray(fz_load, dtype=float)
    load_w = np.zeros(w_sp.n_total) if fw_load is None else np.asarray(fw_load, dtype=float)
    l1 = np.zeros(v_sp.n_total)
    if v1 is not None and problem.n_gamma1:
        v1 = np.asarray(v1, dtype=float)
        if v1.shape != (problem.n_gamma1, 2):
            raise ValueError(f"v1 has shape {v1.shape}, expected {(problem.n_gamma1, 2)}")
        l1 = problem.r1 @ v1.ravel()
    l2 = np.zeros(w_sp.n_total)
    if v2 is not None and problem.n_gamma2 and not disable_temperature:
        v2 = np.asarray(v2, dtype=float)
        if v2.shape != (problem.n_gamma2,):
            raise ValueError(f"v2 has shape {v2.shape}, expected {(problem.n_gamma2,)}")
        l2 = problem.r2 @ v2

    buoy = problem.buoyancy_matrix(cfg)
    base_z = problem.mass_z @ state.z.coeffs / dt + l1 + load_z
    base_w = problem.mass_w @ state.w.coeffs / dt + l2 + load_w

    a = state.z
    w_prev_it = state.w.coeffs
    z_new = state.z.coeffs
    w_new = state.w.coeffs
    p_new = state.P.coeffs
    n_q = q_sp.n_total
    kz_const, tw_const = problem.const_blocks(cfg)
    converged = False
    iters = 0
    for it in range(1, cfg.picard_max + 1):
        iters = it
        if disable_temperature:
            w_new = state.w.coeffs.copy()
        else:
            t_f = tw_const + forms.restrict(_skew_advection(problem, a), fw)
            rhs_w = base_w[fw]
            lu_w = splu(t_f.tocsc())
            w_free = lu_w.solve(rhs_w)
            _check_solve(t_f, w_free, rhs_w, cfg.lin_tol, "temperature")
            w_new = np.zeros(w_sp.n_total)
            w_new[fw] = w_free

        k_f = kz_const + forms.restrict(
            forms.assemble_convection_rot(v_sp, a).matrix, fz
        )
        d_f = problem._div_free
        if problem.head_pinned:
            mean_q = (q_sp.mass @ np.ones(n_q))[:, None]
            sys = sparse.bmat(
                [[k_f, d_f.T, None], [d_f, None, mean_q], [None, mean_q.T, None]],
                format="csc",
            )
            rhs = np.concatenate([(base_z - buoy @ w_new)[fz], np.zeros(n_q + 1)])
        else:
            sys = sparse.bmat([[k_f, d_f.T], [d_f, None]], format="csc")
            rhs = np.concatenate([(base_z - buoy @ w_new)[fz], np.zeros(n_q)])
        lu = splu(sys)
        sol = lu.solve(rhs)
        _check_solve(sys, sol, rhs, cfg.lin_tol, "velocity/head")
        z_new = np.zeros(v_sp.n_total)
        z_new[fz] = sol[: fz.size]
        p_new = sol[fz.size : fz.size + n_q]

        dz = z_new - a.coeffs
        dw = w_new - w_prev_it
        delta = np.sqrt(max(dz @ (problem.mass_z @ dz), 0.0)) + np.sqrt(
            max(dw @ (problem.mass_w @ dw), 0.0)
        )
        a = DiscreteField(v_sp, z_new)
        w_prev_it = w_new
        if delta <= cfg.picard_tol:
            converged = True
            break
    if not converged:
        raise PicardDiverged(step=-1, iterations=iters, delta=delta)

    new = State(
        DiscreteField(v_sp, z_new),
        DiscreteField(w_sp, w_new),
        DiscreteField(q_sp, p_new),
        state.t + dt,
    )
    rec = _energy_record(problem, state, new, cfg, l1, l2, load_z, load_w, iters)
    return new, rec


def _energy_record(problem, old: State, new: State, cfg: SolverConfig,
                   l1, l2, load_z, load_w, iters) -> EnergyRecord:
    mz, mw = problem.mass_z, problem.mass_w
    dt = cfg.dt
    z0, z1 = old.z.coeffs, new.z.coeffs
    w0, w1 = old.w.coeffs, new.w.coeffs
    kin1 = 0.5 * (z1 @ (mz @ z1))
    kin0 = 0.5 * (z0 @ (mz @ z0))
    th1 = 0.5 * (w1 @ (mw @ w1))
    th0 = 0.5 * (w0 @ (mw @ w0))
    dz = z1 - z0
    dw = w1 - w0
    inc_z = 0.5 * (dz @ (mz @ dz))
    inc_w = 0.5 * (dw @ (mw @ dw))
    diss_z = cfg.nu * (z1 @ (problem.visc @ z1))
    diss_w = cfg.k * (w1 @ (problem.diff @ w1))
    buoy = z1 @ (problem.buoyancy_matrix(cfg) @ w1)
    bw_z = float(l1 @ z1)
    bw_w = float(l2 @ w1)
    fw_z = float(load_z @ z1)
    fw_w = float(load_w @ w1)
    res_z = (kin1 - kin0 + inc_z) + dt * diss_z + dt * buoy - dt * bw_z - dt * fw_z
    res_w = (th1 - th0 + inc_w) + dt * diss_w - dt * bw_w - dt * fw_w
    scale_z = (
        abs(kin1) + abs(kin0) + inc_z + dt * abs(diss_z) + dt * abs(buoy)
        + dt * abs(bw_z) + dt * abs(fw_z) + 1e-30
    )
    scale_w = (
        abs(th1) + abs(th0) + inc_w + dt * abs(diss_w) + dt * abs(bw_w)
        + dt * abs(fw_w) + 1e-30
    )
    div_res = float(np.linalg.norm(problem.div @ z1))
    return EnergyRecord(
        step=-1, t=new.t, kinetic=kin1, thermal=th1,
        dissipation_z=diss_z, dissipation_w=diss_w, buoyancy_work=buoy,
        boundary_work_z=bw_z, boundary_work_w=bw_w,
        forcing_work_z=fw_z, forcing_work_w=fw_w,
        residual_z=res_z, residual_w=res_w,
        scale_z=scale_z, scale_w=scale_w,
        div_residual=div_res, picard_iters=iters,
    )


def _eval_grid(fn, xs, ys, t, n_comp):
    """Evaluate fn(x, y, t) on (ne, nq) grids, vectorized when possible."""
    try:
        out = np.asarray(fn(xs, ys, t), dtype=float)
        if n_comp == 1:
            return np.broadcast_to(out, xs.shape).astype(float)
        if out.shape == (n_comp,) + xs.shape:
            return np.moveaxis(out, 0, -1)
        if out.shape == xs.shape + (n_comp,):
            return out
        raise ValueError
    except Exception:
        flat_x, flat_y = xs.ravel(), ys.ravel()
        if n_comp == 1:
            vals = np.array([float(fn(x, y, t)) for x, y in zip(flat_x, flat_y)])
            return vals.reshape(xs.shape)
        vals = np.array([np.asarray(fn(x, y, t), dtype=float) for x, y in zip(flat_x, flat_y)])
        return vals.reshape(xs.shape + (n_comp,))


def assemble_velocity_source(problem: FlowProblem, fn, t: float) -> np.ndarray:
    """Volume load (f, psi) over stacked velocity DOFs for f(x, y, t) -> (2,)."""
    ctx = problem.V.ctx
    xs, ys = ctx.points_xy[..., 0], ctx.points_xy[..., 1]
    f = _eval_grid(fn, xs, ys, t, 2)
    out = np.zeros(problem.V.n_total)
    n = ctx.n_p2
    for comp in range(2):
        contrib = np.einsum("eq,lq->el", ctx.wdet * f[..., comp], ctx.p2.vals)
        np.add.at(out, comp * n + ctx.elem_p2, contrib)
    return out


def assemble_temperature_source(problem: FlowProblem, fn, t: float) -> np.ndarray:
    """Volume load (f, phi) over temperature DOFs for scalar f(x, y, t)."""
    ctx = problem.W.ctx
    xs, ys = ctx.points_xy[..., 0], ctx.points_xy[..., 1]
    f = _eval_grid(fn, xs, ys, t, 1)
    out = np.zeros(problem.W.n_total)
    contrib = np.einsum("eq,lq->el", ctx.wdet * f, ctx.p2.vals)
    np.add.at(out, ctx.elem_p2, contrib)
    return out


def solve_transient(problem: FlowProblem, z0: DiscreteField, w0: DiscreteField,
                    controls, cfg: SolverConfig, forcing: Forcing | None = None,
                    disable_temperature: bool = False):
    """Run the full horizon; returns (states, EnergyLog) with
    ``len(states) == n_steps + 1`` including the initial state.

    ``controls`` is any object with arrays ``v1`` of shape
    (n_gamma1, n_steps, 2) and ``v2`` of shape (n_gamma2, n_steps), or None
    for zero controls.  On Picard failure the exception carries the partial
    trajectory.
    """
    n_steps = cfg.n_steps
    v1_all = getattr(controls, "v1", None) if controls is not None else None
    v2_all = getattr(controls, "v2", None) if controls is not None else None
    if v1_all is not None:
        v1_all = np.asarray(v1_all, dtype=float)
        if v1_all.shape != (problem.n_gamma1, n_steps, 2):
            raise ValueError(
                f"v1 control has shape {v1_all.shape}, expected "
                f"{(problem.n_gamma1, n_steps, 2)}"
            )
    if v2_all is not None:
        v2_all = np.asarray(v2_all, dtype=float)
        if v2_all.shape != (problem.n_gamma2, n_steps):
            raise ValueError(
                f"v2 control has shape {v2_all.shape}, expected "
                f"{(problem.n_gamma2, n_steps)}"
            )

    state = State(
        DiscreteField(problem.V, problem.V.apply_constraints(z0.coeffs)),
        DiscreteField(problem.W, problem.W.apply_constraints(w0.coeffs)),
        problem.Q.zero_field(),
        0.0,
    )
    states = [state]
    log = EnergyLog()
    fz_cache = fw_cache = None
    for n in range(1, n_steps + 1):
        t_next = n * cfg.dt
        fz_load = fw_load = None
        if forcing is not None:
            if forcing.fz is not None:
                if forcing.steady and fz_cache is not None:
                    fz_load = fz_cache
                else:
                    fz_load = assemble_velocity_source(problem, forcing.fz, t_next)
                    fz_cache = fz_load
            if forcing.fw is not None:
                if forcing.steady and fw_cache is not None:
                    fw_load = fw_cache
                else:
                    fw_load = assemble_temperature_source(problem, forcing.fw, t_next)
                    fw_cache = fw_load
        v1_n = v1_all[:, n - 1, :] if v1_all is not None else None
        v2_n = v2_all[:, n - 1] if v2_all is not None else None
        try:
            state, rec = solve_step(
                problem, state, v1_n, v2_n, cfg,
                fz_load=fz_load, fw_load=fw_load,
                disable_temperature=disable_temperature,
            )
        except PicardDiverged as exc:
            raise PicardDiverged(
                step=n, iterations=exc.iterations, delta=exc.delta,
                states=states, energy_log=log,
            ) from None
        rec.step = n
        states.append(state)
        log.append(rec)
    return states, log


def recover_static_pressure(problem: FlowProblem, state: State) -> DiscreteField:
    """Static pressure at the vertices: total head minus the kinetic part,
    pi = P - |z|^2 / 2, evaluated nodewise on the head space."""
    n_v = problem.Q.n_total
    zx, zy = state.z.components()
    pi = state.P.coeffs - 0.5 * (zx[:n_v] ** 2 + zy[:n_v] ** 2)
    return DiscreteField(problem.Q, pi)


# ---------------------------------------------------------------------------
# manufactured solutions


def manufactured_case(case: str, cfg: SolverConfig):
    """Closed-form state plus matching sources and boundary data.

    Returns a dict of callables: z(x,y)->(2,), w, P scalars, fz(x,y,t),
    fw(x,y,t), v1(x,y,t)->pressure value (combined with the side normal by
    the caller) and v2 per-side flux data.  The sources are derived
    symbolically from the strong form of the time-independent system.
    """
    import sympy as sp

    x, y = sp.symbols("x y")
    if case == "poly":
        z1e = y * (1 - y)
        z2e = sp.Integer(0)
        we = x * (1 - x)
        pe = sp.Rational(3, 10) + x / 2 + y / 4
    elif case == "trig":
        psi = sp.Rational(1, 10) * (sp.sin(sp.pi * x) * sp.sin(sp.pi * y)) ** 2
        z1e = sp.diff(psi, y)
        z2e = -sp.diff(psi, x)
        we = sp.Rational(1, 5) * sp.sin(sp.pi * x) * sp.cos(sp.pi * y)
        pe = sp.Rational(1, 10) * sp.cos(sp.pi * x) * sp.cos(sp.pi * y)
    else:
        raise ValueError(f"unknown manufactured case {case!r}")

    nu, k, beta = cfg.nu, cfg.k, cfg.beta
    g0, g1 = cfg.g
    omega = sp.diff(z2e, x) - sp.diff(z1e, y)
    # steady strong form: nu curl(rot z) + (rot z) x z + beta g w - grad P = f
    f1 = nu * sp.diff(omega, y) + omega * (-z2e) + beta * g0 * we - sp.diff(pe, x)
    f2 = -nu * sp.diff(omega, x) + omega * z1e + beta * g1 * we - sp.diff(pe, y)
    fwe = -k * (sp.diff(we, x, 2) + sp.diff(we, y, 2)) + z1e * sp.diff(we, x) + z2e * sp.diff(we, y)

    z_fn = sp.lambdify((x, y), [z1e, z2e], "numpy")
    w_fn = sp.lambdify((x, y), we, "numpy")
    p_fn = sp.lambdify((x, y), pe, "numpy")
    f1_fn = sp.lambdify((x, y), f1, "numpy")
    f2_fn = sp.lambdify((x, y), f2, "numpy")
    fw_fn = sp.lambdify((x, y), fwe, "numpy")
    # normal derivative of w per unit outward normal (nx, ny)
    wx_fn = sp.lambdify((x, y), sp.diff(we, x), "numpy")
    wy_fn = sp.lambdify((x, y), sp.diff(we, y), "numpy")

    def z(xv, yv):
        out = z_fn(xv, yv)
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), np.shape(xv)) for o in out])

    def fz(xv, yv, t):
        return np.stack(
            [
                np.broadcast_to(np.asarray(f1_fn(xv, yv), dtype=float), np.shape(xv)),
                np.broadcast_to(np.asarray(f2_fn(xv, yv), dtype=float), np.shape(xv)),
            ]
        )

    def fw(xv, yv, t):
        return np.broadcast_to(np.asarray(fw_fn(xv, yv), dtype=float), np.shape(xv))

    def flux(xv, yv, nrm):
        return k * (nrm[0] * wx_fn(xv, yv) + nrm[1] * wy_fn(xv, yv))

    return {
        "z": z,
        "w": lambda xv, yv: np.broadcast_to(np.asarray(w_fn(xv, yv), dtype=float), np.shape(xv)),
        "P": lambda xv, yv: np.broadcast_to(np.asarray(p_fn(xv, yv), dtype=float), np.shape(xv)),
        "fz": fz,
        "fw": fw,
        "flux": flux,
    }


def manufactured_controls(problem: FlowProblem, case_fns: dict, n_steps: int):
    """Control arrays reproducing the manufactured boundary data: the head
    trace P on Gamma1 (as v1 = P n) and the conductive flux on Gamma2."""
    normals1 = problem.gamma1_normals()
    xy1 = problem.V.ctx.p2_coords[problem.gamma1_nodes]
    v1 = np.zeros((problem.n_gamma1, n_steps, 2))
    for j in range(problem.n_gamma1):
        pval = float(case_fns["P"](xy1[j, 0], xy1[j, 1]))
        v1[j, :, :] = pval * normals1[j]

    xy2 = problem.W.ctx.p2_coords[problem.gamma2_nodes]
    v2 = np.zeros((problem.n_gamma2, n_steps))
    pos = {int(n): i for i, n in enumerate(problem.gamma2_nodes)}
    bd = forms.boundary_data(problem.mesh, GAMMA2)
    seen = set()
    for e in range(bd.n_edges):
        for node in bd.nodes[e]:
            i = pos[int(node)]
            if i in seen:
                continue
            seen.add(i)
            v2[i, :] = float(case_fns["flux"](xy2[i, 0], xy2[i, 1], bd.normals[e]))

    class _Ctl:
        pass

    ctl = _Ctl()
    ctl.v1 = v1
    ctl.v2 = v2
    return ctl


def l2_error_velocity(problem: FlowProblem, field: DiscreteField, exact, degree: int = 10) -> float:
    ctx = forms.fem_context(problem.mesh, degree)
    vals = forms._velocity_values(field, ctx)
    ex = exact(ctx.points_xy[..., 0], ctx.points_xy[..., 1])
    ex = np.moveaxis(np.asarray(ex, dtype=float), 0, -1)
    return float(np.sqrt(np.sum(ctx.wdet * np.sum((vals - ex) ** 2, axis=-1))))


def l2_error_scalar(problem: FlowProblem, field: DiscreteField, exact, degree: int = 10) -> float:
    ctx = forms.fem_context(problem.mesh, degree)
    if field.space.kind == spaces.HEAD:
        vals = np.einsum("el,lq->eq", field.coeffs[ctx.elem_p1], ctx.p1.vals)
    else:
        vals = forms._scalar_values(field, ctx)
    ex = np.asarray(exact(ctx.points_xy[..., 0], ctx.points_xy[..., 1]), dtype=float)
    return float(np.sqrt(np.sum(ctx.wdet * (vals - ex) ** 2)))


def manufactured_convergence(levels, cfg: SolverConfig | None = None, case: str = "trig",
                             tagging: dict | None = None):
    """Steady manufactured-solution errors per mesh level.

    The steady state is reached by a few large pseudo-time steps starting
    from the interpolated exact fields.  Returns a list of dicts with keys
    nx, h, err_z, err_w, err_P.
    """
    if cfg is None:
        cfg = SolverConfig(dt=100.0, T=300.0, nu=1.0, k=1.0, beta=0.5,
                           picard_tol=1e-12, picard_max=80, lin_tol=1e-8)
    fns = manufactured_case(case, cfg)
    rows = []
    for nx in levels:
        mesh = build_unit_square_mesh(nx, nx, tagging)
        problem = FlowProblem(mesh)
        n_steps = cfg.n_steps
        ctl = manufactured_controls(problem, fns, n_steps)
        z_init = interpolate(problem.V, lambda xv, yv: fns["z"](xv, yv))
        w_init = interpolate(problem.W, fns["w"])
        forcing = Forcing(fz=fns["fz"], fw=fns["fw"], steady=True)
        states, _ = solve_transient(problem, z_init, w_init, ctl, cfg, forcing=forcing)
        final = states[-1]
        rows.append(
            {
                "nx": nx,
                "h": mesh.h,
                "err_z": l2_error_velocity(problem, final.z, fns["z"]),
                "err_w": l2_error_scalar(problem, final.w, fns["w"]),
                "err_P": l2_error_scalar(problem, final.P, fns["P"]),
            }
        )
    return rows

"""Boundary-flux cost functional, admissible box, gradients and the
projected-gradient minimizer.

The cost is linear in the state trace and in the flux control:

    J = N1 * sum_n dt * int_Gamma1 (r1 . n)(z^n . n) ds
      + N2 * sum_n dt * int_Gamma2 r2 * (-v2^n / k) ds

The second term substitutes the conductive-flux boundary relation for the
normal temperature gradient, making it an explicit function of the
control; the time integral on the second term can be switched off
(``gamma2_time_integral=False`` keeps only the final-time trace).

Gradients come from the discrete adjoint of the backward-Euler system: a
reverse sweep over the transposed linearization at the converged states,
including the advecting-slot derivatives of both convection terms.  A
central finite-difference gradient over every control entry serves as the
independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import forms
from .spaces import DiscreteField
from .time_stepper import FlowProblem, SolverConfig, State, solve_transient


@dataclass(eq=False)
class Control:
    """Space-time boundary controls: total-head data on Gamma1 (vector
    valued per node) and heat-flux data on Gamma2 (scalar per node)."""

    v1: np.ndarray  # (n_gamma1, n_steps, 2)
    v2: np.ndarray  # (n_gamma2, n_steps)

    def __post_init__(self):
        self.v1 = np.asarray(self.v1, dtype=float)
        self.v2 = np.asarray(self.v2, dtype=float)
        if self.v1.ndim != 3 or self.v1.shape[2] != 2:
            raise ValueError(f"v1 must have shape (n_gamma1, n_steps, 2), got {self.v1.shape}")
        if self.v2.ndim != 2:
            raise ValueError(f"v2 must have shape (n_gamma2, n_steps), got {self.v2.shape}")
        if self.v1.shape[1] != self.v2.shape[1]:
            raise ValueError(
                f"inconsistent step counts: v1 has {self.v1.shape[1]}, v2 has {self.v2.shape[1]}"
            )

    @property
    def n_steps(self) -> int:
        return self.v1.shape[1]

    def copy(self) -> "Control":
        return Control(self.v1.copy(), self.v2.copy())

    @classmethod
    def zeros(cls, problem: FlowProblem, n_steps: int) -> "Control":
        return cls(
            np.zeros((problem.n_gamma1, n_steps, 2)),
            np.zeros((problem.n_gamma2, n_steps)),
        )

    @classmethod
    def constant(cls, problem: FlowProblem, n_steps: int, v1_value, v2_value) -> "Control":
        ctl = cls.zeros(problem, n_steps)
        ctl.v1[:] = np.asarray(v1_value, dtype=float)
        ctl.v2[:] = float(v2_value)
        return ctl


@dataclass
class Box:
    """Componentwise admissible bounds, 0 < alpha <= beta pointwise.
    Scalars or arrays broadcastable to the control shapes."""

    alpha1: object
    beta1: object
    alpha2: object
    beta2: object

    def __post_init__(self):
        for lo, hi, name in ((self.alpha1, self.beta1, "1"), (self.alpha2, self.beta2, "2")):
            lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
            if np.any(lo <= 0.0):
                raise ValueError(f"alpha{name} must be strictly positive")
            if np.any(np.broadcast_arrays(lo, hi)[0] > np.broadcast_arrays(lo, hi)[1]):
                raise ValueError(f"alpha{name} exceeds beta{name} somewhere")


def project_to_admissible(control: Control, box: Box) -> Control:
    """Componentwise clamp onto [alpha, beta]; idempotent and nonexpansive."""
    return Control(
        np.clip(control.v1, box.alpha1, box.beta1),
        np.clip(control.v2, box.alpha2, box.beta2),
    )


def is_feasible(control: Control, box: Box) -> bool:
    return bool(
        np.all(control.v1 >= box.alpha1)
        and np.all(control.v1 <= box.beta1)
        and np.all(control.v2 >= box.alpha2)
        and np.all(control.v2 <= box.beta2)
    )


def random_admissible_control(problem: FlowProblem, n_steps: int, box: Box,
                              rng: np.random.Generator) -> Control:
    a1 = np.broadcast_to(np.asarray(box.alpha1, dtype=float), (problem.n_gamma1, n_steps, 2))
    b1 = np.broadcast_to(np.asarray(box.beta1, dtype=float), (problem.n_gamma1, n_steps, 2))
    a2 = np.broadcast_to(np.asarray(box.alpha2, dtype=float), (problem.n_gamma2, n_steps))
    b2 = np.broadcast_to(np.asarray(box.beta2, dtype=float), (problem.n_gamma2, n_steps))
    v1 = a1 + (b1 - a1) * rng.random(a1.shape)
    v2 = a2 + (b2 - a2) * rng.random(a2.shape)
    return Control(v1, v2)


@dataclass
class CostConfig:
    """Weights of the boundary-flux cost.  ``r1(x, y, t)`` returns a
    2-vector on Gamma1 and ``r2(x, y, t)`` a scalar on Gamma2."""

    N1: float
    N2: float
    r1: object = None
    r2: object = None
    gamma2_time_integral: bool = True

    def __post_init__(self):
        if self.N1 < 0 or self.N2 < 0:
            raise ValueError("cost weights must be nonnegative")
        if self.r1 is None:
            self.r1 = lambda x, y, t: (1.0, 1.0)
        if self.r2 is None:
            self.r2 = lambda x, y, t: 1.0


def _trace_weight_load(problem: FlowProblem, cost_cfg: CostConfig, t: float) -> np.ndarray:
    """Velocity load of the Gamma1 cost density: entries
    int_Gamma1 (r1 . n)(psi . n) ds."""
    r1 = cost_cfg.r1
    return forms.assemble_pressure_load(problem.V, lambda x, y: r1(x, y, t))


def _flux_weight_vector(problem: FlowProblem, cost_cfg: CostConfig, t: float) -> np.ndarray:
    """Per-control-node integrals int_Gamma2 r2 chi_j ds."""
    r2 = cost_cfg.r2
    load = forms.assemble_flux_load(problem.W, lambda x, y: r2(x, y, t))
    return load[problem.gamma2_nodes]


def eval_cost(problem: FlowProblem, states, control: Control, cost_cfg: CostConfig,
              cfg: SolverConfig) -> float:
    """Discrete cost of a trajectory produced under ``control``; the time
    integrals use the rectangle rule at the new time levels, matching the
    implicit stepping."""
    n_steps = len(states) - 1
    if control.n_steps != n_steps:
        raise ValueError(
            f"trajectory has {n_steps} steps but control has {control.n_steps}"
        )
    dt = cfg.dt
    j = 0.0
    for n in range(1, n_steps + 1):
        ell = _trace_weight_load(problem, cost_cfg, n * dt)
        j += cost_cfg.N1 * dt * float(ell @ states[n].z.coeffs)
    if cost_cfg.gamma2_time_integral:
        for n in range(1, n_steps + 1):
            m2 = _flux_weight_vector(problem, cost_cfg, n * dt)
            j += -cost_cfg.N2 * dt / cfg.k * float(m2 @ control.v2[:, n - 1])
    elif n_steps >= 1:
        m2 = _flux_weight_vector(problem, cost_cfg, n_steps * dt)
        j += -cost_cfg.N2 / cfg.k * float(m2 @ control.v2[:, n_steps - 1])
    return j


def solve_and_cost(problem: FlowProblem, control: Control, cost_cfg: CostConfig,
                   cfg: SolverConfig, z0=None, w0=None):
    z0 = z0 if z0 is not None else problem.V.zero_field()
    w0 = w0 if w0 is not None else problem.W.zero_field()
    states, log = solve_transient(problem, z0, w0, control, cfg)
    return eval_cost(problem, states, control, cost_cfg, cfg), states, log


def fd_gradient(problem: FlowProblem, control: Control, cost_cfg: CostConfig,
                cfg: SolverConfig, h_fd: float = 1e-5, box: Box | None = None,
                z0=None, w0=None, max_entries: int = 500) -> Control:
    """Central-difference gradient over every control entry; each entry
    costs two transient solves, so this is the desk-scale oracle only."""
    n_entries = control.v1.size + control.v2.size
    if n_entries > max_entries:
        raise ValueError(
            f"{n_entries} control entries exceed the finite-difference budget "
            f"({max_entries}); use the adjoint gradient"
        )

    def cost_of(ctl: Control) -> float:
        return solve_and_cost(problem, ctl, cost_cfg, cfg, z0=z0, w0=w0)[0]

    grad = Control(np.zeros_like(control.v1), np.zeros_like(control.v2))
    work = control.copy()
    for arr, out in ((work.v1, grad.v1), (work.v2, grad.v2)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h_fd
            jp = cost_of(work)
            arr[idx] = orig - h_fd
            jm = cost_of(work)
            arr[idx] = orig
            out[idx] = (jp - jm) / (2.0 * h_fd)
    return grad


def adjoint_gradient(problem: FlowProblem, control: Control, cost_cfg: CostConfig,
                     cfg: SolverConfig, box: Box | None = None, z0=None, w0=None,
                     states=None):
    """Gradient of the discrete cost by a reverse sweep over the transposed
    linearized system at the converged states.

    Returns (gradient Control, J, states).  The forward trajectory is
    reused when passed in.
    """
    if states is None:
        _, states, _ = solve_and_cost(problem, control, cost_cfg, cfg, z0=z0, w0=w0)
    j_val = eval_cost(problem, states, control, cost_cfg, cfg)
    n_steps = len(states) - 1
    dt = cfg.dt
    fz, fw = problem.free_z, problem.free_w
    nz, nw = fz.size, fw.size
    n_q = problem.Q.n_total

    mz_f = forms.restrict(problem.mass_z, fz)
    mw_f = forms.restrict(problem.mass_w, fw)
    d_f = problem._div_free
    buoy_f = problem.buoyancy_matrix(cfg).tocsr()[fz][:, fw]
    r1_f = problem.r1.tocsr()[fz]
    r2_f = problem.r2.tocsr()[fw]

    grad = Control(
        np.zeros_like(control.v1) if control.v1.size else np.zeros((problem.n_gamma1, n_steps, 2)),
        np.zeros_like(control.v2) if control.v2.size else np.zeros((problem.n_gamma2, n_steps)),
    )
    lam_next = np.zeros(nz)
    mu_next = np.zeros(nw)
    for n in range(n_steps, 0, -1):
        zn = states[n].z
        wn = states[n].w
        k_op = problem.mass_z / dt + cfg.nu * problem.visc + forms.assemble_convection_rot(
            problem.V, zn
        ).matrix
        b2 = forms.assemble_convection_rot_wrt_advector(problem.V, zn).matrix
        c_mat = forms.assemble_advection(problem.W, zn).matrix
        c_skew = 0.5 * (c_mat - c_mat.T)
        t_op = problem.mass_w / dt + cfg.k * problem.diff + c_skew
        c2 = forms.assemble_advection_wrt_advector(problem.W, wn).matrix

        a11 = forms.restrict((k_op + b2).T, fz)
        a33 = forms.restrict(t_op.T, fw)
        c2_f = c2.tocsr()[fw][:, fz]
        ell = _trace_weight_load(problem, cost_cfg, n * dt)[fz]
        rhs1 = mz_f @ lam_next / dt - cost_cfg.N1 * dt * ell
        rhs3 = mw_f @ mu_next / dt
        if problem.head_pinned:
            mean_q = (problem.Q.mass @ np.ones(n_q))[:, None]
            sys = sparse.bmat(
                [
                    [a11, d_f.T, None, c2_f.T],
                    [d_f, None, mean_q, None],
                    [None, mean_q.T, None, None],
                    [buoy_f.T, None, None, a33],
                ],
                format="csc",
            )
            rhs = np.concatenate([rhs1, np.zeros(n_q + 1), rhs3])
            sol = splu(sys).solve(rhs)
            lam = sol[:nz]
            mu = sol[nz + n_q + 1 :]
        else:
            sys = sparse.bmat(
                [[a11, d_f.T, c2_f.T], [d_f, None, None], [buoy_f.T, None, a33]],
                format="csc",
            )
            rhs = np.concatenate([rhs1, np.zeros(n_q), rhs3])
            sol = splu(sys).solve(rhs)
            lam = sol[:nz]
            mu = sol[nz + n_q :]

        if problem.n_gamma1:
            grad.v1[:, n - 1, :] = (-(r1_f.T @ lam)).reshape(problem.n_gamma1, 2)
        if problem.n_gamma2:
            g2 = -(r2_f.T @ mu)
            if cost_cfg.gamma2_time_integral:
                g2 = g2 - cost_cfg.N2 * dt / cfg.k * _flux_weight_vector(problem, cost_cfg, n * dt)
            elif n == n_steps:
                g2 = g2 - cost_cfg.N2 / cfg.k * _flux_weight_vector(problem, cost_cfg, n * dt)
            grad.v2[:, n - 1] = g2
        lam_next = lam
        mu_next = mu
    return grad, j_val, states


# ---------------------------------------------------------------------------
# uniform-bound monitor


def compute_bound_ratios(problem: FlowProblem, states, control: Control | None,
                         cfg: SolverConfig):
    """Discrete energy-to-data ratios: trajectory norms (sup of kinetic or
    thermal energy, time-integrated H1 norm, dual-norm increment sum)
    against initial energy plus boundary-data norm."""
    dt = cfg.dt
    mz, mw = problem.mass_z, problem.mass_w
    gz, gw = problem.V.h1_gram, problem.W.h1_gram
    lu_z = problem.gram_lu("z")
    lu_w = problem.gram_lu("w")
    fz, fw = problem.free_z, problem.free_w

    sup_z = sup_w = 0.0
    h1_z = h1_w = 0.0
    dual_z = dual_w = 0.0
    for n, st in enumerate(states):
        zc, wc = st.z.coeffs, st.w.coeffs
        sup_z = max(sup_z, zc @ (mz @ zc))
        sup_w = max(sup_w, wc @ (mw @ wc))
        if n >= 1:
            h1_z += dt * (zc @ (gz @ zc))
            h1_w += dt * (wc @ (gw @ wc))
            dz = (mz @ (zc - states[n - 1].z.coeffs))[fz]
            dwv = (mw @ (wc - states[n - 1].w.coeffs))[fw]
            dual_z += np.sqrt(max(dz @ lu_z.solve(dz), 0.0))
            dual_w += np.sqrt(max(dwv @ lu_w.solve(dwv), 0.0))
    lhs_z = sup_z + h1_z + dual_z**2
    lhs_w = sup_w + h1_w + dual_w**2

    z0, w0 = states[0].z.coeffs, states[0].w.coeffs
    rhs_z = float(z0 @ (mz @ z0))
    rhs_w = float(w0 @ (mw @ w0))
    if control is not None and control.n_steps:
        for n in range(control.n_steps):
            v1n = control.v1[:, n, :]
            if v1n.size:
                rhs_z += dt * float(
                    v1n[:, 0] @ (problem.bmass1 @ v1n[:, 0])
                    + v1n[:, 1] @ (problem.bmass1 @ v1n[:, 1])
                )
            v2n = control.v2[:, n]
            if v2n.size:
                rhs_w += dt * float(v2n @ (problem.bmass2 @ v2n))

    def ratio(lhs, rhs):
        if lhs <= 1e-14:
            return 0.0
        return lhs / max(rhs, 1e-14)

    return ratio(lhs_z, rhs_z), ratio(lhs_w, rhs_w)


@dataclass
class BoundReport:
    ratios_z: list
    ratios_w: list

    @property
    def max_ratio_z(self) -> float:
        return max(self.ratios_z) if self.ratios_z else 0.0

    @property
    def max_ratio_w(self) -> float:
        return max(self.ratios_w) if self.ratios_w else 0.0


def uniform_bound_report(problem: FlowProblem, cfg: SolverConfig, controls,
                         z0=None, w0=None) -> BoundReport:
    """Solve once per control and collect the energy-to-data ratios."""
    rz, rw = [], []
    z0 = z0 if z0 is not None else problem.V.zero_field()
    w0 = w0 if w0 is not None else problem.W.zero_field()
    for ctl in controls:
        states, _ = solve_transient(problem, z0, w0, ctl, cfg)
        a, b = compute_bound_ratios(problem, states, ctl, cfg)
        rz.append(a)
        rw.append(b)
    return BoundReport(ratios_z=rz, ratios_w=rw)


# ---------------------------------------------------------------------------
# projected gradient descent


@dataclass
class OptimizerConfig:
    max_iters: int = 30
    tol: float = 1e-8
    sigma: float = 1e-4
    shrink: float = 0.5
    growth: float = 2.0
    step0: float = 1.0
    max_backtracks: int = 40


@dataclass
class HistoryRow:
    iteration: int
    J: float
    pg_norm: float
    step: float
    feasible: bool
    ratio_z: float
    ratio_w: float


@dataclass
class OptimizationHistory:
    rows: list = dc_field(default_factory=list)
    status: str = "running"

    def append(self, row: HistoryRow) -> None:
        self.rows.append(row)

    def costs(self):
        return [r.J for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("iter,J,pg_norm,step,feasible\n")
            for r in self.rows:
                f.write(
                    f"{r.iteration},{float(r.J)!r},{float(r.pg_norm)!r},{float(r.step)!r},{str(r.feasible).lower()}\n"
                )


def _pg_norm(control: Control, grad: Control, box: Box) -> float:
    """Stationarity measure: distance moved by one unit projected step."""
    moved = project_to_admissible(
        Control(control.v1 - grad.v1, control.v2 - grad.v2), box
    )
    return float(
        np.sqrt(
            np.sum((control.v1 - moved.v1) ** 2) + np.sum((control.v2 - moved.v2) ** 2)
        )
    )


def projected_gradient_descent(problem: FlowProblem, v_init: Control, box: Box,
                               cost_cfg: CostConfig, cfg: SolverConfig,
                               opt: OptimizerConfig | None = None,
                               z0=None, w0=None):
    """Armijo-backtracked projected gradient descent on the box.

    Every iterate is feasible by construction; a step is accepted when
    J(new) <= J - (sigma / s) * ||new - old||^2 along the projection arc.
    Returns (Control, OptimizationHistory); line-search failure is a
    terminal status, not an exception.
    """
    opt = opt if opt is not None else OptimizerConfig()
    hist = OptimizationHistory()
    v = project_to_admissible(v_init, box)
    grad, j_cur, states = adjoint_gradient(problem, v, cost_cfg, cfg, z0=z0, w0=w0)
    ratio_z, ratio_w = compute_bound_ratios(problem, states, v, cfg)
    pg = _pg_norm(v, grad, box)
    hist.append(HistoryRow(0, j_cur, pg, 0.0, is_feasible(v, box), ratio_z, ratio_w))
    if pg <= opt.tol:
        hist.status = "converged"
        return v, hist

    step = opt.step0
    for m in range(1, opt.max_iters + 1):
        accepted = False
        s = step
        for _ in range(opt.max_backtracks):
            cand = project_to_admissible(
                Control(v.v1 - s * grad.v1, v.v2 - s * grad.v2), box
            )
            move2 = float(
                np.sum((cand.v1 - v.v1) ** 2) + np.sum((cand.v2 - v.v2) ** 2)
            )
            if move2 == 0.0:
                break
            j_new, states, _ = solve_and_cost(problem, cand, cost_cfg, cfg, z0=z0, w0=w0)
            if j_new <= j_cur - opt.sigma / s * move2:
                accepted = True
                break
            s *= opt.shrink
        if not accepted:
            hist.status = "linesearch_failed"
            return v, hist
        v, j_cur = cand, j_new
        step = s * opt.growth
        grad, _, _ = adjoint_gradient(problem, v, cost_cfg, cfg, z0=z0, w0=w0, states=states)
        ratio_z, ratio_w = compute_bound_ratios(problem, states, v, cfg)
        pg = _pg_norm(v, grad, box)
        hist.append(HistoryRow(m, j_cur, pg, s, is_feasible(v, box), ratio_z, ratio_w))
        if pg <= opt.tol:
            hist.status = "converged"
            return v, hist
    hist.status = "max_iters"
    return v, hist


def export_controls_csv(control: Control, v1_path, v2_path) -> None:
    """control_v1.csv rows (boundary_dof, step, vx, vy); control_v2.csv rows
    (boundary_dof, step, value)."""
    with open(v1_path, "w", newline="") as f:
        f.write("boundary_dof,step,vx,vy\n")
        for j in range(control.v1.shape[0]):
            for n in range(control.v1.shape[1]):
                f.write(f"{j},{n + 1},{float(control.v1[j, n, 0])!r},{float(control.v1[j, n, 1])!r}\n")
    with open(v2_path, "w", newline="") as f:
        f.write("boundary_dof,step,value\n")
        for j in range(control.v2.shape[0]):
            for n in range(control.v2.shape[1]):
                f.write(f"{j},{n + 1},{float(control.v2[j, n])!r}\n")

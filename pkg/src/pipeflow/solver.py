"""Implicit time integration for the semi-discrete network equations.

Two paths:

* hyperbolic (epsilon > 0): implicit midpoint (default) or backward
  Euler on the full port-structured system.  The nonlinear stage
  equations are solved by Newton's method with an analytic Jacobian on a
  fixed sparsity pattern; the friction term gamma*|w|*w is handled
  semismoothly (subgradient 0 at w = 0).  Junction mass balances are
  imposed on the accepted end-of-step state so that every snapshot
  satisfies them to solver tolerance.

* parabolic (high-friction limit): backward Euler on the density
  equation with the face velocities tied to the discrete enthalpy
  gradient s by gamma*|w|*w = -s.  The relation is solved together with
  the mass update (see ParabolicStepper for why the velocities are kept
  as unknowns rather than eliminated through the square root).

Only enthalpy-type boundary data are supported; prescribed mass-flux
boundary values would enter through an extra load term at the terminal
faces and are left as an extension point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from . import energy as energy_mod
from .discretization import NetworkState


class StepFailure(RuntimeError):
    """Newton iteration did not reach the requested tolerance."""

    def __init__(self, message, step=None, tau=None, residual=None, iterations=None):
        super().__init__(message)
        self.step = step
        self.tau = tau
        self.residual = residual
        self.iterations = iterations
        self.partial = None


@dataclass
class SolverConfig:
    dt: float
    t_final: float
    scheme: str = "midpoint"
    newton_tol: float = 1e-11
    max_iter: int = 30
    parabolic: bool = False
    parabolic_gravity: bool = True

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")
        if self.t_final < 0.0:
            raise ValueError("final time must be nonnegative")
        if self.newton_tol <= 0.0:
            raise ValueError("Newton tolerance must be positive")
        aliases = {"implicit-midpoint": "midpoint", "midpoint": "midpoint",
                   "backward-euler": "backward-euler", "be": "backward-euler"}
        key = str(self.scheme).strip().lower()
        if key not in aliases:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self.scheme = aliases[key]


@dataclass
class EnergyReport:
    tau: float
    energy: float
    dissipation: float
    boundary_flux: float
    balance_residual: float


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    stage_dissipation: list = field(default_factory=list)
    stage_flux: list = field(default_factory=list)
    junction_h: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def append(self, state, report):
        self.times.append(state.tau)
        self.states.append(state)
        self.reports.append(report)

    @property
    def dt(self):
        if len(self.times) < 2:
            raise ValueError("trajectory has fewer than two snapshots")
        return self.times[1] - self.times[0]

    def rho_array(self):
        return np.stack([s.rho for s in self.states])

    def w_array(self):
        return np.stack([s.w for s in self.states])


def _eval_boundary(schedule, vertices, tau):
    values = {}
    for v in vertices:
        if v not in schedule:
            raise ValueError(f"missing boundary schedule for vertex {v!r}")
        entry = schedule[v]
        values[v] = float(entry(tau)) if callable(entry) else float(entry)
    return values


# ---------------------------------------------------------------------------
# hyperbolic stepper

class HyperbolicStepper:
    """Newton solver for one implicit stage of the hyperbolic system."""

    def __init__(self, system, scheme="midpoint", newton_tol=1e-11, max_iter=30,
                 forcing=None):
        if system.epsilon == 0.0:
            raise ValueError("epsilon = 0 has no hyperbolic dynamics; "
                             "use the parabolic solver")
        self.system = system
        self.theta = 0.5 if scheme == "midpoint" else 1.0
        self.scheme = scheme
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self.forcing = forcing
        self._hv = np.zeros(system.n_junctions)
        self._build_template()

    def _build_template(self):
        sys = self.system
        n_c, n_f, n_j = sys.n_cells, sys.n_faces, sys.n_junctions
        rows, cols = [], []

        def block(r, c):
            rows.append(np.asarray(r, dtype=int))
            cols.append(np.asarray(c, dtype=int))

        # mass rows: time-derivative diagonal
        block(np.arange(n_c), np.arange(n_c))

        # mass rows: advection d(Dm)/d(rho) via reconstruction pairs
        pf, pc = sys.pair_face, sys.pair_cell
        lc, rc = sys.face_left_cell[pf], sys.face_right_cell[pf]
        self._rr_left = lc >= 0
        self._rr_right = rc >= 0
        block(lc[self._rr_left], pc[self._rr_left])
        block(rc[self._rr_right], pc[self._rr_right])

        # mass rows: d(Dm)/dw
        faces = np.arange(n_f)
        flc, frc = sys.face_left_cell, sys.face_right_cell
        self._rw_left = flc >= 0
        self._rw_right = frc >= 0
        block(flc[self._rw_left], n_c + faces[self._rw_left])
        block(frc[self._rw_right], n_c + faces[self._rw_right])

        # momentum rows: d(Gh)/drho
        block(n_c + faces[self._rw_right], frc[self._rw_right])
        block(n_c + faces[self._rw_left], flc[self._rw_left])

        # momentum rows: kinetic coupling d(Gh)/dw
        ww_rows, ww_cols, ww_sign, ww_fp = [], [], [], []
        for f in range(n_f):
            for c, sign in ((frc[f], 1.0), (flc[f], -1.0)):
                if c >= 0:
                    for fp in (sys.cell_left_face[c], sys.cell_right_face[c]):
                        ww_rows.append(n_c + f)
                        ww_cols.append(n_c + fp)
                        ww_sign.append(sign)
                        ww_fp.append(fp)
        self._ww_sign = np.asarray(ww_sign)
        self._ww_fp = np.asarray(ww_fp, dtype=int)
        block(ww_rows, ww_cols)

        # momentum rows: time derivative + friction diagonal
        block(n_c + faces, n_c + faces)

        # momentum rows: junction enthalpy columns
        block(n_c + sys.junction_term_faces,
              n_c + n_f + sys.junction_term_slots)

        # junction constraint rows (end-of-step state)
        jf = sys.junction_term_faces
        adj = np.where(sys.face_left_cell[jf] >= 0,
                       sys.face_left_cell[jf], sys.face_right_cell[jf])
        self._j_adj_cells = adj
        self._j_kappa = (sys.a_cells[adj] * sys.dx_cells[adj]
                         / (2.0 * sys.omega_faces[jf]))
        block(n_c + n_f + sys.junction_term_slots, adj)
        block(n_c + n_f + sys.junction_term_slots, n_c + jf)

        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._shape = (n_c + n_f + n_j, n_c + n_f + n_j)

    def _jacobian_data(self, dt, rho_s, w_s, arho_s):
        sys = self.system
        th = self.theta
        d2p = sys.law.d2potential(rho_s)
        parts = [
            sys.c_rho,
            dt * th * w_s[sys.pair_face[self._rr_left]] * sys.pair_kappa[self._rr_left],
            -dt * th * w_s[sys.pair_face[self._rr_right]] * sys.pair_kappa[self._rr_right],
            dt * th * arho_s[self._rw_left],
            -dt * th * arho_s[self._rw_right],
            dt * th * d2p[sys.face_right_cell[self._rw_right]],
            -dt * th * d2p[sys.face_left_cell[self._rw_left]],
            dt * th * self._ww_sign * 0.5 * sys.epsilon**2 * w_s[self._ww_fp],
            sys.c_w + dt * th * 2.0 * sys.omega_faces * sys.gamma_faces * np.abs(w_s),
            dt * sys.junction_term_signs,
            sys.junction_term_signs * self._w_end[sys.junction_term_faces] * self._j_kappa,
            sys.junction_term_signs * self._arho_end[sys.junction_term_faces],
        ]
        return np.concatenate(parts)

    def _residual(self, dt, rho_n, w_n, rho, w, hv, load_rho, load_w):
        sys = self.system
        th = self.theta
        rho_s = rho_n + th * (rho - rho_n)
        w_s = w_n + th * (w - w_n)
        if np.any(rho_s <= 0.0):
            return None
        h_s = (0.5 * sys.epsilon**2 * sys.kinetic_cells(w_s)
               + sys.law.dpotential(rho_s) + sys.gz_cells)
        arho_s = sys.arho_faces(rho_s)
        m_s = arho_s * w_s
        fr_s = sys.omega_faces * sys.gamma_faces * np.abs(w_s) * w_s
        f_rho = sys.c_rho * (rho - rho_n) + dt * (sys.d_matrix @ m_s) - dt * load_rho
        f_w = (sys.c_w * (w - w_n)
               + dt * (sys.g_matrix @ h_s + sys.s_matrix @ hv + fr_s)
               - dt * load_w)
        self._arho_end = sys.arho_faces(rho)
        self._w_end = w
        m_end = self._arho_end * w
        f_j = sys.s_matrix.T @ m_end
        cache = (rho_s, w_s, arho_s, m_s, h_s)
        return f_rho, f_w, f_j, cache

    def _scaled_norm(self, dt, f_rho, f_w, f_j):
        # scale rows to update units with the flux part in field units;
        # the combined weight keeps the attainable floor near machine
        # precision for any dt
        sys = self.system
        parts = [np.abs(f_rho) / (sys.c_rho + dt * sys.dx_cells),
                 np.abs(f_w) / (sys.c_w + dt * sys.omega_faces)]
        if f_j.size:
            parts.append(np.abs(f_j))
        return max(np.max(p) for p in parts)

    def step(self, state, dt, boundary, tau_new=None):
        """Advance one step; returns (new_state, stage_info dict)."""
        sys = self.system
        tau_n = state.tau
        if tau_new is None:
            tau_new = tau_n + dt
        tau_s = tau_n + self.theta * dt
        values = _eval_boundary(boundary, sys.boundary_vertices, tau_s)
        load = sys.boundary_load(values)
        load_w = load[sys.n_cells:sys.n_cells + sys.n_faces].copy()
        load_rho = np.zeros(sys.n_cells)
        if self.forcing is not None:
            f1, f2 = self.forcing
            load_rho += sys.dx_cells * f1(sys.x_cells, tau_s)
            load_w += sys.omega_faces * f2(sys.x_faces, tau_s)

        rho_n, w_n = state.rho, state.w
        rho, w = rho_n.copy(), w_n.copy()
        hv = self._hv.copy()
        out = self._residual(dt, rho_n, w_n, rho, w, hv, load_rho, load_w)
        if out is None:
            raise StepFailure("negative density in stage state", tau=tau_n)
        f_rho, f_w, f_j, cache = out
        norm = self._scaled_norm(dt, f_rho, f_w, f_j)
        n_c, n_f = sys.n_cells, sys.n_faces
        it = 0
        while norm > self.newton_tol:
            if it >= self.max_iter:
                raise StepFailure(
                    f"Newton did not converge in {self.max_iter} iterations "
                    f"(residual {norm:.3e})", tau=tau_n, residual=norm,
                    iterations=it)
            rho_s, w_s, arho_s, _, _ = cache
            data = self._jacobian_data(dt, rho_s, w_s, arho_s)
            jac = sp.coo_matrix((data, (self._rows, self._cols)),
                                shape=self._shape).tocsc()
            try:
                delta = splu(jac).solve(np.concatenate([f_rho, f_w, f_j]))
            except RuntimeError as exc:
                raise StepFailure(f"linear solve failed: {exc}", tau=tau_n,
                                  residual=norm, iterations=it) from exc
            step_scale = 1.0
            for _ in range(12):
                rho_try = rho - step_scale * delta[:n_c]
                w_try = w - step_scale * delta[n_c:n_c + n_f]
                hv_try = hv - step_scale * delta[n_c + n_f:]
                out = self._residual(dt, rho_n, w_n, rho_try, w_try, hv_try,
                                     load_rho, load_w)
                if out is not None:
                    norm_try = self._scaled_norm(dt, out[0], out[1], out[2])
                    if norm_try < norm or norm_try <= self.newton_tol:
                        break
                step_scale *= 0.5
            else:
                raise StepFailure("Newton line search stalled", tau=tau_n,
                                  residual=norm, iterations=it)
            rho, w, hv = rho_try, w_try, hv_try
            f_rho, f_w, f_j, cache = out
            norm = norm_try
            it += 1

        self._hv = hv.copy()
        rho_s, w_s, arho_s, m_s, h_s = cache
        stage_dissipation = float(np.dot(
            sys.omega_faces * sys.gamma_faces * arho_s, np.abs(w_s) ** 3))
        stage_flux = float(np.dot(load_w, m_s) + np.dot(load_rho, h_s))
        new_state = NetworkState(tau_new, rho, w)
        info = {
            "junction_h": hv.copy(),
            "stage_dissipation": stage_dissipation,
            "stage_flux": stage_flux,
            "stage_tau": tau_s,
            "iterations": it,
            "boundary_values": values,
        }
        return new_state, info


# ---------------------------------------------------------------------------
# parabolic limit stepper

def _recovery(s, gamma):
    return -np.sign(s) * np.sqrt(np.abs(s) / gamma)


class ParabolicStepper:
    """Backward Euler for the high-friction limit density equation.

    The face velocities are kept as explicit unknowns coupled by the
    friction relation omega*(gamma*|w|*w + s) = 0 instead of being
    eliminated through the square root: Newton on the eliminated form
    oscillates around zero-slope faces (the root has unbounded slope
    there), while the polynomial form is semismooth with superlinear
    convergence.  At convergence both forms satisfy exactly the same
    equations, so every accepted state still fulfils gamma*|w|*w = -s
    face by face to solver tolerance.
    """

    def __init__(self, system, newton_tol=1e-11, max_iter=40, include_gravity=True):
        self.system = system
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self.include_gravity = include_gravity
        self._hv = None
        self._build_template()

    def _build_template(self):
        sys = self.system
        n_c, n_f, n_j = sys.n_cells, sys.n_faces, sys.n_junctions
        rows, cols = [], []

        def block(r, c):
            rows.append(np.asarray(r, dtype=int))
            cols.append(np.asarray(c, dtype=int))

        # mass rows: time-derivative diagonal and flux sensitivities
        block(np.arange(n_c), np.arange(n_c))
        pf, pc = sys.pair_face, sys.pair_cell
        lc, rc = sys.face_left_cell[pf], sys.face_right_cell[pf]
        self._rr_left = lc >= 0
        self._rr_right = rc >= 0
        block(lc[self._rr_left], pc[self._rr_left])
        block(rc[self._rr_right], pc[self._rr_right])
        faces = np.arange(n_f)
        flc, frc = sys.face_left_cell, sys.face_right_cell
        self._rw_left = flc >= 0
        self._rw_right = frc >= 0
        block(flc[self._rw_left], n_c + faces[self._rw_left])
        block(frc[self._rw_right], n_c + faces[self._rw_right])

        # friction-relation rows: enthalpy differences and |w| slope
        block(n_c + faces[self._rw_right], frc[self._rw_right])
        block(n_c + faces[self._rw_left], flc[self._rw_left])
        block(n_c + faces, n_c + faces)
        block(n_c + sys.junction_term_faces, n_c + n_f + sys.junction_term_slots)

        # junction constraint rows
        jf = sys.junction_term_faces
        adj = np.where(sys.face_left_cell[jf] >= 0,
                       sys.face_left_cell[jf], sys.face_right_cell[jf])
        self._j_kappa = (sys.a_cells[adj] * sys.dx_cells[adj]
                         / (2.0 * sys.omega_faces[jf]))
        block(n_c + n_f + sys.junction_term_slots, adj)
        block(n_c + n_f + sys.junction_term_slots, n_c + jf)

        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._shape = (n_c + n_f + n_j, n_c + n_f + n_j)

    def enthalpy_cells(self, rho):
        h = self.system.law.dpotential(rho)
        if self.include_gravity:
            h = h + self.system.gz_cells
        return h

    def _residual(self, dt, rho_n, rho, w, hv, load_w):
        sys = self.system
        if np.any(rho <= 0.0):
            return None
        h = self.enthalpy_cells(rho)
        arho = sys.arho_faces(rho)
        m = arho * w
        f_rho = sys.c_rho * (rho - rho_n) + dt * (sys.d_matrix @ m)
        fr = sys.omega_faces * sys.gamma_faces * np.abs(w) * w
        f_w = sys.g_matrix @ h + sys.s_matrix @ hv + fr - load_w
        f_j = sys.s_matrix.T @ m
        return f_rho, f_w, f_j, (arho, m)

    def _scaled_norm(self, dt, f_rho, f_w, f_j):
        sys = self.system
        parts = [np.abs(f_rho) / (sys.c_rho + dt * sys.dx_cells),
                 np.abs(f_w) / sys.omega_faces]
        if f_j.size:
            parts.append(np.abs(f_j))
        return max(np.max(p) for p in parts)

    def _jacobian_data(self, dt, rho, w, arho):
        sys = self.system
        d2p = sys.law.d2potential(rho)
        parts = [
            sys.c_rho,
            dt * w[sys.pair_face[self._rr_left]] * sys.pair_kappa[self._rr_left],
            -dt * w[sys.pair_face[self._rr_right]] * sys.pair_kappa[self._rr_right],
            dt * arho[self._rw_left],
            -dt * arho[self._rw_right],
            d2p[sys.face_right_cell[self._rw_right]],
            -d2p[sys.face_left_cell[self._rw_left]],
            2.0 * sys.omega_faces * sys.gamma_faces * np.abs(w),
            sys.junction_term_signs,
            sys.junction_term_signs * w[sys.junction_term_faces] * self._j_kappa,
            sys.junction_term_signs * arho[sys.junction_term_faces],
        ]
        return np.concatenate(parts)

    def step(self, state, dt, boundary, tau_new=None):
        sys = self.system
        tau_n = state.tau
        if tau_new is None:
            tau_new = tau_n + dt
        values = _eval_boundary(boundary, sys.boundary_vertices, tau_new)
        load = sys.boundary_load(values)
        load_w = load[sys.n_cells:sys.n_cells + sys.n_faces]
        rho_n = state.rho
        rho = rho_n.copy()
        if self._hv is None or self._hv.size != sys.n_junctions:
            self._hv = parabolic_junction_enthalpies(
                sys, rho_n, values, include_gravity=self.include_gravity)
        hv = self._hv.copy()
        w = velocity_recovery(sys, rho_n, values,
                              junction_h=hv, include_gravity=self.include_gravity)
        out = self._residual(dt, rho_n, rho, w, hv, load_w)
        if out is None:
            raise StepFailure("negative density", tau=tau_n)
        f_rho, f_w, f_j, cache = out
        norm = self._scaled_norm(dt, f_rho, f_w, f_j)
        n_c, n_f = sys.n_cells, sys.n_faces
        it = 0
        while norm > self.newton_tol:
            if it >= self.max_iter:
                raise StepFailure(
                    f"Newton did not converge in {self.max_iter} iterations "
                    f"(residual {norm:.3e})", tau=tau_n, residual=norm,
                    iterations=it)
            arho, m = cache
            data = self._jacobian_data(dt, rho, w, arho)
            jac = sp.coo_matrix((data, (self._rows, self._cols)),
                                shape=self._shape).tocsc()
            try:
                delta = splu(jac).solve(np.concatenate([f_rho, f_w, f_j]))
            except RuntimeError as exc:
                raise StepFailure(f"linear solve failed: {exc}", tau=tau_n,
                                  residual=norm, iterations=it) from exc
            step_scale = 1.0
            for _ in range(14):
                rho_try = rho - step_scale * delta[:n_c]
                w_try = w - step_scale * delta[n_c:n_c + n_f]
                hv_try = hv - step_scale * delta[n_c + n_f:]
                out = self._residual(dt, rho_n, rho_try, w_try, hv_try, load_w)
                if out is not None:
                    norm_try = self._scaled_norm(dt, out[0], out[1], out[2])
                    if norm_try < norm or norm_try <= self.newton_tol:
                        break
                step_scale *= 0.5
            else:
                raise StepFailure("Newton line search stalled", tau=tau_n,
                                  residual=norm, iterations=it)
            rho, w, hv = rho_try, w_try, hv_try
            f_rho, f_w, f_j, cache = out
            norm = norm_try
            it += 1

        self._hv = hv.copy()
        arho, m = cache
        new_state = NetworkState(tau_new, rho, w.copy())
        info = {
            "junction_h": hv.copy(),
            "stage_dissipation": float(np.dot(
                sys.omega_faces * sys.gamma_faces * arho, np.abs(w) ** 3)),
            "stage_flux": float(np.dot(load_w, m)),
            "stage_tau": tau_new,
            "iterations": it,
            "boundary_values": values,
        }
        return new_state, info


# ---------------------------------------------------------------------------
# velocity recovery and parabolic junction values

def velocity_recovery(system, rho, boundary_values=None, junction_h=None,
                      include_gravity=True):
    """Face velocities solving gamma*|w|*w = -s for the limit model.

    s is the centered enthalpy slope at interior faces.  At terminal
    faces the slope uses the vertex enthalpy when boundary or junction
    values are supplied, and otherwise falls back to the one-sided slope
    of the two adjacent cells (exact for linear enthalpy profiles).
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0.0):
        raise ValueError("density must be positive")
    h = system.law.dpotential(rho)
    if include_gravity:
        h = h + system.gz_cells
    s = np.zeros(system.n_faces)
    lc, rc = system.face_left_cell, system.face_right_cell
    interior = (lc >= 0) & (rc >= 0)
    s[interior] = (h[rc[interior]] - h[lc[interior]]) / system.omega_faces[interior]
    values = dict(boundary_values or {})
    jh = {} if junction_h is None else {
        v: junction_h[i] for i, v in enumerate(system.junction_vertices)}
    for f, sign, v in zip(system.terminal_faces, system.terminal_signs,
                          system.terminal_vertices):
        omega = system.omega_faces[f]
        if v in values or v in jh:
            hv = values.get(v, jh.get(v))
            if sign > 0:  # edge ends at v: vertex sits right of the face
                s[f] = (hv - h[lc[f]]) / omega
            else:
                s[f] = (h[rc[f]] - hv) / omega
        else:
            if sign > 0:
                c = lc[f]
                s[f] = (h[c] - h[c - 1]) / system.dx_cells[c]
            else:
                c = rc[f]
                s[f] = (h[c + 1] - h[c]) / system.dx_cells[c]
    return _recovery(s, system.gamma_faces)


def parabolic_junction_enthalpies(system, rho, boundary_values,
                                  include_gravity=True):
    """Junction enthalpies balancing the recovered mass fluxes."""
    rho = np.asarray(rho, dtype=float)
    h = system.law.dpotential(rho)
    if include_gravity:
        h = h + system.gz_cells
    arho = system.arho_faces(rho)
    hv = np.zeros(system.n_junctions)
    for j in range(system.n_junctions):
        sel = system.junction_term_slots == j
        faces = system.junction_term_faces[sel]
        signs = system.junction_term_signs[sel]
        adj = np.where(system.face_left_cell[faces] >= 0,
                       system.face_left_cell[faces],
                       system.face_right_cell[faces])

        def defect(x):
            total = 0.0
            for f, sign, c in zip(faces, signs, adj):
                omega = system.omega_faces[f]
                s = (x - h[c]) / omega if sign > 0 else (h[c] - x) / omega
                total += sign * arho[f] * _recovery(s, system.gamma_faces[f])
            return total

        lo = float(np.min(h[adj])) - 1.0
        hi = float(np.max(h[adj])) + 1.0
        for _ in range(60):
            if defect(lo) >= 0.0 >= defect(hi):
                break
            width = hi - lo
            lo -= max(1.0, width)
            hi += max(1.0, width)
        hv[j] = brentq(defect, lo, hi, xtol=1e-14, rtol=8.9e-16)
    return hv


# ---------------------------------------------------------------------------
# driver

def run(system, state0, config, boundary, forcing=None, bounds=None):
    """Advance from state0 to t_final, recording every step.

    Returns a Trajectory.  On a step failure the exception carries the
    partial trajectory in its ``partial`` attribute.
    """
    n_steps = int(round(config.t_final / config.dt)) if config.t_final > 0 else 0
    if n_steps and abs(n_steps * config.dt - config.t_final) > 1e-9 * config.t_final:
        raise ValueError("t_final must be an integer multiple of dt")
    if config.parabolic:
        stepper = ParabolicStepper(system, newton_tol=config.newton_tol,
                                   max_iter=config.max_iter,
                                   include_gravity=config.parabolic_gravity)
        if np.count_nonzero(state0.w) == 0 and system.n_faces:
            values = _eval_boundary(boundary, system.boundary_vertices, state0.tau)
            hv0 = parabolic_junction_enthalpies(
                system, state0.rho, values,
                include_gravity=config.parabolic_gravity)
            w0 = velocity_recovery(system, state0.rho, values, hv0,
                                   include_gravity=config.parabolic_gravity)
            state0 = NetworkState(state0.tau, state0.rho.copy(), w0)
    else:
        stepper = HyperbolicStepper(system, scheme=config.scheme,
                                    newton_tol=config.newton_tol,
                                    max_iter=config.max_iter, forcing=forcing)

    traj = Trajectory()
    values0 = _eval_boundary(boundary, system.boundary_vertices, state0.tau)
    traj.append(state0.copy(), _snapshot_report(system, state0, values0, np.nan))
    if bounds is not None:
        _flag(system, state0, bounds, traj, 0)

    state = state0.copy()
    for k in range(n_steps):
        tau_new = state0.tau + (k + 1) * config.dt
        try:
            state, info = stepper.step(state, config.dt, boundary, tau_new=tau_new)
        except StepFailure as failure:
            failure.step = k
            failure.partial = traj
            raise
        residual = np.nan
        if not config.parabolic:
            h_prev = traj.reports[-1].energy
            h_new = energy_mod.hamiltonian(system, state)
            residual = (h_new - h_prev
                        + config.dt * info["stage_dissipation"]
                        - config.dt * info["stage_flux"])
        report = _snapshot_report(system, state, info["boundary_values"], residual)
        traj.append(state.copy(), report)
        traj.stage_dissipation.append(info["stage_dissipation"])
        traj.stage_flux.append(info["stage_flux"])
        traj.junction_h.append(info["junction_h"])
        if bounds is not None:
            _flag(system, state, bounds, traj, k + 1)
    return traj


def _snapshot_report(system, state, boundary_values, residual):
    return EnergyReport(
        tau=state.tau,
        energy=energy_mod.hamiltonian(system, state),
        dissipation=energy_mod.dissipation(system, state),
        boundary_flux=energy_mod.boundary_flux(system, state, boundary_values),
        balance_residual=residual,
    )


def _flag(system, state, bounds, traj, step):
    report = system.check_state(state, bounds)
    if not report.ok:
        kinds = sorted({v.kind for v in report.violations})
        traj.warnings.append(
            f"step {step} (tau={state.tau:.6g}): admissibility lost ({', '.join(kinds)})")


def step_hyperbolic(system, state, dt, boundary, scheme="midpoint",
                    newton_tol=1e-11, max_iter=30, forcing=None):
    """Single hyperbolic step; convenience wrapper around the stepper."""
    stepper = HyperbolicStepper(system, scheme=scheme, newton_tol=newton_tol,
                                max_iter=max_iter, forcing=forcing)
    new_state, _ = stepper.step(state, dt, boundary)
    return new_state


def step_parabolic(system, state, dt, boundary, newton_tol=1e-11, max_iter=40,
                   include_gravity=True):
    stepper = ParabolicStepper(system, newton_tol=newton_tol, max_iter=max_iter,
                               include_gravity=include_gravity)
    new_state, _ = stepper.step(state, dt, boundary)
    return new_state

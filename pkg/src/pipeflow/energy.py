"""Energy functionals, relative-energy machinery and stability monitors.

All functionals use the discretization's own quadrature weights (cell
widths and face dual volumes), so the discrete power balance is an
algebraic identity of the scheme rather than a quadrature approximation.
The dissipation is the operator form integral of gamma * a * rho * |w|^3
(cross-section weighted) on pipes and networks alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretization import NetworkState


# ---------------------------------------------------------------------------
# basic functionals

def hamiltonian(system, state):
    """Total energy: integral of a*(eps^2 rho w^2/2 + P(rho) + g z rho)."""
    kin = system.kinetic_cells(state.w)
    density = (0.5 * system.epsilon**2 * state.rho * kin
               + system.law.potential(state.rho) + system.gz_cells * state.rho)
    return float(np.dot(system.c_rho, density))


def dissipation(system, state):
    """Friction dissipation: integral of gamma * a * rho * |w|^3."""
    arho = system.arho_faces(state.rho)
    return float(np.dot(system.omega_faces * system.gamma_faces * arho,
                        np.abs(state.w) ** 3))


def boundary_flux(system, state, boundary_values):
    """Signed energy flux over the boundary vertices, -sum(n h m)."""
    _, m = system.costate(state)
    load = system.boundary_load(boundary_values)
    return float(np.dot(load[system.n_cells:system.n_cells + system.n_faces], m))


def c_norm_sq(system, d_rho, d_w):
    return system.c_norm_sq(d_rho, d_w)


def _check_pair(system, u, uhat):
    if u.rho.shape != (system.n_cells,) or uhat.rho.shape != (system.n_cells,):
        raise ValueError("states do not match the system's grids")
    if u.w.shape != (system.n_faces,) or uhat.w.shape != (system.n_faces,):
        raise ValueError("states do not match the system's grids")


def relative_energy(system, u, uhat):
    """Bregman distance H(u) - H(uhat) - <H'(uhat), u - uhat>.

    Evaluated in a form where the gravity terms cancel identically:
    the pressure part contributes P(rho) - P(rhohat) - P'(rhohat) drho
    per cell and the kinetic part eps^2 [rho (w^2 - what^2)/2]_cells
    minus the face-weighted a*rhohat*what*(w - what).
    """
    _check_pair(system, u, uhat)
    law = system.law
    p_rel = (law.potential(u.rho) - law.potential(uhat.rho)
             - law.dpotential(uhat.rho) * (u.rho - uhat.rho))
    kin = 0.5 * system.epsilon**2 * u.rho * (
        system.kinetic_cells(u.w) - system.kinetic_cells(uhat.w))
    cells = float(np.dot(system.c_rho, p_rel + kin))
    mhat = system.arho_faces(uhat.rho) * uhat.w
    faces = float(np.dot(system.c_w * mhat, u.w - uhat.w))
    return cells - faces


def relative_dissipation(system, u, uhat):
    """(1/16) integral of gamma a rhohat (|w| + |what|) (w - what)^2."""
    _check_pair(system, u, uhat)
    arho_hat = system.arho_faces(uhat.rho)
    weight = system.omega_faces * system.gamma_faces * arho_hat
    return float(np.dot(weight, (np.abs(u.w) + np.abs(uhat.w))
                        * (u.w - uhat.w) ** 2)) / 16.0


def costate_defect_direct(system, u, uhat):
    """z(u) - z(uhat) - G(uhat)(u - uhat) from the assembled maps."""
    _check_pair(system, u, uhat)
    h_u, m_u = system.costate(u)
    h_hat, m_hat = system.costate(uhat)
    d_rho = u.rho - uhat.rho
    d_w = u.w - uhat.w
    lf, rf = system.cell_left_face, system.cell_right_face
    dh = (system.law.d2potential(uhat.rho) * d_rho
          + 0.5 * system.epsilon**2 * (uhat.w[lf] * d_w[lf] + uhat.w[rf] * d_w[rf]))
    dm = (system.k_matrix @ d_rho) * uhat.w + system.arho_faces(uhat.rho) * d_w
    return h_u - h_hat - dh, m_u - m_hat - dm


def costate_defect_closed(system, u, uhat):
    """Closed form of the same defect.

    First component: P'(rho | rhohat) + eps^2 (w - what)^2 / 2 (cell
    averaged); second component: a (rho - rhohat) (w - what) with the
    face reconstruction of a*(rho - rhohat).
    """
    _check_pair(system, u, uhat)
    d_rho = u.rho - uhat.rho
    d_w = u.w - uhat.w
    law = system.law
    p_rel = (law.dpotential(u.rho) - law.dpotential(uhat.rho)
             - law.d2potential(uhat.rho) * d_rho)
    lf, rf = system.cell_left_face, system.cell_right_face
    first = p_rel + 0.25 * system.epsilon**2 * (d_w[lf] ** 2 + d_w[rf] ** 2)
    second = (system.k_matrix @ d_rho) * d_w
    return first, second


def power_balance_residual(trajectory):
    """Per-step residuals H^{n+1} - H^n + dt*(D - flux) at the stage."""
    return np.array([r.balance_residual for r in trajectory.reports[1:]])


# ---------------------------------------------------------------------------
# stability constants

def c0_constants(bounds, law):
    """Norm-equivalence constants of the relative energy.

    Lower: from the pointwise Hessian bound (a/2)(P'' x^2 + rho (eps y)^2)
    combined with the Taylor-remainder weight 1/2, reduced to a multiple
    of the C-norm; upper correspondingly from (3a/2)(...).  Requires the
    subsonic margin of the bounds to be nonnegative.
    """
    if bounds.subsonic_margin(law) < 0.0:
        raise ValueError("subsonic margin violated; the norm equivalence "
                         "needs rho P''(rho) >= 4 eps_max^2 w_max^2")
    d2_min, d2_max = law.d2potential_bounds(bounds.rho_min, bounds.rho_max)
    lower = 0.25 * min(d2_min, bounds.area_min * bounds.rho_min)
    upper = 0.75 * max(d2_max, bounds.area_max * bounds.rho_max)
    return lower, upper


@dataclass(frozen=True)
class StabilityConstants:
    """All constants entering the stability certificate.

    c0_lower/c0_upper  relative-energy norm equivalence
    c1, c2, c3         growth factors from the friction, profile-drift
                       and residual estimates; growth = c1 + c2 + c3
    c_d                lower-bound constant of the relative dissipation
    p1, p2, p3         weights of the residual perturbation functional
    c_boundary         weight of the boundary perturbation functional
    """

    c0_lower: float
    c0_upper: float
    c1: float
    c2: float
    c3: float
    c_d: float
    p1: float
    p2: float
    p3: float
    c_boundary: float

    @property
    def growth(self):
        return self.c1 + self.c2 + self.c3


def stability_constants(bounds, law, lip_drho=0.0, lip_eps_dw=0.0, n_boundary=2):
    """Compute certificate constants from the admissible bounds.

    lip_drho and lip_eps_dw are sup-norm estimates of the reference
    solution's time derivatives (of rho and of eps*w); they scale the
    profile-drift growth factor.
    """
    c0l, c0u = c0_constants(bounds, law)
    d2_min, d2_max = law.d2potential_bounds(bounds.rho_min, bounds.rho_max)
    c_d = bounds.friction_min * bounds.area_min * bounds.rho_min / 16.0
    c1 = 2.0 * bounds.friction_max * bounds.w_max**2 / (bounds.rho_min * c0l)
    c2 = (max(d2_max, bounds.area_max, math.sqrt(bounds.area_max))
          / (2.0 * c0l) * (lip_drho + lip_eps_dw))
    p1 = (bounds.eps_max**2 * bounds.w_max**2 / 4.0
          + d2_max**2 / (2.0 * bounds.area_min))
    p2 = bounds.area_max * bounds.w_max**2 / (4.0 * c0l)
    p3 = ((bounds.area_max * bounds.rho_max) ** 1.5
          * (2.0 / 3.0) / math.sqrt(3.0 * c_d))
    c_boundary = (2.0 * bounds.area_max * bounds.rho_max * bounds.w_max
                  * max(1.0, bounds.w_max**2 * math.sqrt(max(n_boundary, 1)) / 2.0))
    return StabilityConstants(c0_lower=c0l, c0_upper=c0u, c1=c1, c2=c2, c3=1.0,
                              c_d=c_d, p1=p1, p2=p2, p3=p3,
                              c_boundary=c_boundary)


def lipschitz_estimates(system, trajectory):
    """Discrete sup norms of d rho/d tau and eps * d w/d tau."""
    times = np.asarray(trajectory.times)
    if times.size < 2:
        raise ValueError("need at least two snapshots")
    rho = trajectory.rho_array()
    w = trajectory.w_array()
    dt = np.diff(times)[:, None]
    drho = np.max(np.abs(np.diff(rho, axis=0) / dt))
    dw = np.max(np.abs(np.diff(w, axis=0) / dt))
    return float(drho), float(system.epsilon * dw)


# ---------------------------------------------------------------------------
# perturbation residual of a reference trajectory

def residual_fields(system, trajectory, eps, eps_hat, gamma_hat=None):
    """Model-perturbation residual along a reference trajectory.

    The reference solves the equations with (eps_hat, gamma_hat); viewed
    in the system with (eps, gamma) it leaves the momentum residual

        e2 = (eps^2 - eps_hat^2) (dw/dtau + d(w^2/2)/dx) +
             (gamma - gamma_hat) |w| w

    and no mass residual.  Time derivatives are centered difference
    quotients of the snapshots (one-sided at the ends); the kinetic
    slope uses the same face stencil as the discrete enthalpy.
    Returns (e1, e2) with shapes (K, n_cells) and (K, n_faces).
    """
    times = np.asarray(trajectory.times)
    if times.size < 2:
        raise ValueError("need at least two snapshots to difference in time")
    w = trajectory.w_array()
    k_snap = times.size

    dtw = np.empty_like(w)
    dtw[1:-1] = (w[2:] - w[:-2]) / (times[2:] - times[:-2])[:, None]
    dtw[0] = (w[1] - w[0]) / (times[1] - times[0])
    dtw[-1] = (w[-1] - w[-2]) / (times[-1] - times[-2])

    gamma = system.gamma_faces
    if gamma_hat is None:
        gamma_hat = gamma
    gamma_hat = np.broadcast_to(np.asarray(gamma_hat, dtype=float),
                                gamma.shape)

    lc, rc = system.face_left_cell, system.face_right_cell
    interior = (lc >= 0) & (rc >= 0)
    start = (lc < 0)
    end = (rc < 0)
    lf, rf = system.cell_left_face, system.cell_right_face

    e1 = np.zeros((k_snap, system.n_cells))
    e2 = np.empty((k_snap, system.n_faces))
    d_eps2 = eps**2 - eps_hat**2
    for k in range(k_snap):
        wk = w[k]
        kin_c = 0.25 * (wk[lf] ** 2 + wk[rf] ** 2)  # (w^2)_c / 2
        dkin = np.empty(system.n_faces)
        dkin[interior] = ((kin_c[rc[interior]] - kin_c[lc[interior]])
                          / system.omega_faces[interior])
        dkin[start] = ((kin_c[rc[start]] - 0.5 * wk[start] ** 2)
                       / system.omega_faces[start])
        dkin[end] = ((0.5 * wk[end] ** 2 - kin_c[lc[end]])
                     / system.omega_faces[end])
        e2[k] = d_eps2 * (dtw[k] + dkin) + (gamma - gamma_hat) * np.abs(wk) * wk
    return e1, e2


def perturbation_functional(system, e1, e2, constants):
    """p1 ||e1||_L2^2 + p2 ||e2||_L2^2 + p3 ||e2||_{L^{3/2}}^{3/2}."""
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    l2_1 = float(np.dot(system.dx_cells, e1**2))
    l2_2 = float(np.dot(system.omega_faces, e2**2))
    l32 = float(np.dot(system.omega_faces, np.abs(e2) ** 1.5))
    return constants.p1 * l2_1 + constants.p2 * l2_2 + constants.p3 * l32


def boundary_perturbation(system, schedule, schedule_hat, taus, eps, eps_hat,
                          constants):
    """Boundary perturbation functional per snapshot time.

    c_boundary * (rss over boundary vertices of |h - hhat| + |eps^2 -
    eps_hat^2|); the root-sum-square couples multiple boundary vertices.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    out = np.empty(taus.size)
    d_eps2 = abs(eps**2 - eps_hat**2)
    for i, t in enumerate(taus):
        sq = 0.0
        for v in system.boundary_vertices:
            a = schedule[v](t) if callable(schedule[v]) else schedule[v]
            b = schedule_hat[v](t) if callable(schedule_hat[v]) else schedule_hat[v]
            sq += (float(a) - float(b)) ** 2
        out[i] = constants.c_boundary * (math.sqrt(sq) + d_eps2)
    return out if out.size > 1 else float(out[0])


# ---------------------------------------------------------------------------
# Gronwall certificate

@dataclass
class GronwallCertificate:
    """Certificate data: bound sides plus every ingredient per snapshot."""

    ok: bool
    min_slack: float
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    rel_energy: np.ndarray = None
    rel_dissipation: np.ndarray = None
    cnorm_sq: np.ndarray = None
    p_residual: np.ndarray = None
    p_boundary: np.ndarray = None
    constants: StabilityConstants = None
    warnings: list = field(default_factory=list)

    @property
    def slack(self):
        return self.rhs - self.lhs

    def write_trace(self, path):
        """Tabular relative-energy trace with the bound sides and slack."""
        with open(path, "w") as fh:
            fh.write("tau,rel_energy,rel_dissipation,cnorm_sq,p_residual,"
                     "p_boundary,bound_lhs,bound_rhs,slack\n")
            for k, tau in enumerate(self.times):
                fh.write(f"{tau:.12g},{self.rel_energy[k]:.12g},"
                         f"{self.rel_dissipation[k]:.12g},"
                         f"{self.cnorm_sq[k]:.12g},{self.p_residual[k]:.12g},"
                         f"{self.p_boundary[k]:.12g},{self.lhs[k]:.12g},"
                         f"{self.rhs[k]:.12g},{self.rhs[k] - self.lhs[k]:.12g}\n")


def _exp_trapz_accumulate(times, values, rate):
    """I_k = integral_0^{tau_k} exp(rate (tau_k - s)) values(s) ds (trapezoid)."""
    out = np.zeros_like(values, dtype=float)
    for k in range(1, len(times)):
        dt = times[k] - times[k - 1]
        grow = math.exp(rate * dt)
        out[k] = grow * out[k - 1] + 0.5 * dt * (grow * values[k - 1] + values[k])
    return out


def gronwall_monitor(system, traj_u, traj_hat, constants, schedule,
                     schedule_hat=None, eps_hat=None, gamma_hat=None,
                     bounds=None, initial_cnorm_sq=None):
    """Check the exponential stability bound along a trajectory pair.

    At every snapshot the monitor compares

        c0_lower ||u - uhat||_C^2 + int exp-weighted relative dissipation

    against

        c0_upper e^{c tau} ||u - uhat||_C^2(0) + int exp-weighted
        (residual perturbation + boundary perturbation),

    with c = constants.growth and trapezoidal time quadrature.  All
    functionals are those of the unperturbed system.  Snapshots that
    leave the admissible set are excluded with a warning.
    """
    times = np.asarray(traj_u.times)
    times_hat = np.asarray(traj_hat.times)
    if times.shape != times_hat.shape or not np.allclose(times, times_hat,
                                                         atol=1e-12, rtol=1e-9):
        raise ValueError("trajectories must share the snapshot time grid")
    if schedule_hat is None:
        schedule_hat = schedule
    if eps_hat is None:
        eps_hat = system.epsilon

    k_snap = times.size
    cnorm = np.empty(k_snap)
    rel_diss = np.empty(k_snap)
    rel_en = np.empty(k_snap)
    admissible = np.ones(k_snap, dtype=bool)
    warnings = []
    for k in range(k_snap):
        u, uh = traj_u.states[k], traj_hat.states[k]
        cnorm[k] = system.c_norm_sq(u.rho - uh.rho, u.w - uh.w)
        rel_diss[k] = relative_dissipation(system, u, uh)
        rel_en[k] = relative_energy(system, u, uh)
        if bounds is not None:
            ok_u = system.check_state(u, bounds).ok
            ok_h = system.check_state(uh, bounds).ok
            if not (ok_u and ok_h):
                admissible[k] = False
                warnings.append(f"snapshot {k} (tau={times[k]:.6g}) excluded: "
                                "outside the admissible set")

    e1, e2 = residual_fields(system, traj_hat, system.epsilon, eps_hat,
                             gamma_hat=gamma_hat)
    p_res = np.array([perturbation_functional(system, e1[k], e2[k], constants)
                      for k in range(k_snap)])
    p_bnd = np.atleast_1d(boundary_perturbation(
        system, schedule, schedule_hat, times, system.epsilon, eps_hat,
        constants))

    rate = constants.growth
    i_diss = _exp_trapz_accumulate(times, rel_diss, rate)
    i_pert = _exp_trapz_accumulate(times, p_res + p_bnd, rate)
    init = cnorm[0] if initial_cnorm_sq is None else float(initial_cnorm_sq)
    lhs = constants.c0_lower * cnorm + i_diss
    rhs = constants.c0_upper * init * np.exp(rate * times) + i_pert

    sel = admissible
    slack = rhs[sel] - lhs[sel]
    tol = 1e-10 * np.maximum(1.0, np.abs(rhs[sel]))
    ok = bool(np.all(slack >= -tol))
    return GronwallCertificate(ok=ok, min_slack=float(np.min(slack)),
                               times=times, lhs=lhs, rhs=rhs,
                               rel_energy=rel_en, rel_dissipation=rel_diss,
                               cnorm_sq=cnorm, p_residual=p_res,
                               p_boundary=np.broadcast_to(p_bnd, (k_snap,)).copy(),
                               constants=constants, warnings=warnings)


# ---------------------------------------------------------------------------
# sampling helpers

def random_admissible_state(system, bounds, rng, margin=0.02, tau=0.0):
    """Uniform random state strictly inside the admissible box."""
    span_r = bounds.rho_max - bounds.rho_min
    lo = bounds.rho_min + margin * span_r
    hi = bounds.rho_max - margin * span_r
    rho = rng.uniform(lo, max(lo, hi), size=system.n_cells)
    wmax = (1.0 - margin) * bounds.w_max
    w = rng.uniform(-wmax, wmax, size=system.n_faces)
    return NetworkState(tau, rho, w)

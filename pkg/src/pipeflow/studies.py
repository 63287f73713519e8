"""Perturbation and limit studies: sweeps, error norms, rate fits.

Error norms follow the stability estimates: squared discrete L2 norm of
the density difference (plus the eps^2-weighted velocity part where both
runs share eps), taken sup over snapshot times, plus the time integral
of the cubed discrete L3 norm of the velocity difference.  Reference
solutions are computed on the same grid with 4x finer time steps and 10x
tighter Newton tolerance, so sweep errors isolate the perturbation.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .energy import (
    gronwall_monitor,
    lipschitz_estimates,
    stability_constants,
)
from .solver import SolverConfig, Trajectory, run


def fit_loglog_slope(x, y, guard=0.10):
    """Least-squares slope of log y against log x.

    If the relative fit residual (in log space, against the data range)
    exceeds the guard, the largest-x point is discarded once and the
    slope refitted.  Returns (slope, mask of points used).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise ValueError("need at least three sweep points for a slope")
    if np.unique(x).size != x.size:
        raise ValueError("sweep values must be distinct; no slope otherwise")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("slope fit needs positive values")
    lx, ly = np.log(x), np.log(y)

    def fit(mask):
        coef = np.polyfit(lx[mask], ly[mask], 1)
        resid = np.abs(np.polyval(coef, lx[mask]) - ly[mask])
        spread = max(np.ptp(ly[mask]), 1.0)
        return coef[0], np.max(resid) / spread

    mask = np.ones(x.size, dtype=bool)
    slope, rel = fit(mask)
    if rel > guard:
        mask[np.argmax(x)] = False
        slope, _ = fit(mask)
    return float(slope), mask


def monotone_violations(values, rel_tol=1e-9):
    """Number of increases in a supposedly decreasing error sequence."""
    values = np.asarray(values, dtype=float)
    scale = np.maximum(np.abs(values[:-1]), 1e-300)
    return int(np.sum(values[1:] > values[:-1] * (1.0 + rel_tol)))


@dataclass
class StudyResult:
    name: str
    parameter_name: str
    parameters: list
    x_values: list
    errors: list
    density_sup_sq: list
    velocity_l3: list
    slope: float
    used: list
    certificates: list = field(default_factory=list)

    @property
    def all_certified(self):
        return all(c.ok for c in self.certificates) if self.certificates else None

    def format(self):
        lines = [f"{self.name}: slope {self.slope:.3f} "
                 f"(vs {self.parameter_name})"]
        for p, x, e, u in zip(self.parameters, self.x_values, self.errors,
                              self.used):
            tag = "" if u else "  [excluded from fit]"
            lines.append(f"  {self.parameter_name}={p:<10.5g} x={x:<12.5g} "
                         f"error={e:.6e}{tag}")
        if self.certificates:
            ok = sum(c.ok for c in self.certificates)
            lines.append(f"  stability certificates: {ok}/"
                         f"{len(self.certificates)} hold")
        return "\n".join(lines)

    def write_table(self, path):
        with open(path, "w") as fh:
            fh.write(f"{self.parameter_name},x,error,density_sup_sq,"
                     "velocity_l3,used,certified\n")
            for i in range(len(self.parameters)):
                cert = (self.certificates[i].ok
                        if i < len(self.certificates) else "")
                fh.write(f"{self.parameters[i]:.12g},{self.x_values[i]:.12g},"
                         f"{self.errors[i]:.12g},{self.density_sup_sq[i]:.12g},"
                         f"{self.velocity_l3[i]:.12g},{int(self.used[i])},"
                         f"{cert}\n")


def _subsample(trajectory, stride):
    out = Trajectory()
    out.times = trajectory.times[::stride]
    out.states = trajectory.states[::stride]
    out.reports = trajectory.reports[::stride]
    out.warnings = list(trajectory.warnings)
    return out


def _pair_errors(system, traj_u, traj_hat, include_kinetic=True):
    """(sup_tau of C-type squared error, integral of the cubed L3 norm)."""
    times = np.asarray(traj_u.times)
    if len(traj_u.states) != len(traj_hat.states):
        raise ValueError("trajectories have different snapshot counts")
    sup_sq = 0.0
    l3 = np.empty(times.size)
    for k, (u, uh) in enumerate(zip(traj_u.states, traj_hat.states)):
        d_rho = u.rho - uh.rho
        d_w = u.w - uh.w
        sq = system.l2sq_cells(d_rho)
        if include_kinetic:
            sq += system.epsilon**2 * system.l2sq_faces(d_w)
        sup_sq = max(sup_sq, sq)
        l3[k] = system.l3_faces(d_w)
    return sup_sq, float(np.trapezoid(l3, times))


def _reference_config(config, parabolic=False):
    return SolverConfig(dt=config.dt / 4.0, t_final=config.t_final,
                        scheme=config.scheme,
                        newton_tol=config.newton_tol / 10.0,
                        max_iter=config.max_iter + 20,
                        parabolic=parabolic,
                        parabolic_gravity=config.parabolic_gravity)


def _require_bounds(scenario):
    if scenario.bounds is None:
        raise ValueError("studies need a [bounds] section in the scenario "
                         "for the stability constants")
    return scenario.bounds


def _run_sweep(tasks, threads):
    if threads <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def epsilon_limit_study(scenario, eps_list, certify=True, threads=1):
    """High-friction limit: hyperbolic runs against the limit model.

    The boundary schedules are shared, so they must be given as limit
    enthalpies; initial velocities are recovered from the initial
    density, which realizes the compatible-data assumptions.  The fitted
    slope is log(error) vs log(eps^2).
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 3:
        raise ValueError("need at least three epsilon values")
    if any(e <= 0.0 for e in eps_list):
        raise ValueError("epsilon values must be positive; the limit model "
                         "is the reference, not a sweep point")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon list must be strictly decreasing")
    bounds = _require_bounds(scenario) if certify else scenario.bounds

    ref_system = scenario.build_system()
    ref_state = scenario.initial_state(ref_system)
    ref_traj = run(ref_system, ref_state,
                   _reference_config(scenario.solver, parabolic=True),
                   scenario.boundary)
    ref = _subsample(ref_traj, 4)

    def make_task(eps):
        def task():
            scen = scenario.with_epsilon(eps)
            system = scen.build_system()
            state0 = scen.initial_state(system)
            traj = run(system, state0, scen.solver, scen.boundary)
            # the limit reference has no eps^2 kinetic norm contribution
            sup_sq, l3 = _pair_errors(system, traj, ref, include_kinetic=False)
            cert = None
            if certify:
                lip = lipschitz_estimates(system, ref)
                constants = stability_constants(
                    bounds, scenario.law, lip_drho=lip[0], lip_eps_dw=lip[1],
                    n_boundary=max(len(system.boundary_vertices), 1))
                cert = gronwall_monitor(system, traj, ref, constants,
                                        scenario.boundary, eps_hat=0.0)
            return sup_sq + l3, sup_sq, l3, cert
        return task

    results = _run_sweep([make_task(e) for e in eps_list], threads)
    errors = [r[0] for r in results]
    x = [e**2 for e in eps_list]
    slope, mask = fit_loglog_slope(x, errors)
    return StudyResult(
        name="high-friction limit study", parameter_name="epsilon",
        parameters=eps_list, x_values=x, errors=errors,
        density_sup_sq=[r[1] for r in results],
        velocity_l3=[r[2] for r in results],
        slope=slope, used=list(mask),
        certificates=[r[3] for r in results if r[3] is not None],
    )


def gamma_perturbation_study(scenario, offsets, certify=True, threads=1):
    """Friction-coefficient perturbations against a fine unperturbed run."""
    offsets = [float(o) for o in offsets]
    if len(offsets) < 3:
        raise ValueError("need at least three offsets")
    if any(o == 0.0 for o in offsets):
        raise ValueError("offsets must be nonzero")
    if len({math.copysign(1, o) for o in offsets}) != 1:
        raise ValueError("offsets must share one sign")
    bounds = scenario.bounds if not certify else _require_bounds(scenario)
    if bounds is not None:
        base = scenario.topology.edges[0].params.friction
        if isinstance(base, tuple):
            base = max(y for _, y in base)
        for o in offsets:
            if not (bounds.friction_min <= base + o <= bounds.friction_max):
                raise ValueError(f"perturbed friction {base + o} leaves the "
                                 f"bounds [{bounds.friction_min}, "
                                 f"{bounds.friction_max}]")

    system = scenario.build_system()
    state0 = scenario.initial_state(system)
    ref_traj = run(system, state0, _reference_config(scenario.solver),
                   scenario.boundary)
    u_ref = _subsample(ref_traj, 4)

    def make_task(offset):
        def task():
            scen = scenario.with_friction_offset(offset)
            pert_system = scen.build_system()
            traj_hat = run(pert_system, scenario.initial_state(pert_system),
                           scen.solver, scen.boundary)
            sup_sq, l3 = _pair_errors(system, u_ref, traj_hat)
            cert = None
            if certify:
                lip = lipschitz_estimates(system, traj_hat)
                constants = stability_constants(
                    bounds, scenario.law, lip_drho=lip[0], lip_eps_dw=lip[1],
                    n_boundary=max(len(system.boundary_vertices), 1))
                cert = gronwall_monitor(
                    system, u_ref, traj_hat, constants, scenario.boundary,
                    eps_hat=system.epsilon,
                    gamma_hat=system.gamma_faces + offset)
            return sup_sq + l3, sup_sq, l3, cert
        return task

    results = _run_sweep([make_task(o) for o in offsets], threads)
    errors = [r[0] for r in results]
    x = [abs(o) for o in offsets]
    slope, mask = fit_loglog_slope(x, errors)
    return StudyResult(
        name="friction perturbation study", parameter_name="gamma_offset",
        parameters=offsets, x_values=x, errors=errors,
        density_sup_sq=[r[1] for r in results],
        velocity_l3=[r[2] for r in results],
        slope=slope, used=list(mask),
        certificates=[r[3] for r in results if r[3] is not None],
    )


def boundary_perturbation_study(scenario, amplitudes, vertex=None,
                                certify=True, threads=1):
    """Boundary-schedule perturbations; the abscissa is the time integral
    of the boundary discrepancy (root-sum-square over vertices)."""
    amplitudes = [float(a) for a in amplitudes]
    if len(amplitudes) < 3:
        raise ValueError("need at least three amplitudes")
    if any(a <= 0.0 for a in amplitudes):
        raise ValueError("amplitudes must be positive")
    bounds = scenario.bounds if not certify else _require_bounds(scenario)

    system = scenario.build_system()
    if not system.boundary_vertices:
        raise ValueError("the scenario's network has no boundary vertices")
    if vertex is None:
        vertex = system.boundary_vertices[0]
    t_final = scenario.solver.t_final

    def bump(tau):
        return math.sin(math.pi * min(max(tau / t_final, 0.0), 1.0)) ** 2

    state0 = scenario.initial_state(system)
    ref_traj = run(system, state0, _reference_config(scenario.solver),
                   scenario.boundary)
    u_ref = _subsample(ref_traj, 4)
    times = np.asarray(u_ref.times)
    bump_integral = np.trapezoid([bump(t) for t in times], times)

    def make_task(amplitude):
        base = scenario.boundary[vertex]
        pert = {**scenario.boundary,
                vertex: (lambda tau, b=base, a=amplitude:
                         (b(tau) if callable(b) else b) + a * bump(tau))}

        def task():
            scen = scenario.with_boundary(pert)
            traj_hat = run(system, scenario.initial_state(system),
                           scen.solver, pert)
            sup_sq, l3 = _pair_errors(system, u_ref, traj_hat)
            cert = None
            if certify:
                lip = lipschitz_estimates(system, traj_hat)
                constants = stability_constants(
                    bounds, scenario.law, lip_drho=lip[0], lip_eps_dw=lip[1],
                    n_boundary=max(len(system.boundary_vertices), 1))
                cert = gronwall_monitor(system, u_ref, traj_hat, constants,
                                        scenario.boundary, schedule_hat=pert,
                                        eps_hat=system.epsilon)
            return sup_sq + l3, sup_sq, l3, cert
        return task

    results = _run_sweep([make_task(a) for a in amplitudes], threads)
    errors = [r[0] for r in results]
    x = [a * bump_integral for a in amplitudes]
    slope, mask = fit_loglog_slope(x, errors)
    return StudyResult(
        name="boundary perturbation study", parameter_name="amplitude",
        parameters=amplitudes, x_values=x, errors=errors,
        density_sup_sq=[r[1] for r in results],
        velocity_l3=[r[2] for r in results],
        slope=slope, used=list(mask),
        certificates=[r[3] for r in results if r[3] is not None],
    )

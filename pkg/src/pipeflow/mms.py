"""Manufactured solutions for convergence verification.

The default profile family is built so that the enthalpy has vanishing
curvature at the pipe ends (velocity and its slope vanish there, the
density profile is a sine, and the quadratic pressure law has constant
P''), which keeps the one-sided boundary stencils second order.  The
velocity is nonnegative, so the friction term is polynomial in the
symbolic fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import sympy as sy

from .discretization import NetworkState, build_system
from .gas import PowerLaw
from .network import single_pipe
from .solver import SolverConfig, run


@dataclass
class ManufacturedCase:
    law: object
    epsilon: float
    gamma: float
    length: float
    rho: callable          # rho(x, tau)
    w: callable            # w(x, tau)
    enthalpy: callable     # h(x, tau)
    forcing: tuple         # (f1(x, tau), f2(x, tau))

    def topology(self):
        return single_pipe(length=self.length, epsilon=self.epsilon,
                           friction=self.gamma)

    def boundary(self):
        h = self.enthalpy
        length = self.length
        return {"inlet": lambda tau: float(h(0.0, tau)),
                "outlet": lambda tau: float(h(length, tau))}

    def initial_state(self, system):
        return NetworkState(0.0, self.rho(system.x_cells, 0.0),
                            self.w(system.x_faces, 0.0))


def default_case(epsilon=0.3, gamma=1.0, kappa=1.0, length=1.0,
                 rho_amplitude=0.1, w_amplitude=0.4, rate=np.pi):
    """Smooth space-time profiles with boundary-compatible curvature."""
    x, t = sy.symbols("x tau")
    ell = sy.Float(length)
    rho_s = 1 + sy.Float(rho_amplitude) * sy.sin(2 * sy.pi * x / ell) \
        * (1 + sy.Rational(1, 2) * sy.sin(sy.Float(rate) * t))
    w_s = sy.Float(w_amplitude) * 16 * x**2 * (ell - x) ** 2 / ell**4 \
        * (1 + sy.Rational(1, 2) * sy.cos(sy.Float(rate) * t))
    dpot = sy.Float(kappa) * (2 * rho_s - 1)
    h_s = sy.Float(epsilon) ** 2 * w_s**2 / 2 + dpot
    f1_s = sy.diff(rho_s, t) + sy.diff(rho_s * w_s, x)
    f2_s = (sy.Float(epsilon) ** 2 * sy.diff(w_s, t) + sy.diff(h_s, x)
            + sy.Float(gamma) * w_s**2)  # w >= 0 by construction

    def lam(expr):
        fn = sy.lambdify((x, t), expr, "numpy")
        return lambda xs, tau: np.broadcast_to(
            np.asarray(fn(xs, tau), dtype=float), np.shape(xs)).copy()

    return ManufacturedCase(
        law=PowerLaw(kappa=kappa, exponent=2.0),
        epsilon=epsilon, gamma=gamma, length=length,
        rho=lam(rho_s), w=lam(w_s), enthalpy=sy.lambdify((x, t), h_s),
        forcing=(lam(f1_s), lam(f2_s)),
    )


def _solve(case, cells, dt, t_final, newton_tol=1e-12):
    system = build_system(case.topology(), cells_per_edge=cells, law=case.law)
    state0 = case.initial_state(system)
    config = SolverConfig(dt=dt, t_final=t_final, newton_tol=newton_tol)
    traj = run(system, state0, config, case.boundary(), forcing=case.forcing)
    return system, traj.states[-1]


def _state_error(system, state, other_rho, other_w):
    return np.sqrt(system.l2sq_cells(state.rho - other_rho)
                   + system.l2sq_faces(state.w - other_w))


def spatial_convergence(case, cells_list=(12, 24, 48), dt=2e-4, t_final=0.2):
    """Errors against the exact restriction at t_final per resolution."""
    errors = []
    for n in cells_list:
        system, final = _solve(case, n, dt, t_final)
        errors.append(_state_error(system, final,
                                   case.rho(system.x_cells, t_final),
                                   case.w(system.x_faces, t_final)))
    orders = np.log(np.array(errors[:-1]) / np.array(errors[1:])) / \
        np.log(np.array(cells_list[1:]) / np.array(cells_list[:-1], dtype=float))
    return np.asarray(errors), orders


def temporal_convergence(case, cells=24, dt_list=(2e-3, 1e-3, 5e-4),
                         t_final=0.2, ref_divider=4):
    """Self-convergence against a run with the smallest step divided."""
    dt_ref = min(dt_list) / ref_divider
    system, ref = _solve(case, cells, dt_ref, t_final)
    errors = []
    for dt in dt_list:
        _, final = _solve(case, cells, dt, t_final)
        errors.append(_state_error(system, final, ref.rho, ref.w))
    orders = np.log(np.array(errors[:-1]) / np.array(errors[1:])) / \
        np.log(np.array(dt_list[:-1]) / np.array(dt_list[1:]))
    return np.asarray(errors), orders


@dataclass
class ConvergenceTable:
    spatial_cells: tuple
    spatial_errors: np.ndarray
    spatial_orders: np.ndarray
    temporal_steps: tuple
    temporal_errors: np.ndarray
    temporal_orders: np.ndarray

    def format(self):
        lines = ["resolution study (exact restriction):"]
        for n, e in zip(self.spatial_cells, self.spatial_errors):
            lines.append(f"  cells={n:5d}  error={e:.6e}")
        lines.append("  observed orders: "
                     + ", ".join(f"{o:.3f}" for o in self.spatial_orders))
        lines.append("time-step study (self-convergence):")
        for dt, e in zip(self.temporal_steps, self.temporal_errors):
            lines.append(f"  dt={dt:9.3e}  error={e:.6e}")
        lines.append("  observed orders: "
                     + ", ".join(f"{o:.3f}" for o in self.temporal_orders))
        return "\n".join(lines)


def manufactured_solution_test(case=None, cells_list=(12, 24, 48),
                               dt_list=(2e-3, 1e-3, 5e-4), cells_fixed=24,
                               dt_spatial=2e-4, t_final=0.2):
    if case is None:
        case = default_case()
    se, so = spatial_convergence(case, cells_list, dt=dt_spatial,
                                 t_final=t_final)
    te, to = temporal_convergence(case, cells=cells_fixed, dt_list=dt_list,
                                  t_final=t_final)
    return ConvergenceTable(tuple(cells_list), se, so, tuple(dt_list), te, to)

"""Command-line interface: simulate, study, verify, mms."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import energy as energy_mod
from . import studies as studies_mod
from .discretization import NetworkState
from .mms import manufactured_solution_test
from .network import TopologyError
from .scenario import (
    ConfigError,
    load_scenario,
    write_energy_trace,
    write_manifest,
    write_trajectory,
)
from .solver import SolverConfig, StepFailure, run


def _float_list(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None


def _int_list(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse list {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pipeflow",
        description="Structure-preserving gas network simulation and "
                    "stability verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--cells", type=int, default=None,
                       help="override cells per edge")
        p.add_argument("--dt", type=float, default=None,
                       help="override time step")
        p.add_argument("--scheme", choices=("midpoint", "backward-euler"),
                       default=None, help="override time scheme")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for sweeps")

    p_sim = sub.add_parser("simulate", help="run one scenario")
    common(p_sim)

    p_study = sub.add_parser("study", help="parameter sweep studies")
    p_study.add_argument("kind", choices=("epsilon", "gamma", "boundary"))
    common(p_study)
    p_study.add_argument("--eps-list", type=_float_list,
                         default=[0.2, 0.1, 0.05, 0.025])
    p_study.add_argument("--gamma-offsets", type=_float_list,
                         default=[0.4, 0.2, 0.1, 0.05])
    p_study.add_argument("--amplitudes", type=_float_list,
                         default=[0.2, 0.1, 0.05])
    p_study.add_argument("--no-certify", action="store_true",
                         help="skip the stability certificates")

    p_ver = sub.add_parser("verify", help="run the invariant suite")
    common(p_ver)
    p_ver.add_argument("--seed", type=int, default=0,
                       help="seed for randomized sampling")
    p_ver.add_argument("--samples", type=int, default=200,
                       help="random samples per check")

    p_mms = sub.add_parser("mms", help="manufactured-solution convergence")
    common(p_mms, scenario=False)
    p_mms.add_argument("--cells-list", type=_int_list, default=[12, 24, 48])
    p_mms.add_argument("--dt-list", type=_float_list,
                       default=[2e-3, 1e-3, 5e-4])
    return parser


def _load(args):
    scenario = load_scenario(args.scenario)
    if args.cells is not None:
        scenario = replace(scenario, cells_per_edge=args.cells)
    solver = scenario.solver
    if args.dt is not None:
        solver = replace(solver, dt=args.dt)
    if args.scheme is not None:
        solver = replace(solver, scheme=args.scheme)
    scenario = replace(scenario, solver=solver)
    if args.out is not None:
        scenario = replace(scenario, output_dir=args.out)
    return scenario


def cmd_simulate(args):
    scenario = _load(args)
    system = scenario.build_system()
    state0 = scenario.initial_state(system)
    try:
        trajectory = run(system, state0, scenario.solver, scenario.boundary,
                         bounds=scenario.bounds)
    except StepFailure as failure:
        print(f"step failure at tau={failure.tau:.6g}: {failure}",
              file=sys.stderr)
        return 1
    for w in trajectory.warnings:
        print(f"warning: {w}", file=sys.stderr)
    last = trajectory.reports[-1]
    print(f"simulated {len(trajectory.states) - 1} steps to "
          f"tau={trajectory.times[-1]:.6g}")
    print(f"final energy {last.energy:.9g}, dissipation {last.dissipation:.6g}")
    if scenario.output_dir:
        os.makedirs(scenario.output_dir, exist_ok=True)
        write_trajectory(scenario.output_dir, system, trajectory,
                         fmt=scenario.output_format)
        write_energy_trace(os.path.join(scenario.output_dir, "energy.csv"),
                           trajectory)
        write_manifest(os.path.join(scenario.output_dir, "manifest.txt"),
                       scenario, extra={"command": "simulate"})
        print(f"wrote {scenario.output_dir}/")
    return 0


def cmd_study(args):
    scenario = _load(args)
    certify = not args.no_certify
    if args.kind == "epsilon":
        result = studies_mod.epsilon_limit_study(
            scenario, args.eps_list, certify=certify, threads=args.threads)
    elif args.kind == "gamma":
        result = studies_mod.gamma_perturbation_study(
            scenario, args.gamma_offsets, certify=certify,
            threads=args.threads)
    else:
        result = studies_mod.boundary_perturbation_study(
            scenario, args.amplitudes, certify=certify, threads=args.threads)
    print(result.format())
    if scenario.output_dir:
        os.makedirs(scenario.output_dir, exist_ok=True)
        result.write_table(os.path.join(scenario.output_dir,
                                        f"study_{args.kind}.csv"))
        for i, cert in enumerate(result.certificates):
            cert.write_trace(os.path.join(
                scenario.output_dir,
                f"stability_{args.kind}_{result.parameters[i]:g}.csv"))
        write_manifest(
            os.path.join(scenario.output_dir, "manifest.txt"), scenario,
            extra={"command": f"study {args.kind}",
                   "study.parameters": ",".join(map(str, result.parameters)),
                   "study.slope": result.slope,
                   "threads": args.threads})
        print(f"wrote {scenario.output_dir}/")
    if result.certificates and not result.all_certified:
        print("stability certificate failed", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args):
    scenario = _load(args)
    rng = np.random.default_rng(args.seed)
    system = scenario.build_system()
    failures = []

    def report(name, ok, detail):
        print(f"{'ok  ' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)

    # interconnection structure
    worst = 0.0
    for _ in range(args.samples):
        z = rng.standard_normal(system.n_z)
        worst = max(worst, abs(z @ (system.j_matrix @ z)) / (z @ z))
    report("skew-symmetry", worst < 1e-12, f"max |<Jz,z>|/||z||^2 = {worst:.2e}")
    report("weight-positivity", bool(np.all(system.c_state > 0)),
           "C diagonal strictly positive")

    bounds = scenario.bounds
    if bounds is None:
        report("admissible-bounds", False,
               "scenario has no [bounds] section; sandwich checks skipped")
    else:
        state = energy_mod.random_admissible_state(system, bounds, rng)
        ok_r = bool(np.all(system.r_diag(state) >= 0))
        report("friction-nonnegativity", ok_r, "R(u) diagonal >= 0")
        try:
            lo, hi = energy_mod.c0_constants(bounds, scenario.law)
        except ValueError as exc:
            report("norm-equivalence", False, str(exc))
        else:
            bad = 0
            for _ in range(args.samples):
                u = energy_mod.random_admissible_state(system, bounds, rng)
                uh = energy_mod.random_admissible_state(system, bounds, rng)
                nrm = system.c_norm_sq(u.rho - uh.rho, u.w - uh.w)
                rel = energy_mod.relative_energy(system, u, uh)
                if not (lo * nrm <= rel + 1e-12 and rel <= hi * nrm + 1e-12):
                    bad += 1
            report("norm-equivalence", bad == 0,
                   f"{args.samples} random pairs, {bad} violations "
                   f"(c0={lo:.4g}, C0={hi:.4g})")

    # power balance along a short transient of the scenario
    state0 = scenario.initial_state(system)
    short = replace(scenario.solver, t_final=20 * scenario.solver.dt,
                    parabolic=False)
    try:
        traj = run(system, state0, short, scenario.boundary)
    except (StepFailure, ValueError) as exc:
        report("power-balance", False, f"transient failed: {exc}")
        report("junction-conservation", False, "transient failed")
    else:
        res = np.max(np.abs(energy_mod.power_balance_residual(traj)))
        dt2 = replace(short, dt=short.dt / 2,
                      t_final=short.t_final)
        traj2 = run(system, state0, dt2, scenario.boundary)
        res2 = np.max(np.abs(energy_mod.power_balance_residual(traj2)))
        floor = 1e-13 * max(1.0, abs(traj.reports[0].energy))
        ok = res2 <= max(0.35 * res, floor)
        report("power-balance", ok,
               f"max step residual {res:.2e} -> {res2:.2e} under dt/2")
        if system.n_junctions:
            worst = max(np.max(np.abs(system.junction_mass_defect(s)))
                        for s in traj.states)
            report("junction-conservation", worst < 1e-10,
                   f"max |signed mass flow sum| = {worst:.2e}")
        else:
            print("ok   junction-conservation: no interior junctions")
    return 1 if failures else 0


def cmd_mms(args):
    table = manufactured_solution_test(cells_list=tuple(args.cells_list),
                                       dt_list=tuple(args.dt_list))
    print(table.format())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "mms.txt"), "w") as fh:
            fh.write(table.format() + "\n")
    ok = (np.all(table.spatial_orders > 1.5)
          and np.all(table.temporal_orders > 1.5))
    if not ok:
        print("convergence orders below 1.5", file=sys.stderr)
    return 0 if ok else 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "study":
            return cmd_study(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_mms(args)
    except (ConfigError, TopologyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

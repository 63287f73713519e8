"""Scenario files: model, topology, initial/boundary data, solver setup.

A scenario is a plain-text file with key-value sections.  Topologies can
be included from separate files or taken from the built-in families.
Boundary sections give one constant or piecewise-linear schedule per
boundary vertex.  Parsing is line-anchored: every error message carries
the file and line it came from.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as net
from .discretization import NetworkState, build_system
from .gas import AdmissibleBounds, make_law
from .solver import (
    SolverConfig,
    parabolic_junction_enthalpies,
    velocity_recovery,
)


class ConfigError(ValueError):
    pass


_EXPR_ENV = {
    "pi": np.pi, "e": np.e, "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "tanh": np.tanh,
    "abs": np.abs, "minimum": np.minimum, "maximum": np.maximum,
}


def eval_profile_expression(expr, x, length):
    """Evaluate an initial-profile expression of x (and pipe length L)."""
    env = dict(_EXPR_ENV)
    env.update({"x": x, "L": length})
    try:
        value = eval(expr, {"__builtins__": {}}, env)
    except Exception as exc:
        raise ConfigError(f"cannot evaluate expression {expr!r}: {exc}") from exc
    return np.broadcast_to(np.asarray(value, dtype=float), np.shape(x)).copy()


def parse_schedule(text, where=""):
    """Constant number or 't:v, t:v, ...' piecewise-linear table."""
    text = text.strip()
    if ":" not in text:
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse schedule {text!r}") from None
        return lambda tau, v=value: v
    ts, vs = [], []
    for item in text.split(","):
        try:
            t, v = item.split(":")
            ts.append(float(t))
            vs.append(float(v))
        except ValueError:
            raise ConfigError(f"{where}: cannot parse table entry {item!r}") from None
    ts = np.asarray(ts)
    vs = np.asarray(vs)
    if np.any(np.diff(ts) <= 0):
        raise ConfigError(f"{where}: schedule times must increase")
    return lambda tau: float(np.interp(tau, ts, vs))


class _Section(dict):
    """Key-value section remembering the source line of every key."""

    def __init__(self, name, lineno):
        super().__init__()
        self.name = name
        self.lineno = lineno
        self.lines = {}

    def set(self, key, value, lineno):
        self[key] = value
        self.lines[key] = lineno


def _parse_sections(text, path="<string>"):
    sections = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{path}:{lineno}: malformed section header")
            current = _Section(line[1:-1].strip(), lineno)
            sections.append(current)
            continue
        if current is None:
            raise ConfigError(f"{path}:{lineno}: content before any section")
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        current.set(key, value, lineno)
    return sections


def _get(section, key, cast, default=None, path="", required=False):
    if key not in section:
        if required:
            raise ConfigError(f"{path}:{section.lineno}: section "
                              f"[{section.name}] needs {key!r}")
        return default
    raw = section[key]
    try:
        if cast is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}:{section.lines[key]}: cannot parse "
                          f"{key} = {raw!r}") from None


@dataclass
class InitialSpec:
    rho: str = "1.0"
    w: str = "0.0"
    rest_enthalpy: float | None = None
    file: str | None = None


@dataclass
class Scenario:
    """Fully resolved experiment description."""

    topology: net.NetworkTopology
    law: object
    cells_per_edge: int
    initial: InitialSpec
    boundary: dict
    solver: SolverConfig
    bounds: AdmissibleBounds | None = None
    output_dir: str | None = None
    output_format: str = "csv"
    name: str = "scenario"
    source: str = "<memory>"
    law_spec: dict = field(default_factory=dict)

    @property
    def epsilon(self):
        return self.topology.epsilon

    def with_epsilon(self, epsilon):
        return replace(self, topology=self.topology.with_epsilon(epsilon))

    def with_friction_offset(self, offset):
        return replace(self, topology=self.topology.with_friction_offset(offset))

    def with_boundary(self, schedules):
        return replace(self, boundary=dict(schedules))

    def build_system(self, cells_per_edge=None):
        return build_system(self.topology,
                            cells_per_edge=cells_per_edge or self.cells_per_edge,
                            law=self.law)

    def initial_state(self, system):
        """Build the initial state; w = 'recover' uses the limit-model
        velocity consistent with the initial density and boundary data."""
        if self.initial.file is not None:
            return self._initial_from_file(system)
        if self.initial.rest_enthalpy is not None:
            return system.rest_state(self.initial.rest_enthalpy)
        rho = np.empty(system.n_cells)
        w = np.empty(system.n_faces)
        recover = self.initial.w.strip().lower() == "recover"
        for e in self.topology.edges:
            cells = system.edge_cells(e.name)
            faces = system.edge_faces(e.name)
            xc = system.x_cells[cells]
            xf = system.x_faces[faces]
            rho[cells] = eval_profile_expression(self.initial.rho, xc,
                                                 e.params.length)
            if not recover:
                w[faces] = eval_profile_expression(self.initial.w, xf,
                                                   e.params.length)
        if recover:
            values = {v: (s(0.0) if callable(s) else float(s))
                      for v, s in self.boundary.items()}
            hv = parabolic_junction_enthalpies(system, rho, values)
            w = velocity_recovery(system, rho, values, junction_h=hv)
        state = NetworkState(0.0, rho, w)
        state.validate()
        if self.bounds is not None:
            report = system.check_state(state, self.bounds)
            if not report.ok:
                kinds = sorted({v.kind for v in report.violations})
                raise ConfigError(f"{self.source}: initial state violates the "
                                  f"admissible bounds ({', '.join(kinds)})")
        return state

    def _initial_from_file(self, system):
        path = self.initial.file
        if not os.path.isabs(path):
            path = os.path.join(os.path.dirname(self.source) or ".", path)
        try:
            data = np.load(path)
        except OSError as exc:
            raise ConfigError(f"{self.source}: cannot read initial state "
                              f"file {path!r}: {exc}") from exc
        rho = np.asarray(data["rho"], dtype=float)
        w = np.asarray(data["w"], dtype=float)
        if rho.shape != (system.n_cells,) or w.shape != (system.n_faces,):
            raise ConfigError(
                f"{self.source}: initial state file {path!r} has shapes "
                f"{rho.shape}/{w.shape}; the grid needs "
                f"({system.n_cells},)/({system.n_faces},)")
        state = NetworkState(0.0, rho, w)
        state.validate()
        return state

    def check_boundary_complete(self):
        missing = [v for v in net.classify(self.topology).boundary
                   if v not in self.boundary]
        if missing:
            raise ConfigError(f"{self.source}: missing boundary schedule for "
                              f"vertex {missing[0]!r}")

    def manifest(self, extra=None):
        """All resolved parameters as sorted 'key = value' lines."""
        items = {
            "scenario.name": self.name,
            "scenario.source": self.source,
            "model.epsilon": self.epsilon,
            "model.law": self.law.kind,
            "grid.cells_per_edge": self.cells_per_edge,
            "solver.scheme": self.solver.scheme,
            "solver.dt": self.solver.dt,
            "solver.t_final": self.solver.t_final,
            "solver.newton_tol": self.solver.newton_tol,
            "solver.max_iter": self.solver.max_iter,
            "solver.parabolic": self.solver.parabolic,
            "topology.edges": ",".join(e.name for e in self.topology.edges),
            "topology.vertices": ",".join(self.topology.vertices),
        }
        for k, v in self.law_spec.items():
            items[f"model.{k}"] = v
        for e in self.topology.edges:
            p = e.params
            items[f"edge.{e.name}"] = (f"{e.start}->{e.end} length={p.length} "
                                       f"area={p.area} friction={p.friction} "
                                       f"elevation={p.elevation} gravity={p.gravity}")
        if self.bounds is not None:
            b = self.bounds
            items["bounds"] = (f"rho=[{b.rho_min},{b.rho_max}] w<={b.w_max} "
                               f"eps<={b.eps_max} a=[{b.area_min},{b.area_max}] "
                               f"gamma=[{b.friction_min},{b.friction_max}]")
        items.update(extra or {})
        lines = [f"{k} = {items[k]}" for k in sorted(items)]
        return "\n".join(lines) + "\n"


_BUILTIN_TOPOLOGIES = {
    "single-pipe": net.single_pipe,
    "y-network": net.y_network,
    "loop": net.loop_network,
}


def _build_topology(section, epsilon, base_dir, path):
    include = _get(section, "include", str, path=path)
    if include is not None:
        topo_path = os.path.join(base_dir, include)
        if not os.path.exists(topo_path):
            raise ConfigError(f"{path}:{section.lines['include']}: topology "
                              f"file {topo_path!r} not found")
        topology, defaults = net.load_topology(topo_path, epsilon=epsilon)
        return topology, defaults
    builtin = _get(section, "builtin", str, path=path, required=True)
    if builtin not in _BUILTIN_TOPOLOGIES:
        raise ConfigError(f"{path}:{section.lines['builtin']}: unknown builtin "
                          f"topology {builtin!r} (choose from "
                          f"{sorted(_BUILTIN_TOPOLOGIES)})")
    kwargs = {"epsilon": epsilon}
    for key, cast in (("length", float), ("area", float), ("friction", float),
                      ("gravity", float), ("n_edges", int)):
        val = _get(section, key, cast, path=path)
        if val is not None:
            kwargs[key] = val
    elev = _get(section, "elevation", str, path=path)
    if elev is not None:
        kwargs["elevation"] = net._parse_profile(elev, f"{path} [topology]")
    return _BUILTIN_TOPOLOGIES[builtin](**kwargs), {}


def parse_scenario(text, path="<string>", name=None):
    base_dir = os.path.dirname(path) if os.path.dirname(path) else "."
    sections = {"boundary": []}
    for sec in _parse_sections(text, path):
        if sec.name.startswith("boundary"):
            sections["boundary"].append(sec)
        else:
            if sec.name in sections:
                raise ConfigError(f"{path}:{sec.lineno}: duplicate section "
                                  f"[{sec.name}]")
            sections[sec.name] = sec

    if "model" not in sections:
        raise ConfigError(f"{path}:1: missing [model] section")
    model = sections["model"]
    epsilon = _get(model, "epsilon", float, default=1.0, path=path)
    law_kind = _get(model, "law", str, default="isothermal", path=path)
    law_kwargs = {}
    for key in ("sound_speed", "kappa", "exponent"):
        val = _get(model, key, float, path=path)
        if val is not None:
            law_kwargs[key] = val
    table = _get(model, "table", str, path=path)
    if table is not None:
        law_kwargs["table"] = os.path.join(base_dir, table)
    try:
        law = make_law(law_kind, **law_kwargs)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"{path}:{model.lineno}: {exc}") from exc

    if "topology" not in sections:
        raise ConfigError(f"{path}:1: missing [topology] section")
    topology, boundary_defaults = _build_topology(sections["topology"], epsilon,
                                                  base_dir, path)

    grid = sections.get("grid", _Section("grid", 0))
    cells = _get(grid, "cells_per_edge", int, default=32, path=path)
    if cells < 2:
        raise ConfigError(f"{path}:{grid.lines.get('cells_per_edge', 0)}: "
                          "need at least two cells per edge")

    init_sec = sections.get("initial", _Section("initial", 0))
    initial = InitialSpec(
        rho=_get(init_sec, "rho", str, default="1.0", path=path),
        w=_get(init_sec, "w", str, default="0.0", path=path),
        rest_enthalpy=_get(init_sec, "rest", float, path=path),
        file=_get(init_sec, "file", str, path=path),
    )

    boundary = {v: (lambda tau, _v=val: _v)
                for v, val in boundary_defaults.items()}
    for sec in sections["boundary"]:
        parts = sec.name.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{sec.lineno}: boundary section needs a "
                              "vertex name: [boundary <vertex>]")
        vertex = parts[1]
        if vertex not in topology.vertices:
            raise ConfigError(f"{path}:{sec.lineno}: unknown boundary vertex "
                              f"{vertex!r}")
        spec = sec.get("h") or sec.get("table")
        if spec is None:
            raise ConfigError(f"{path}:{sec.lineno}: boundary section for "
                              f"{vertex!r} needs 'h = ...' or 'table = ...'")
        boundary[vertex] = parse_schedule(spec, where=f"{path}:{sec.lineno}")

    sol = sections.get("solver", _Section("solver", 0))
    try:
        solver = SolverConfig(
            dt=_get(sol, "dt", float, default=1e-3, path=path),
            t_final=_get(sol, "t_final", float, default=1.0, path=path),
            scheme=_get(sol, "scheme", str, default="midpoint", path=path),
            newton_tol=_get(sol, "newton_tol", float, default=1e-11, path=path),
            max_iter=_get(sol, "max_iter", int, default=30, path=path),
            parabolic=_get(sol, "parabolic", bool, default=False, path=path),
            parabolic_gravity=_get(sol, "parabolic_gravity", bool, default=True,
                                   path=path),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}:{sol.lineno}: {exc}") from exc

    bounds = None
    if "bounds" in sections:
        bsec = sections["bounds"]
        try:
            bounds = AdmissibleBounds(
                rho_min=_get(bsec, "rho_min", float, path=path, required=True),
                rho_max=_get(bsec, "rho_max", float, path=path, required=True),
                w_max=_get(bsec, "w_max", float, path=path, required=True),
                eps_max=_get(bsec, "eps_max", float, path=path, required=True),
                area_min=_get(bsec, "area_min", float, default=1.0, path=path),
                area_max=_get(bsec, "area_max", float, default=1.0, path=path),
                friction_min=_get(bsec, "friction_min", float, default=1.0,
                                  path=path),
                friction_max=_get(bsec, "friction_max", float, default=1.0,
                                  path=path),
                gz_max=_get(bsec, "gz_max", float, default=0.0, path=path),
            )
        except ValueError as exc:
            raise ConfigError(f"{path}:{bsec.lineno}: {exc}") from exc

    out = sections.get("output", _Section("output", 0))
    output_dir = _get(out, "dir", str, path=path)
    output_format = _get(out, "format", str, default="csv", path=path)
    if output_format not in ("csv", "npz"):
        raise ConfigError(f"{path}:{out.lines.get('format', 0)}: output format "
                          "must be csv or npz")

    scenario = Scenario(
        topology=topology, law=law, cells_per_edge=cells, initial=initial,
        boundary=boundary, solver=solver, bounds=bounds,
        output_dir=output_dir, output_format=output_format,
        name=name or os.path.splitext(os.path.basename(path))[0],
        source=path, law_spec={"law": law_kind, **law_kwargs},
    )
    scenario.check_boundary_complete()
    return scenario


def load_scenario(path):
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text, path=path)


# ---------------------------------------------------------------------------
# output writers

def write_manifest(path, scenario, extra=None):
    with open(path, "w") as fh:
        fh.write(scenario.manifest(extra=extra))


def write_trajectory(directory, system, trajectory, fmt="csv", prefix="states"):
    """Snapshot tables: cell rows (tau, edge, node, x, rho, h) and face
    rows (tau, edge, node, x, w, m)."""
    os.makedirs(directory, exist_ok=True)
    if fmt == "npz":
        np.savez_compressed(
            os.path.join(directory, f"{prefix}.npz"),
            times=np.asarray(trajectory.times),
            rho=trajectory.rho_array(),
            w=trajectory.w_array(),
            x_cells=system.x_cells,
            x_faces=system.x_faces,
            edges=np.array([e.name for e in system.topology.edges]),
        )
        return
    cells_path = os.path.join(directory, f"{prefix}_cells.csv")
    faces_path = os.path.join(directory, f"{prefix}_faces.csv")
    with open(cells_path, "w") as fc, open(faces_path, "w") as ff:
        fc.write("tau,edge,node,x,rho,h\n")
        ff.write("tau,edge,node,x,w,m\n")
        for state in trajectory.states:
            h, m = system.costate(state)
            for e in system.topology.edges:
                cells = system.edge_cells(e.name)
                faces = system.edge_faces(e.name)
                for i, c in enumerate(range(cells.start, cells.stop)):
                    fc.write(f"{state.tau:.12g},{e.name},{i},"
                             f"{system.x_cells[c]:.12g},{state.rho[c]:.12g},"
                             f"{h[c]:.12g}\n")
                for i, f in enumerate(range(faces.start, faces.stop)):
                    ff.write(f"{state.tau:.12g},{e.name},{i},"
                             f"{system.x_faces[f]:.12g},{state.w[f]:.12g},"
                             f"{m[f]:.12g}\n")


def write_energy_trace(path, trajectory):
    with open(path, "w") as fh:
        fh.write("tau,energy,dissipation,boundary_flux,balance_residual\n")
        for r in trajectory.reports:
            fh.write(f"{r.tau:.12g},{r.energy:.15g},{r.dissipation:.15g},"
                     f"{r.boundary_flux:.15g},{r.balance_residual:.6g}\n")

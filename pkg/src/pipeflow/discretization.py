"""Staggered-grid discretization of the rescaled flow equations on networks.

Densities live at cell centers, velocities at faces.  The semi-discrete
system has the form

    C du/dtau + (J + R(u)) z(u) = B,

where z(u) stacks cell enthalpies, face mass flow rates and one shared
enthalpy unknown per interior junction.  J is assembled exactly
antisymmetric, C is a positive diagonal over the state unknowns, and
R(u) is a nonnegative diagonal, so the energy balance of the continuous
model carries over to the discrete level identically.

The junction blocks couple each incident pipe's terminal momentum row to
the shared junction enthalpy, and one constraint row per junction
enforces the signed mass-flow balance; together they make the discrete
energy flux across junctions vanish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import network as net
from .gas import check_admissible


class EdgeGrid:
    """Uniform staggered grid on a single pipe.

    n_cells cells of width dx = length / n_cells; n_cells + 1 faces.  The
    dual volume of a face is dx in the interior and dx/2 at the ends.
    """

    def __init__(self, length, n_cells):
        n_cells = int(n_cells)
        if n_cells < 2:
            raise ValueError("need at least two cells per pipe")
        if length <= 0:
            raise ValueError("pipe length must be positive")
        self.length = float(length)
        self.n_cells = n_cells
        self.dx = self.length / n_cells
        self.cell_centers = (np.arange(n_cells) + 0.5) * self.dx
        self.faces = np.arange(n_cells + 1) * self.dx
        self.face_volumes = np.full(n_cells + 1, self.dx)
        self.face_volumes[0] = self.face_volumes[-1] = 0.5 * self.dx

    def refined(self, factor=2):
        return EdgeGrid(self.length, self.n_cells * factor)


def build_grids(topology, cells_per_edge=None, target_dx=None):
    """One EdgeGrid per edge, from a cell count or a target spacing.

    cells_per_edge may be an int (same count everywhere) or a dict by
    edge name; alternatively target_dx picks the count per edge.
    """
    if (cells_per_edge is None) == (target_dx is None):
        raise ValueError("give exactly one of cells_per_edge or target_dx")
    grids = {}
    for e in topology.edges:
        if cells_per_edge is not None:
            n = cells_per_edge[e.name] if isinstance(cells_per_edge, dict) else int(cells_per_edge)
        else:
            n = max(2, int(round(e.params.length / target_dx)))
        grids[e.name] = EdgeGrid(e.params.length, n)
    return grids


@dataclass
class NetworkState:
    """Discrete state: densities per cell, velocities per face, time stamp."""

    tau: float
    rho: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.w = np.asarray(self.w, dtype=float)

    def copy(self):
        return NetworkState(self.tau, self.rho.copy(), self.w.copy())

    def validate(self):
        if np.any(self.rho <= 0.0) or not np.all(np.isfinite(self.rho)):
            raise ValueError("state density must be positive and finite")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("state velocity must be finite")


@dataclass
class DiscreteOperators:
    """Assembled operator bundle for one state.

    c_state    positive diagonal weights over (rho, w) unknowns
    j          sparse antisymmetric operator on (h, m, h_junction)
    r_diag     nonnegative diagonal over the same extended vector
    system     back-reference used for boundary loads and index maps
    """

    c_state: np.ndarray
    j: sp.spmatrix
    r_diag: np.ndarray
    system: "NetworkSystem"

    def boundary_load(self, values):
        return self.system.boundary_load(values)

    def skewness(self, z):
        """<J z, z> normalized by ||z||^2; zero up to rounding."""
        z = np.asarray(z, dtype=float)
        return float(z @ (self.j @ z)) / float(z @ z)

    def dump(self, directory):
        """Write sparsity patterns in matrix-market format for debugging."""
        import os
        from scipy.io import mmwrite

        os.makedirs(directory, exist_ok=True)
        mmwrite(os.path.join(directory, "j_operator"), sp.coo_matrix(self.j))
        mmwrite(os.path.join(directory, "c_operator"), sp.diags(self.c_state))
        mmwrite(os.path.join(directory, "r_operator"), sp.diags(self.r_diag))


class NetworkSystem:
    """Topology + grids + gas law, with all index maps precomputed.

    The flat layout concatenates edge cells and edge faces in the order
    of ``topology.edges``; interior junction enthalpies are appended
    after the face block in the extended co-state vector.
    """

    def __init__(self, topology, grids, law):
        self.topology = topology
        self.law = law
        self.grids = {e.name: grids[e.name] for e in topology.edges}
        self.epsilon = topology.epsilon

        classes = net.classify(topology)
        self.junction_vertices = tuple(sorted(classes.interior))
        self.boundary_vertices = tuple(sorted(classes.boundary))
        jslot = {v: i for i, v in enumerate(self.junction_vertices)}

        n_c = 0
        n_f = 0
        self.cell_offset = {}
        self.face_offset = {}
        for e in topology.edges:
            g = self.grids[e.name]
            self.cell_offset[e.name] = n_c
            self.face_offset[e.name] = n_f
            n_c += g.n_cells
            n_f += g.n_cells + 1
        self.n_cells = n_c
        self.n_faces = n_f
        self.n_junctions = len(self.junction_vertices)
        self.n_state = n_c + n_f
        self.n_z = n_c + n_f + self.n_junctions

        # per-node geometry and coefficients
        self.x_cells = np.empty(n_c)
        self.x_faces = np.empty(n_f)
        self.dx_cells = np.empty(n_c)
        self.omega_faces = np.empty(n_f)
        self.a_cells = np.empty(n_c)
        self.gz_cells = np.empty(n_c)
        self.gamma_faces = np.empty(n_f)
        cell_left_face = np.empty(n_c, dtype=int)
        cell_right_face = np.empty(n_c, dtype=int)
        face_left_cell = np.full(n_f, -1, dtype=int)
        face_right_cell = np.full(n_f, -1, dtype=int)

        term_faces = []
        term_signs = []
        term_vertices = []
        for e in topology.edges:
            g = self.grids[e.name]
            c0 = self.cell_offset[e.name]
            f0 = self.face_offset[e.name]
            n = g.n_cells
            cells = slice(c0, c0 + n)
            faces = slice(f0, f0 + n + 1)
            self.x_cells[cells] = g.cell_centers
            self.x_faces[faces] = g.faces
            self.dx_cells[cells] = g.dx
            self.omega_faces[faces] = g.face_volumes
            self.a_cells[cells] = e.params.area_at(g.cell_centers)
            self.gz_cells[cells] = e.params.gravity * e.params.elevation_at(g.cell_centers)
            self.gamma_faces[faces] = e.params.friction_at(g.faces)
            cell_left_face[cells] = f0 + np.arange(n)
            cell_right_face[cells] = f0 + np.arange(1, n + 1)
            face_left_cell[f0 + 1:f0 + n + 1] = c0 + np.arange(n)
            face_right_cell[f0:f0 + n] = c0 + np.arange(n)
            term_faces += [f0, f0 + n]
            term_signs += [-1.0, 1.0]
            term_vertices += [e.start, e.end]

        self.cell_left_face = cell_left_face
        self.cell_right_face = cell_right_face
        self.face_left_cell = face_left_cell
        self.face_right_cell = face_right_cell
        self.terminal_faces = np.asarray(term_faces, dtype=int)
        self.terminal_signs = np.asarray(term_signs)
        self.terminal_vertices = tuple(term_vertices)

        mask_j = np.array([v in jslot for v in term_vertices])
        self.junction_term_faces = self.terminal_faces[mask_j]
        self.junction_term_signs = self.terminal_signs[mask_j]
        self.junction_term_slots = np.array(
            [jslot[v] for v, m in zip(term_vertices, mask_j) if m], dtype=int)
        self.boundary_term_faces = self.terminal_faces[~mask_j]
        self.boundary_term_signs = self.terminal_signs[~mask_j]
        self.boundary_term_vertices = tuple(
            v for v, m in zip(term_vertices, mask_j) if not m)

        # face reconstruction weights: m_f = (sum_c kappa_{f,c} rho_c) * w_f
        pair_face = []
        pair_cell = []
        for f in range(n_f):
            for c in (face_left_cell[f], face_right_cell[f]):
                if c >= 0:
                    pair_face.append(f)
                    pair_cell.append(c)
        self.pair_face = np.asarray(pair_face, dtype=int)
        self.pair_cell = np.asarray(pair_cell, dtype=int)
        self.pair_kappa = (self.a_cells[self.pair_cell] * self.dx_cells[self.pair_cell]
                           / (2.0 * self.omega_faces[self.pair_face]))
        self.k_matrix = sp.csr_matrix(
            (self.pair_kappa, (self.pair_face, self.pair_cell)), shape=(n_f, n_c))

        # difference operator: (D m)_c = m_right(c) - m_left(c)
        rows = np.concatenate([np.arange(n_c), np.arange(n_c)])
        cols = np.concatenate([cell_right_face, cell_left_face])
        data = np.concatenate([np.ones(n_c), -np.ones(n_c)])
        self.d_matrix = sp.csr_matrix((data, (rows, cols)), shape=(n_c, n_f))
        self.g_matrix = sp.csr_matrix(-self.d_matrix.T)

        if self.n_junctions:
            self.s_matrix = sp.csr_matrix(
                (self.junction_term_signs,
                 (self.junction_term_faces, self.junction_term_slots)),
                shape=(n_f, self.n_junctions))
        else:
            self.s_matrix = sp.csr_matrix((n_f, 0))

        z_cc = sp.csr_matrix((n_c, n_c))
        z_cj = sp.csr_matrix((n_c, self.n_junctions))
        self.j_matrix = sp.bmat(
            [[z_cc, self.d_matrix, z_cj],
             [self.g_matrix, sp.csr_matrix((n_f, n_f)), self.s_matrix],
             [z_cj.T, -self.s_matrix.T, sp.csr_matrix((self.n_junctions, self.n_junctions))]],
            format="csr")

        self.c_rho = self.a_cells * self.dx_cells
        self.c_w = self.epsilon**2 * self.omega_faces
        self.c_state = np.concatenate([self.c_rho, self.c_w])

    # -- per-edge views ---------------------------------------------------

    def edge_cells(self, name):
        g = self.grids[name]
        o = self.cell_offset[name]
        return slice(o, o + g.n_cells)

    def edge_faces(self, name):
        g = self.grids[name]
        o = self.face_offset[name]
        return slice(o, o + g.n_cells + 1)

    # -- state-dependent maps ----------------------------------------------

    def kinetic_cells(self, w):
        """Cell average of w^2 from the two adjacent faces."""
        return 0.5 * (w[self.cell_left_face] ** 2 + w[self.cell_right_face] ** 2)

    def costate(self, state):
        """Cell enthalpies and face mass flow rates (h, m)."""
        h = (0.5 * self.epsilon**2 * self.kinetic_cells(state.w)
             + self.law.dpotential(state.rho) + self.gz_cells)
        m = (self.k_matrix @ state.rho) * state.w
        return h, m

    def arho_faces(self, rho):
        return self.k_matrix @ rho

    def r_diag(self, state):
        """Diagonal of R(u) on the extended vector; friction on face slots."""
        diag = np.zeros(self.n_z)
        arho = self.arho_faces(state.rho)
        diag[self.n_cells:self.n_cells + self.n_faces] = (
            self.omega_faces * self.gamma_faces * np.abs(state.w) / arho)
        return diag

    def assemble(self, state):
        state.validate()
        return DiscreteOperators(self.c_state, self.j_matrix,
                                 self.r_diag(state), self)

    def extended_costate(self, state, junction_h=None):
        h, m = self.costate(state)
        if junction_h is None:
            junction_h = np.zeros(self.n_junctions)
        return np.concatenate([h, m, np.asarray(junction_h, dtype=float)])

    def boundary_load(self, values):
        """Load vector for prescribed boundary enthalpies.

        values maps boundary vertex names to numbers.  A missing vertex
        is a configuration error.
        """
        b = np.zeros(self.n_z)
        for f, sign, v in zip(self.boundary_term_faces, self.boundary_term_signs,
                              self.boundary_term_vertices):
            if v not in values:
                raise ValueError(f"missing boundary enthalpy for vertex {v!r}")
            b[self.n_cells + f] = -sign * values[v]
        return b

    def junction_mass_defect(self, state):
        """Signed mass-flow sums at interior junctions; zero when coupled."""
        _, m = self.costate(state)
        return self.s_matrix.T @ m

    def junction_enthalpies(self, state, boundary_values):
        """Consistent junction enthalpies for the instantaneous dynamics.

        Solves, junction by junction, for the shared enthalpy that keeps
        the signed mass-flow balance stationary; requires epsilon > 0.
        """
        if self.epsilon == 0.0:
            raise ValueError("junction enthalpies of the limit model are "
                             "algebraic unknowns of the parabolic solver")
        h, m = self.costate(state)
        gh = self.g_matrix @ h
        fr = self.omega_faces * self.gamma_faces * np.abs(state.w) * state.w
        load = self.boundary_load(boundary_values)[self.n_cells:self.n_cells + self.n_faces]
        arho = self.arho_faces(state.rho)
        dm_rows = self.d_matrix @ m
        drho_gain = dm_rows / self.dx_cells  # d(a rho)/dtau = -(Dm)_c / dx
        hv = np.zeros(self.n_junctions)
        cw = self.c_w
        for j in range(self.n_junctions):
            sel = self.junction_term_slots == j
            faces = self.junction_term_faces[sel]
            signs = self.junction_term_signs[sel]
            # d/dtau sum(sign * arho_f w_f) = 0 determines the multiplier
            coef = np.sum(arho[faces] / cw[faces])
            rhs = 0.0
            for f, s in zip(faces, signs):
                wdot_free = (load[f] - gh[f] - fr[f]) / cw[f]
                c = self.face_left_cell[f] if self.face_left_cell[f] >= 0 else self.face_right_cell[f]
                rhs += s * (arho[f] * wdot_free - state.w[f] * drho_gain[c])
            hv[j] = rhs / coef
        return hv

    def spatial_residual(self, state, boundary_values, forcing=None, tau=None):
        """Instantaneous (drho/dtau, dw/dtau) for the hyperbolic model."""
        if self.epsilon == 0.0:
            raise ValueError("epsilon = 0 has no hyperbolic dynamics; "
                             "use the parabolic solver")
        state.validate()
        if tau is None:
            tau = state.tau
        h, m = self.costate(state)
        hv = self.junction_enthalpies(state, boundary_values)
        load = self.boundary_load(boundary_values)
        load_w = load[self.n_cells:self.n_cells + self.n_faces].copy()
        load_rho = np.zeros(self.n_cells)
        if forcing is not None:
            f1, f2 = forcing
            load_rho += self.dx_cells * f1(self.x_cells, tau)
            load_w += self.omega_faces * f2(self.x_faces, tau)
        fr = self.omega_faces * self.gamma_faces * np.abs(state.w) * state.w
        drho = (load_rho - self.d_matrix @ m) / self.c_rho
        dw = (load_w - self.g_matrix @ h - self.s_matrix @ hv - fr) / self.c_w
        return drho, dw

    # -- norms and quadrature ----------------------------------------------

    def l2sq_cells(self, g):
        return float(np.dot(self.dx_cells, np.asarray(g) ** 2))

    def l2sq_faces(self, g):
        return float(np.dot(self.omega_faces, np.asarray(g) ** 2))

    def l3_faces(self, g):
        return float(np.dot(self.omega_faces, np.abs(np.asarray(g)) ** 3))

    def c_norm_sq(self, d_rho, d_w):
        """||(d_rho, d_w)||_C^2 = ||sqrt(a) d_rho||^2 + ||eps d_w||^2."""
        d_rho = np.asarray(d_rho, dtype=float)
        d_w = np.asarray(d_w, dtype=float)
        return float(np.dot(self.c_rho, d_rho**2) + np.dot(self.c_w, d_w**2))

    def total_mass(self, state):
        return float(np.dot(self.c_rho, state.rho))

    # -- states --------------------------------------------------------------

    def constant_state(self, rho, w=0.0, tau=0.0):
        return NetworkState(tau, np.full(self.n_cells, float(rho)),
                            np.full(self.n_faces, float(w)))

    def rest_state(self, boundary_enthalpy, tau=0.0):
        """Well-balanced rest state: w = 0, P'(rho) + g z = const per cell."""
        from scipy.optimize import brentq

        target = boundary_enthalpy - self.gz_cells
        rho = np.empty(self.n_cells)
        for i, t in enumerate(target):
            rho[i] = brentq(lambda r: self.law.dpotential(r) - t, 1e-8, 1e8,
                            xtol=1e-14, rtol=1e-15)
        return NetworkState(tau, rho, np.zeros(self.n_faces))

    def check_state(self, state, bounds):
        """Box and margin checks with (edge, node) locations."""
        report = check_admissible(state.rho, state.w, bounds, self.law)
        for v in report.violations:
            if isinstance(v.where, int):
                v.where = self.locate(v.where, kind=v.kind)
        return report

    def locate(self, flat_index, kind=""):
        on_cells = kind.startswith("density")
        offsets = self.cell_offset if on_cells else self.face_offset
        for e in reversed(self.topology.edges):
            if flat_index >= offsets[e.name]:
                return (e.name, flat_index - offsets[e.name])
        raise IndexError(flat_index)


def build_system(topology, cells_per_edge=None, law=None, target_dx=None, grids=None):
    if grids is None:
        grids = build_grids(topology, cells_per_edge=cells_per_edge, target_dx=target_dx)
    if law is None:
        raise ValueError("a gas law is required")
    return NetworkSystem(topology, grids, law)

"""Barotropic gas laws, energy densities and admissibility checks.

The momentum balance of the flow model is driven by the derivative of a
pressure potential rather than the pressure itself.  For a barotropic
pressure function p(rho) the potential is

    P(rho) = rho * integral_1^rho p(r)/r**2 dr,

so that P(1) = 0, P''(rho) = p'(rho)/rho, and (1/rho) d/dx p(rho) equals
d/dx P'(rho) for smooth density profiles.  Strict convexity of P on the
admissible density interval is required throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline, PchipInterpolator


def _as_positive(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        raise ValueError("density must be positive and finite")
    return rho


class GasLaw:
    """Base class for barotropic pressure laws."""

    kind = "abstract"

    def pressure(self, rho):
        raise NotImplementedError

    def dpressure(self, rho):
        raise NotImplementedError

    def potential(self, rho):
        raise NotImplementedError

    def dpotential(self, rho):
        raise NotImplementedError

    def d2potential(self, rho):
        """Second derivative of the potential, p'(rho)/rho."""
        rho = _as_positive(rho)
        return self.dpressure(rho) / rho

    def potential_quadrature(self, rho):
        """Reference evaluation of the potential by adaptive quadrature.

        Slow path, scalar argument only.  Used as an independent check of
        the closed forms and of tabulated laws.
        """
        rho = float(rho)
        if rho <= 0.0:
            raise ValueError("density must be positive")
        integrand = lambda r: self.pressure(r) / r**2
        val, _ = quad(integrand, 1.0, rho, epsabs=1e-12, epsrel=1e-12)
        return rho * val

    def d2potential_bounds(self, lo, hi, samples=1024):
        """Min and max of P'' over [lo, hi], sampled densely plus endpoints."""
        if not (0.0 < lo <= hi):
            raise ValueError("need 0 < lo <= hi")
        grid = np.linspace(lo, hi, samples)
        vals = self.d2potential(grid)
        return float(np.min(vals)), float(np.max(vals))


class IsothermalLaw(GasLaw):
    """Isothermal law p = c^2 * rho with sound speed c."""

    kind = "isothermal"

    def __init__(self, sound_speed=1.0):
        if sound_speed <= 0.0:
            raise ValueError("sound speed must be positive")
        self.sound_speed = float(sound_speed)

    def pressure(self, rho):
        return self.sound_speed**2 * _as_positive(rho)

    def dpressure(self, rho):
        rho = _as_positive(rho)
        return np.full_like(rho, self.sound_speed**2)

    def potential(self, rho):
        rho = _as_positive(rho)
        return self.sound_speed**2 * rho * np.log(rho)

    def dpotential(self, rho):
        rho = _as_positive(rho)
        return self.sound_speed**2 * (np.log(rho) + 1.0)

    def d2potential(self, rho):
        rho = _as_positive(rho)
        return self.sound_speed**2 / rho

    def __repr__(self):
        return f"IsothermalLaw(sound_speed={self.sound_speed})"


class PowerLaw(GasLaw):
    """Polytropic law p = kappa * rho**exponent with exponent != 1."""

    kind = "power-law"

    def __init__(self, kappa=1.0, exponent=2.0):
        if kappa <= 0.0 or exponent <= 0.0:
            raise ValueError("kappa and exponent must be positive")
        if abs(exponent - 1.0) < 1e-12:
            raise ValueError("exponent 1 is the isothermal law; use IsothermalLaw")
        self.kappa = float(kappa)
        self.exponent = float(exponent)

    def pressure(self, rho):
        return self.kappa * _as_positive(rho) ** self.exponent

    def dpressure(self, rho):
        rho = _as_positive(rho)
        return self.kappa * self.exponent * rho ** (self.exponent - 1.0)

    def potential(self, rho):
        rho = _as_positive(rho)
        s = self.exponent
        return self.kappa * (rho**s - rho) / (s - 1.0)

    def dpotential(self, rho):
        rho = _as_positive(rho)
        s = self.exponent
        return self.kappa * (s * rho ** (s - 1.0) - 1.0) / (s - 1.0)

    def d2potential(self, rho):
        rho = _as_positive(rho)
        s = self.exponent
        return self.kappa * s * rho ** (s - 2.0)

    def __repr__(self):
        return f"PowerLaw(kappa={self.kappa}, exponent={self.exponent})"


class TabulatedLaw(GasLaw):
    """Pressure law interpolated from a (rho, p) table.

    Monotone cubic interpolation of the table; the potential is built once
    by composite Gauss quadrature on a dense grid and interpolated with a
    cubic spline, which reproduces direct adaptive quadrature to better
    than 1e-10 relative.
    """

    kind = "tabulated"

    def __init__(self, rho_table, p_table, grid_points=4096):
        rho_table = np.asarray(rho_table, dtype=float)
        p_table = np.asarray(p_table, dtype=float)
        if rho_table.ndim != 1 or rho_table.shape != p_table.shape:
            raise ValueError("tables must be one-dimensional and equally long")
        if rho_table.size < 4:
            raise ValueError("need at least four table points")
        if np.any(np.diff(rho_table) <= 0) or np.any(np.diff(p_table) <= 0):
            raise ValueError("table must be strictly increasing in both columns")
        if rho_table[0] <= 0.0:
            raise ValueError("table densities must be positive")
        if not (rho_table[0] <= 1.0 <= rho_table[-1]):
            raise ValueError("table must bracket the reference density 1")
        self.rho_table = rho_table
        self.p_table = p_table
        self._p = PchipInterpolator(rho_table, p_table)
        self._dp = self._p.derivative()
        self._grid = np.linspace(rho_table[0], rho_table[-1], grid_points)
        self._q = CubicSpline(self._grid, self._cumulative_q(self._grid))

    @classmethod
    def from_file(cls, path):
        data = np.loadtxt(path)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ValueError(f"{path}: expected two columns (rho, p)")
        return cls(data[:, 0], data[:, 1])

    def _cumulative_q(self, grid):
        # Q(rho) = integral_1^rho p(r)/r^2 dr accumulated with 5-point
        # Gauss-Legendre per grid interval, anchored so that Q(1) = 0.
        nodes, weights = np.polynomial.legendre.leggauss(5)
        left, right = grid[:-1], grid[1:]
        half = 0.5 * (right - left)
        mid = 0.5 * (right + left)
        pts = mid[:, None] + half[:, None] * nodes[None, :]
        vals = self._p(pts) / pts**2
        pieces = half * (vals @ weights)
        q = np.concatenate([[0.0], np.cumsum(pieces)])
        ref, _ = quad(lambda r: self._p(r) / r**2, grid[0], 1.0,
                      epsabs=1e-13, epsrel=1e-13, limit=200)
        return q - ref

    def _check_domain(self, rho):
        rho = _as_positive(rho)
        if np.any(rho < self.rho_table[0]) or np.any(rho > self.rho_table[-1]):
            raise ValueError("density outside the tabulated range")
        return rho

    def pressure(self, rho):
        return self._p(self._check_domain(rho))

    def dpressure(self, rho):
        return self._dp(self._check_domain(rho))

    def potential(self, rho):
        rho = self._check_domain(rho)
        return rho * self._q(rho)

    def dpotential(self, rho):
        rho = self._check_domain(rho)
        return self._q(rho) + self._p(rho) / rho


def make_law(kind, **kwargs):
    """Gas-law factory used by scenario files."""
    kind = kind.strip().lower()
    if kind == "isothermal":
        return IsothermalLaw(sound_speed=float(kwargs.get("sound_speed", 1.0)))
    if kind in ("power-law", "power_law", "powerlaw"):
        return PowerLaw(kappa=float(kwargs.get("kappa", 1.0)),
                        exponent=float(kwargs.get("exponent", 2.0)))
    if kind == "tabulated":
        return TabulatedLaw.from_file(kwargs["table"])
    raise ValueError(f"unknown gas law kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters and profiles

def profile_values(spec, x):
    """Sample a parameter profile at positions x along a pipe.

    A profile is either a number (constant) or a sequence of (x, value)
    breakpoints interpreted piecewise linearly, clamped at the ends.
    """
    x = np.asarray(x, dtype=float)
    if np.isscalar(spec) or isinstance(spec, (int, float)):
        return np.full_like(x, float(spec))
    pts = np.asarray(spec, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("breakpoint profile must be a list of (x, value) pairs")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise ValueError("profile breakpoints must be strictly increasing in x")
    return np.interp(x, pts[:, 0], pts[:, 1])


def _freeze_profile(spec):
    if np.isscalar(spec) or isinstance(spec, (int, float)):
        return float(spec)
    return tuple((float(a), float(b)) for a, b in spec)


@dataclass(frozen=True)
class PipeParameters:
    """Per-pipe coefficients of the rescaled flow model.

    area, friction and elevation are profiles over the local coordinate
    [0, length]; epsilon is the time/velocity rescaling parameter shared
    by every pipe of a network (epsilon = 0 selects the high-friction
    limit model, which has no rescaled momentum dynamics).
    """

    length: float
    area: object = 1.0
    friction: object = 1.0
    elevation: object = 0.0
    gravity: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        if self.length <= 0.0 or not np.isfinite(self.length):
            raise ValueError("pipe length must be positive and finite")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be nonnegative")
        object.__setattr__(self, "area", _freeze_profile(self.area))
        object.__setattr__(self, "friction", _freeze_profile(self.friction))
        object.__setattr__(self, "elevation", _freeze_profile(self.elevation))
        probe = np.linspace(0, self.length, 65)
        if np.any(profile_values(self.area, probe) <= 0.0):
            raise ValueError("area profile must be positive")
        # friction 0 is allowed (lossless pipe); the stability estimates
        # additionally require a positive lower friction bound
        if np.any(profile_values(self.friction, probe) < 0.0):
            raise ValueError("friction profile must be nonnegative")

    def area_at(self, x):
        return profile_values(self.area, x)

    def friction_at(self, x):
        return profile_values(self.friction, x)

    def elevation_at(self, x):
        return profile_values(self.elevation, x)


@dataclass(frozen=True)
class AdmissibleBounds:
    """Box bounds defining the admissible state set.

    The subsonic margin ties the density and velocity boxes together:
    rho * P''(rho) >= 4 * eps_max**2 * w_max**2 must hold on the whole
    density interval for the convexity-based norm equivalence to apply.
    """

    rho_min: float
    rho_max: float
    w_max: float
    eps_max: float
    area_min: float = 1.0
    area_max: float = 1.0
    friction_min: float = 1.0
    friction_max: float = 1.0
    gz_max: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.rho_min <= self.rho_max):
            raise ValueError("need 0 < rho_min <= rho_max")
        if self.w_max < 0.0 or self.eps_max < 0.0:
            raise ValueError("w_max and eps_max must be nonnegative")
        if not (0.0 < self.area_min <= self.area_max):
            raise ValueError("need 0 < area_min <= area_max")
        if not (0.0 < self.friction_min <= self.friction_max):
            raise ValueError("need 0 < friction_min <= friction_max")

    def subsonic_margin(self, law, samples=1024):
        """min over [rho_min, rho_max] of rho*P''(rho) - 4*eps_max^2*w_max^2."""
        grid = np.linspace(self.rho_min, self.rho_max, samples)
        grid = np.union1d(grid, [self.rho_min, self.rho_max])
        return float(np.min(grid * law.d2potential(grid))
                     - 4.0 * self.eps_max**2 * self.w_max**2)


@dataclass
class Violation:
    kind: str
    where: object
    value: float


@dataclass
class AdmissibilityReport:
    ok: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def check_admissible(rho, w, bounds, law, samples=1024):
    """Check pointwise box bounds and the subsonic margin.

    Returns a report listing every violation with its flat index; the
    margin check depends only on (bounds, law) and is reported once.
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    violations = []
    for idx in np.flatnonzero(rho < bounds.rho_min):
        violations.append(Violation("density_low", int(idx), float(rho[idx])))
    for idx in np.flatnonzero(rho > bounds.rho_max):
        violations.append(Violation("density_high", int(idx), float(rho[idx])))
    for idx in np.flatnonzero(np.abs(w) > bounds.w_max):
        violations.append(Violation("velocity", int(idx), float(w[idx])))
    margin = bounds.subsonic_margin(law, samples=samples)
    if margin < 0.0:
        violations.append(Violation("subsonic_margin",
                                    (bounds.rho_min, bounds.rho_max), margin))
    return AdmissibilityReport(ok=not violations, violations=violations)


# ---------------------------------------------------------------------------
# co-state and energy maps (collocated fields)

def costate(rho, w, law, area=1.0, elevation=0.0, gravity=1.0, epsilon=1.0):
    """Total specific enthalpy and mass flow rate at collocated points.

    h = eps^2 w^2 / 2 + P'(rho) + g z,   m = a rho w.
    """
    rho = _as_positive(rho)
    w = np.asarray(w, dtype=float)
    h = 0.5 * epsilon**2 * w**2 + law.dpotential(rho) + gravity * np.asarray(elevation, dtype=float)
    m = np.asarray(area, dtype=float) * rho * w
    return h, m


def hessian_apply(rho, w, d_rho, d_w, law, area=1.0, epsilon=1.0):
    """Derivative of the co-state map applied to a direction (d_rho, d_w).

    Pointwise matrix [[P''(rho), eps^2 w], [a w, a rho]]; symmetric with
    respect to the weight diag(a, eps^2).
    """
    rho = _as_positive(rho)
    w = np.asarray(w, dtype=float)
    d_rho = np.asarray(d_rho, dtype=float)
    d_w = np.asarray(d_w, dtype=float)
    a = np.asarray(area, dtype=float)
    dh = law.d2potential(rho) * d_rho + epsilon**2 * w * d_w
    dm = a * w * d_rho + a * rho * d_w
    return dh, dm


def energy_density(rho, w, law, elevation=0.0, gravity=1.0, epsilon=1.0):
    """eps^2 rho w^2 / 2 + P(rho) + g z rho (cross-section factor excluded)."""
    rho = _as_positive(rho)
    w = np.asarray(w, dtype=float)
    return (0.5 * epsilon**2 * rho * w**2 + law.potential(rho)
            + gravity * np.asarray(elevation, dtype=float) * rho)


# ---------------------------------------------------------------------------
# physical to rescaled parameters

@dataclass(frozen=True)
class PhysicalParameters:
    """Raw pipe friction data and scales before rescaling."""

    friction_factor: float
    diameter: float
    velocity: float = 1.0
    time_horizon: float = 1.0

    def __post_init__(self):
        if self.friction_factor <= 0.0 or self.diameter <= 0.0:
            raise ValueError("friction factor and diameter must be positive")


@dataclass(frozen=True)
class RescaledQuantities:
    gamma: float
    velocity: float
    time_horizon: float
    epsilon: float

    def friction_over_diameter(self):
        """Recover lambda/(2 d) from the rescaled friction coefficient."""
        return self.gamma / self.epsilon**2


def rescale_physical(phys, epsilon):
    """Map physical friction/velocity/time to their rescaled counterparts.

    gamma = eps^2 * lambda / (2 d), w = v / eps, tau = eps * t.  The map
    is undefined for eps = 0 (the limit model is reached by letting the
    rescaled eps tend to 0, not by rescaling with it).
    """
    if epsilon <= 0.0:
        raise ValueError("rescaling requires epsilon > 0")
    gamma = epsilon**2 * phys.friction_factor / (2.0 * phys.diameter)
    return RescaledQuantities(
        gamma=gamma,
        velocity=phys.velocity / epsilon,
        time_horizon=epsilon * phys.time_horizon,
        epsilon=epsilon,
    )

"""
Slow-fast periodic systems

    dx/dt = f1(x, y, z),   dy/dt = f2(x, y, z),   eps * dz/dt = f3(x, y, z)

with every f T-periodic in z. This module holds the system type, the
registry of built-in systems, the sampling audits of the standing
assumptions (f3 >= theta > 0, x = 0 a partial equilibrium, periodicity),
and the change of independent variable t -> z which gives the reduced
system dx/dz = eps*h1, dy/dz = eps*h2 with h_i = f_i / f3.

Vector fields receive x with shape (n, ...), y with shape (m, ...) and z
with shape (...), and must broadcast over the trailing axes. That is what
lets an ensemble integrate as one batched state.
"""
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from lab_utils import LHS_SAMPLES, FastRateViolation, LabError, NonFiniteValueError, make_rng
from ode_core import IntegratorConfig, Trajectory, integrate, sample_at

VectorField = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

DIVISION_GUARD = 1e-12
EQUILIBRIUM_TOL = 1e-12
PERIODICITY_TOL = 1e-9


def _batch_shape(x, y, z) -> Tuple[int, ...]:
    return np.broadcast_shapes(np.shape(x)[1:], np.shape(y)[1:], np.shape(z))


def evaluate_field(fn: VectorField, x, y, z, rows: Optional[int]) -> np.ndarray:
    batch = _batch_shape(x, y, z)
    out = np.asarray(fn(x, y, z), dtype=float)
    shape = batch if rows is None else (rows,) + batch
    return np.broadcast_to(out, shape)


def no_fast_coupling(x, y, z):
    """f2 for systems without a y-block (m = 0)."""
    return np.zeros((0,) + _batch_shape(x, y, z))


# -----------------------
# Systems
# -----------------------
@dataclass(frozen=True)
class SlowFastSystem:
    f1: VectorField
    f2: VectorField
    f3: VectorField
    epsilon: float
    period_T: float
    n: int
    m: int
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.period_T > 0:
            raise ValueError(f"period_T must be positive, got {self.period_T}")
        if self.n < 1 or self.m < 0:
            raise ValueError(f"need n >= 1 and m >= 0, got n={self.n}, m={self.m}")

    axis = "time_t"

    @property
    def dim(self) -> int:
        return self.n + self.m + 1

    def split(self, state: np.ndarray):
        return state[: self.n], state[self.n: self.n + self.m], state[self.n + self.m]

    def field(self, state: np.ndarray, t) -> np.ndarray:
        x, y, z = self.split(state)
        dx = evaluate_field(self.f1, x, y, z, self.n)
        dy = evaluate_field(self.f2, x, y, z, self.m)
        dz = evaluate_field(self.f3, x, y, z, None) / self.epsilon
        return np.concatenate([dx, dy, dz[None]], axis=0)


@dataclass(frozen=True)
class ReducedSystem:
    """dx/dz = eps*h1(x, y, z), dy/dz = eps*h2(x, y, z)."""

    h1: VectorField
    h2: VectorField
    epsilon: float
    period_T: float
    n: int
    m: int
    name: str = "custom"
    source: Optional[SlowFastSystem] = None

    axis = "fast_axis_z"

    @property
    def dim(self) -> int:
        return self.n + self.m

    def split(self, state: np.ndarray):
        return state[: self.n], state[self.n: self.n + self.m]

    def field(self, state: np.ndarray, z) -> np.ndarray:
        x, y = self.split(state)
        dx = evaluate_field(self.h1, x, y, z, self.n)
        dy = evaluate_field(self.h2, x, y, z, self.m)
        return self.epsilon * np.concatenate([dx, dy], axis=0)


def batched_rhs(system, members: int = 1, z_offset=None):
    """Flat-vector field for ode_core.integrate over a (dim, members) batch.

    z_offset (shape (members,)) shifts the independent variable per member,
    which lets members start at different z along one integration grid.
    """
    d = system.dim

    def rhs(flat, s):
        state = flat.reshape(d, members)
        at = s if z_offset is None else s + z_offset
        return system.field(state, at).reshape(-1)

    return rhs


# -----------------------
# Registry
# -----------------------
SYSTEM_REGISTRY: Dict[str, Callable[..., SlowFastSystem]] = {}


def register_system(name: str):
    def deco(factory):
        SYSTEM_REGISTRY[name] = factory
        return factory
    return deco


def build_system(name: str, **params) -> SlowFastSystem:
    if name not in SYSTEM_REGISTRY:
        raise LabError(f"unknown system {name!r}; registered: {sorted(SYSTEM_REGISTRY)}")
    return SYSTEM_REGISTRY[name](**params)


@register_system("example1")
def example1(epsilon: float = 0.01, drift_sign: float = 1.0) -> SlowFastSystem:
    """x' = -x - 0.2 x sin y - 2 x cos z,  y' = 2 x cos y + x sin z,  eps z' = 3 - sin x + cos y."""
    s = float(drift_sign)

    def f1(x, y, z):
        return s * (-x - 0.2 * x * np.sin(y) - 2.0 * x * np.cos(z))

    def f2(x, y, z):
        return 2.0 * x * np.cos(y) + x * np.sin(z)

    def f3(x, y, z):
        return 3.0 - np.sin(x[0]) + np.cos(y[0])

    return SlowFastSystem(f1, f2, f3, epsilon, 2.0 * np.pi, 1, 1, "example1",
                          {"epsilon": epsilon, "drift_sign": s})


def star_phase_factor(zeta, alpha):
    """2 sin(zeta + alpha) + sin(zeta - alpha); its amplitude is sqrt(5 + 4 cos 2alpha) <= 3."""
    return 2.0 * np.sin(zeta + alpha) + np.sin(zeta - alpha)


@register_system("kuramoto_star")
def kuramoto_star(omega: float = 1.0, A: float = 1.0, alpha: float = 0.9, u: float = 10.0) -> SlowFastSystem:
    """(mu, zeta) dynamics of the symmetric star with eps = 1/u; x = mu, no y-block, z = zeta."""
    if not u > 0:
        raise LabError(f"kuramoto_star needs detuning u > 0 to define eps = 1/u, got {u}")
    eps = 1.0 / u

    def f1(mu, y, zeta):
        return -A * (2.0 - mu) * mu * np.cos(zeta - alpha)

    def f3(mu, y, zeta):
        return 1.0 - eps * A * (1.0 - mu[0]) * star_phase_factor(zeta, alpha)

    return SlowFastSystem(f1, no_fast_coupling, f3, eps, 2.0 * np.pi, 1, 0, "kuramoto_star",
                          {"omega": omega, "A": A, "alpha": alpha, "u": u})


@register_system("linear_decay")
def linear_decay(epsilon: float = 1.0, rate: float = 1.0) -> SlowFastSystem:
    def f1(x, y, z):
        return -rate * x

    def f2(x, y, z):
        return 0.5 * x[:1] * np.cos(z)

    def f3(x, y, z):
        return 2.0 + np.cos(y[0])

    return SlowFastSystem(f1, f2, f3, epsilon, 2.0 * np.pi, 1, 1, "linear_decay",
                          {"epsilon": epsilon, "rate": rate})


def flip_fast_direction(sys: SlowFastSystem) -> SlowFastSystem:
    """z -> -z: a system with f3 <= -theta becomes one with f3 >= theta."""
    return SlowFastSystem(
        lambda x, y, z: sys.f1(x, y, -z),
        lambda x, y, z: sys.f2(x, y, -z),
        lambda x, y, z: -np.asarray(sys.f3(x, y, -z)),
        sys.epsilon, sys.period_T, sys.n, sys.m, f"{sys.name}_flipped", dict(sys.params),
    )


# -----------------------
# Sampling audits
# -----------------------
@dataclass(frozen=True)
class DomainBox:
    x_bounds: Sequence[Tuple[float, float]]
    y_bounds: Sequence[Tuple[float, float]] = ()
    z_bounds: Optional[Tuple[float, float]] = None

    @classmethod
    def ball_box(cls, n: int, m: int, radius: float, y_half_width: float = np.pi) -> "DomainBox":
        return cls(((-radius, radius),) * n, ((-y_half_width, y_half_width),) * m)


def sample_domain(box: DomainBox, period_T: float, samples: int, seed: int = 0):
    """Latin-hypercube points plus the box corners, as (x (n,S), y (m,S), z (S,))."""
    z_bounds = box.z_bounds if box.z_bounds is not None else (0.0, period_T)
    bounds = list(box.x_bounds) + list(box.y_bounds) + [tuple(z_bounds)]
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    d = len(bounds)
    unit = qmc.LatinHypercube(d=d, seed=make_rng(seed)).random(max(int(samples), 1))
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
    pts = qmc.scale(np.vstack([unit, corners]), lo, hi) if np.all(hi > lo) else lo + np.vstack([unit, corners]) * (hi - lo)
    pts = pts.T
    n = len(box.x_bounds)
    m = len(box.y_bounds)
    return pts[:n], pts[n:n + m], pts[n + m]


@dataclass(frozen=True)
class FastRateReport:
    theta_lower: float
    violated: bool
    witness: dict
    fast_rate_lower: float
    samples: int


def verify_fast_rate_bound(sys: SlowFastSystem, domain: DomainBox, samples: int = LHS_SAMPLES, seed: int = 0) -> FastRateReport:
    """Sampled lower bound of f3; a certificate only up to the sampling resolution."""
    x, y, z = sample_domain(domain, sys.period_T, samples, seed)
    f3 = evaluate_field(sys.f3, x, y, z, None)
    if not np.all(np.isfinite(f3)):
        bad = int(np.flatnonzero(~np.isfinite(f3))[0])
        raise NonFiniteValueError(f"f3 is not finite at sample {bad}: x={x[:, bad]}, y={y[:, bad]}, z={z[bad]}")
    i = int(np.argmin(f3))
    theta = float(f3[i])
    witness = {"x": x[:, i].tolist(), "y": y[:, i].tolist(), "z": float(z[i])}
    if theta <= 0:
        warnings.warn(f"f3 reaches {theta:.3g} <= 0 on the sampled domain of {sys.name}; the t -> z change is invalid there")
    return FastRateReport(theta, theta <= 0, witness, theta / sys.epsilon, int(len(z)))


def reduce_to_fast_axis(sys: SlowFastSystem) -> ReducedSystem:
    def _guarded_f3(x, y, z):
        f3 = evaluate_field(sys.f3, x, y, z, None)
        if np.any(np.abs(f3) < DIVISION_GUARD):
            raise FastRateViolation(f"|f3| < {DIVISION_GUARD:g} during reduction of {sys.name}")
        return f3

    def h1(x, y, z):
        return evaluate_field(sys.f1, x, y, z, sys.n) / _guarded_f3(x, y, z)

    def h2(x, y, z):
        return evaluate_field(sys.f2, x, y, z, sys.m) / _guarded_f3(x, y, z)

    return ReducedSystem(h1, h2, sys.epsilon, sys.period_T, sys.n, sys.m, sys.name, sys)


@dataclass(frozen=True)
class PartialEquilibriumReport:
    residual_f1: float
    residual_f2: float
    passed: bool


def check_partial_equilibrium(sys, domain: Optional[DomainBox] = None, samples: int = 4096, seed: int = 0) -> PartialEquilibriumReport:
    """max ||f1(0,y,z)|| and ||f2(0,y,z)|| over sampled (y, z); works for reduced systems too."""
    box = domain or DomainBox(((0.0, 0.0),) * sys.n, ((-np.pi, np.pi),) * sys.m)
    _, y, z = sample_domain(box, sys.period_T, samples, seed)
    x = np.zeros((sys.n, len(z)))
    g1, g2 = (sys.f1, sys.f2) if isinstance(sys, SlowFastSystem) else (sys.h1, sys.h2)
    r1 = float(np.max(np.linalg.norm(evaluate_field(g1, x, y, z, sys.n), axis=0)))
    r2 = float(np.max(np.linalg.norm(evaluate_field(g2, x, y, z, sys.m), axis=0))) if sys.m else 0.0
    return PartialEquilibriumReport(r1, r2, r1 < EQUILIBRIUM_TOL and r2 < EQUILIBRIUM_TOL)


@dataclass(frozen=True)
class PeriodicityReport:
    max_deviation: float
    passed: bool


def check_periodicity(sys, domain: DomainBox, samples: int = 4096, seed: int = 0) -> PeriodicityReport:
    x, y, z = sample_domain(domain, sys.period_T, samples, seed)
    fns = [(sys.f1, sys.n), (sys.f2, sys.m), (sys.f3, None)] if isinstance(sys, SlowFastSystem) \
        else [(sys.h1, sys.n), (sys.h2, sys.m)]
    dev = 0.0
    for fn, rows in fns:
        if rows == 0:
            continue
        a = evaluate_field(fn, x, y, z, rows)
        b = evaluate_field(fn, x, y, z + sys.period_T, rows)
        dev = max(dev, float(np.max(np.abs(a - b))))
    return PeriodicityReport(dev, dev < PERIODICITY_TOL)


# -----------------------
# Simulation in t and in z
# -----------------------
def _stack(*blocks) -> Tuple[np.ndarray, int]:
    arrs = [np.atleast_1d(np.asarray(b, dtype=float)) for b in blocks]
    members = max((a.shape[1] if a.ndim == 2 else 1) for a in arrs)
    rows = [np.broadcast_to(a.reshape(a.shape[0], -1) if a.ndim == 2 else a[:, None], (a.shape[0], members)) for a in arrs]
    return np.concatenate(rows, axis=0), members


def full_system_config(sys: SlowFastSystem, cfg: IntegratorConfig) -> IntegratorConfig:
    """Fixed steps are capped at eps*T/50 so the fast phase stays resolved."""
    if cfg.scheme == "rk4_fixed":
        return cfg.with_step(min(cfg.step, sys.epsilon * sys.period_T / 50.0))
    return cfg


def simulate_full(sys: SlowFastSystem, x0, y0, z0, horizon: float, cfg: IntegratorConfig, t0: float = 0.0) -> Trajectory:
    """Full slow-fast simulation in t; x0 may be (n,) or (n, members) for a batch."""
    state, members = _stack(x0, np.reshape(y0, (sys.m, -1)) if sys.m else np.zeros((0, 1)), np.atleast_1d(z0)[None])
    traj = integrate(batched_rhs(sys, members), state.ravel(), (t0, t0 + horizon), full_system_config(sys, cfg), "time_t")
    traj.meta.update({"members": members, "system": sys.name})
    return traj


def simulate_reduced(red: ReducedSystem, x0, y0, z0: float, horizon: float, cfg: IntegratorConfig) -> Trajectory:
    state, members = _stack(x0, np.reshape(y0, (red.m, -1)) if red.m else np.zeros((0, 1)))
    traj = integrate(batched_rhs(red, members), state.ravel(), (z0, z0 + horizon), cfg, "fast_axis_z")
    traj.meta.update({"members": members, "system": red.name})
    return traj


@dataclass(frozen=True)
class AxisEquivalenceReport:
    max_deviation: float
    min_dz: float
    z_end: float


def axis_equivalence_residual(sys: SlowFastSystem, x0, y0, z0: float, horizon_t: float, cfg: IntegratorConfig) -> AxisEquivalenceReport:
    """Resample the t-trajectory at its own z(t) against the z-trajectory of the reduced system."""
    t_traj = simulate_full(sys, x0, y0, z0, horizon_t, cfg)
    z_path = t_traj.states[:, sys.n + sys.m]
    dz = np.diff(z_path)
    z_end = float(z_path[-1])
    z_traj = simulate_reduced(reduce_to_fast_axis(sys), x0, y0, z0, z_end - z0, cfg)
    query = np.clip(z_path, z_traj.times[0], z_traj.times[-1])
    on_z = sample_at(z_traj, query)
    dev = float(np.max(np.abs(on_z - t_traj.states[:, : sys.n + sys.m])))
    return AxisEquivalenceReport(dev, float(np.min(dz)), z_end)

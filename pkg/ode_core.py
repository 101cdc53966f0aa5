"""
Deterministic ODE integration for the lab.

Two schemes:
  rk4_fixed      classical 4-stage Runge-Kutta on a uniform grid
  rk45_adaptive  Runge-Kutta-Fehlberg 4(5) pair, fifth-order solution
                 propagated, PI step-size control

Every call returns an immutable Trajectory that stores the right-hand side
at each node next to the state, so dense output is a cubic Hermite spline
with no further evaluations of the vector field.

Vector fields take (state, s) where s is the independent variable (t or z).

Usage:
  traj = integrate(lambda x, t: -x, np.array([1.0]), (0.0, 1.0),
                   IntegratorConfig(scheme="rk4_fixed", step=1e-3))
  x_half = sample_at(traj, 0.5)
"""
import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, List, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import CubicHermiteSpline

from lab_utils import (
    ConfigValidationError,
    NonFiniteStateError,
    OutOfRangeQuery,
    StepLimitExceeded,
    atomic_write_csv,
)

Field = Callable[[np.ndarray, float], np.ndarray]

AXES = ("time_t", "fast_axis_z")
SCHEMES = ("rk4_fixed", "rk45_adaptive")


# -----------------------
# Config
# -----------------------
@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "rk45_adaptive"
    step: float = 1e-2
    rtol: float = 1e-8
    atol: float = 1e-10
    max_steps: int = 1_000_000

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ConfigValidationError(errors)

    def problems(self) -> List[str]:
        errors = []
        if self.scheme not in SCHEMES:
            errors.append(f"integrator.scheme must be one of {list(SCHEMES)}, got {self.scheme!r}")
        if not (isinstance(self.step, (int, float)) and self.step > 0):
            errors.append(f"integrator.step must be > 0, got {self.step!r}")
        if not (isinstance(self.rtol, (int, float)) and self.rtol > 0):
            errors.append(f"integrator.rtol must be > 0, got {self.rtol!r}")
        if not (isinstance(self.atol, (int, float)) and self.atol > 0):
            errors.append(f"integrator.atol must be > 0, got {self.atol!r}")
        if not (isinstance(self.max_steps, int) and self.max_steps >= 1):
            errors.append(f"integrator.max_steps must be an integer >= 1, got {self.max_steps!r}")
        return errors

    def with_step(self, step: float) -> "IntegratorConfig":
        return replace(self, step=float(step))

    def to_dict(self) -> dict:
        return asdict(self)


# -----------------------
# Trajectory
# -----------------------
@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution: times (N,), states (N, d) and the vector field at each node."""

    times: np.ndarray
    states: np.ndarray
    derivatives: np.ndarray
    independent_axis: str = "time_t"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        derivs = np.asarray(self.derivatives, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
            derivs = derivs.reshape(states.shape)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("a trajectory needs at least two time stamps")
        if states.shape[0] != len(times) or derivs.shape != states.shape or states.shape[1] < 1:
            raise ValueError(f"shape mismatch: times {times.shape}, states {states.shape}, derivatives {derivs.shape}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if self.independent_axis not in AXES:
            raise ValueError(f"independent_axis must be one of {AXES}")
        for arr in (times, states, derivs):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "derivatives", derivs)

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def span(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @cached_property
    def _spline(self) -> CubicHermiteSpline:
        return CubicHermiteSpline(self.times, self.states, self.derivatives, axis=0)

    def sample_at(self, t_query):
        return sample_at(self, t_query)

    def norms(self, selector: Sequence[int]) -> np.ndarray:
        return np.linalg.norm(self.states[:, list(selector)], axis=1)

    def select(self, selector: Sequence[int]) -> "Trajectory":
        idx = list(selector)
        return Trajectory(self.times, self.states[:, idx], self.derivatives[:, idx], self.independent_axis, dict(self.meta))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.states, columns=[f"x{i}" for i in range(self.dim)])
        df.insert(0, "axis", self.times)
        return df

    def to_csv(self, path: str):
        atomic_write_csv(path, self.to_frame())


def sample_at(traj: Trajectory, t_query):
    """Cubic Hermite value at t_query (scalar or array); exact at stored nodes."""
    tq = np.asarray(t_query, dtype=float)
    scalar = tq.ndim == 0
    tq = np.atleast_1d(tq)
    lo, hi = traj.span
    if np.any(tq < lo) or np.any(tq > hi) or not np.all(np.isfinite(tq)):
        raise OutOfRangeQuery(f"query outside [{lo:.6g}, {hi:.6g}]")
    out = np.asarray(traj._spline(tq), dtype=float)
    idx = np.clip(np.searchsorted(traj.times, tq), 0, len(traj.times) - 1)
    on_node = traj.times[idx] == tq
    out[on_node] = traj.states[idx[on_node]]
    return out[0] if scalar else out


def unstack(traj: Trajectory, members: int) -> List[Trajectory]:
    """Split a batched trajectory whose state was laid out as (d, members) row-major."""
    n_nodes, flat = traj.states.shape
    if flat % members:
        raise ValueError(f"state width {flat} is not a multiple of {members} members")
    d = flat // members
    states = traj.states.reshape(n_nodes, d, members)
    derivs = traj.derivatives.reshape(n_nodes, d, members)
    return [
        Trajectory(traj.times, states[:, :, j], derivs[:, :, j], traj.independent_axis, {**traj.meta, "member": j})
        for j in range(members)
    ]


# -----------------------
# Steppers
# -----------------------
def _rk4_step(rhs: Field, y: np.ndarray, s: float, h: float, k1: np.ndarray) -> np.ndarray:
    k2 = rhs(y + 0.5 * h * k1, s + 0.5 * h)
    k3 = rhs(y + 0.5 * h * k2, s + 0.5 * h)
    k4 = rhs(y + h * k3, s + h)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Fehlberg 4(5) tableau
_C = np.array([0.0, 1.0 / 4.0, 3.0 / 8.0, 12.0 / 13.0, 1.0, 1.0 / 2.0])
_A = (
    (),
    (1.0 / 4.0,),
    (3.0 / 32.0, 9.0 / 32.0),
    (1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0),
    (439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0),
    (-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0),
)
_B5 = (16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0)
_E = (1.0 / 360.0, 0.0, -128.0 / 4275.0, -2197.0 / 75240.0, 1.0 / 50.0, 2.0 / 55.0)

# PI controller for a fourth-order error estimate
_SAFETY = 0.9
_ALPHA = 0.7 / 5.0
_BETA = 0.4 / 5.0
_FAC_MIN, _FAC_MAX = 0.2, 5.0


def _rkf45_step(rhs: Field, y: np.ndarray, s: float, h: float, k1: np.ndarray):
    ks = [k1]
    for i in range(1, 6):
        yi = y + h * sum(a * k for a, k in zip(_A[i], ks))
        ks.append(rhs(yi, s + _C[i] * h))
    y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b)
    err = h * sum(e * k for e, k in zip(_E, ks) if e)
    return y_new, err


def _check_finite(y: np.ndarray, at: float):
    if not np.all(np.isfinite(y)):
        raise NonFiniteStateError(int(np.flatnonzero(~np.isfinite(y))[0]), at)


def _initial_step(rhs: Field, y0: np.ndarray, s0: float, f0: np.ndarray, cfg: IntegratorConfig, span: float) -> float:
    sc = cfg.atol + cfg.rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = rhs(y0 + h0 * f0, s0 + h0)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return float(min(100.0 * h0, h1, span))


# -----------------------
# Integrate
# -----------------------
def integrate(rhs: Field, state0, span, cfg: IntegratorConfig, axis: str = "time_t",
              endpoints_only: bool = False) -> Trajectory:
    """Integrate rhs from state0 over span = (a, b) with b > a.

    endpoints_only keeps just the first and last node, for wide batches where
    only the final state is wanted.
    """
    a, b = float(span[0]), float(span[1])
    if not b > a:
        raise ValueError(f"span must satisfy b > a, got [{a}, {b}]")
    y = np.array(state0, dtype=float).ravel()
    _check_finite(y, a)
    f = np.asarray(rhs(y, a), dtype=float).ravel()
    if f.shape != y.shape:
        raise ValueError(f"rhs returned shape {f.shape} for state of shape {y.shape}")
    _check_finite(f, a)

    times, states, derivs = [a], [y], [f]
    if cfg.scheme == "rk4_fixed":
        n = max(1, math.ceil((b - a) / cfg.step - 1e-9))
        if n > cfg.max_steps:
            raise StepLimitExceeded(cfg.max_steps, a)
        h = (b - a) / n
        for i in range(n):
            s = a + i * h
            y = _rk4_step(rhs, y, s, h, f)
            s_new = b if i == n - 1 else a + (i + 1) * h
            _check_finite(y, s_new)
            f = np.asarray(rhs(y, s_new), dtype=float).ravel()
            _check_finite(f, s_new)
            if not endpoints_only or i == n - 1:
                times.append(s_new)
                states.append(y)
                derivs.append(f)
        return Trajectory(np.array(times), np.array(states), np.array(derivs), axis, {"scheme": cfg.scheme, "steps": n})

    s = a
    h = _initial_step(rhs, y, s, f, cfg, b - a)
    err_prev = 1e-4
    attempts = accepted = 0
    while s < b:
        if attempts >= cfg.max_steps:
            raise StepLimitExceeded(cfg.max_steps, s)
        attempts += 1
        last = s + h >= b - 1e-12 * max(1.0, abs(b))
        if last:
            h = b - s
        y_new, err_vec = _rkf45_step(rhs, y, s, h, f)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.max(np.abs(err_vec) / scale)) if np.all(np.isfinite(err_vec)) else np.inf
        if err <= 1.0:
            _check_finite(y_new, s + h)
            s = b if last else s + h
            y = y_new
            f = np.asarray(rhs(y, s), dtype=float).ravel()
            _check_finite(f, s)
            if not endpoints_only or s == b:
                times.append(s)
                states.append(y)
                derivs.append(f)
            accepted += 1
            fac = _SAFETY * max(err, 1e-10) ** (-_ALPHA) * err_prev ** _BETA
            h *= min(_FAC_MAX, max(_FAC_MIN, fac))
            err_prev = max(err, 1e-4)
        else:
            if not np.isfinite(err):
                fac = _FAC_MIN
            else:
                fac = max(_FAC_MIN, _SAFETY * err ** (-1.0 / 5.0))
            h *= fac
            if h <= 1e-14 * max(1.0, abs(s)):
                _check_finite(y_new, s + h)
                raise StepLimitExceeded(cfg.max_steps, s)
    return Trajectory(
        np.array(times), np.array(states), np.array(derivs), axis,
        {"scheme": cfg.scheme, "steps": accepted, "attempts": attempts},
    )


def reverse_field(rhs: Field) -> Field:
    """Vector field of the time-reversed flow in s' = -s."""
    return lambda y, s: -np.asarray(rhs(y, -s))


def advance(rhs: Field, state0, s0: float, ds: float, cfg: IntegratorConfig, axis: str = "time_t") -> np.ndarray:
    """Endpoint of the flow after ds (negative ds integrates backward)."""
    if ds == 0:
        return np.array(state0, dtype=float).ravel()
    if ds > 0:
        return integrate(rhs, state0, (s0, s0 + ds), cfg, axis, endpoints_only=True).states[-1]
    return integrate(reverse_field(rhs), state0, (-s0, -s0 - ds), cfg, axis, endpoints_only=True).states[-1]

"""
Remote synchronization in a three-node Kuramoto-Sakaguchi star.

    dtheta_i/dt = omega + A_i sin(theta_0 - theta_i - alpha),                  i = 1, 2
    dtheta_0/dt = omega + sum_j A_j sin(theta_j - theta_0 - alpha) + u

The peripherals 1 and 2 are remotely synchronized when theta_1 = theta_2
(the manifold M). The distance to M is measured by mu = 1 - r, where
r e^{i zeta} = (1/2) sum_j e^{i(theta_0 - theta_j)}. For symmetric couplings
(mu, zeta) obey a closed two-dimensional system; with u > 3A it is a
slow-fast system in the fast angle zeta with eps = 1/u, and averaging over
zeta gives the decay rate of mu.

Phases are kept unwrapped; wrapping happens only for distances and display.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from averaging import composite_gauss_legendre
from lab_utils import DegenerateParameterError
from ode_core import IntegratorConfig, Trajectory, integrate
from slowfast import star_phase_factor
from stability_lab import PRECISE, DecayFit, fit_exponential_decay

OBSERVABLE_COLUMNS = ["t", "theta0", "theta1", "theta2", "z1", "z2", "r", "zeta", "mu",
                      "dist_euclid", "v1", "v2", "cycle_residual"]
DEGENERATE_R = 1e-12
THRESHOLD_ALPHA = math.pi / 3.0


@dataclass(frozen=True)
class KuramotoStarParams:
    omega: float = 1.0
    A1: float = 1.0
    A2: float = 1.0
    alpha: float = 0.9
    u: float = 0.0

    def __post_init__(self):
        if not (self.A1 > 0 and self.A2 > 0):
            raise DegenerateParameterError(f"couplings must be positive, got A1={self.A1}, A2={self.A2}")
        if not 0.0 <= self.alpha <= math.pi / 2:
            raise DegenerateParameterError(f"alpha must lie in [0, pi/2], got {self.alpha}")
        if self.u < 0:
            raise DegenerateParameterError(f"detuning u must be >= 0, got {self.u}")

    @property
    def symmetric(self) -> bool:
        return self.A1 == self.A2

    @property
    def A(self) -> float:
        if not self.symmetric:
            raise DegenerateParameterError(f"the (mu, zeta) reduction needs A1 == A2, got {self.A1} != {self.A2}")
        return self.A1

    def to_dict(self) -> dict:
        return {"omega": self.omega, "A1": self.A1, "A2": self.A2, "alpha": self.alpha, "u": self.u}


def wrap_angle(a):
    """Into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def star_rhs(p: KuramotoStarParams, theta) -> np.ndarray:
    """Phase rates; theta has shape (3, ...) and the rates broadcast the same way."""
    th0, th1, th2 = theta[0], theta[1], theta[2]
    d1 = p.omega + p.A1 * np.sin(th0 - th1 - p.alpha)
    d2 = p.omega + p.A2 * np.sin(th0 - th2 - p.alpha)
    d0 = p.omega + p.A1 * np.sin(th1 - th0 - p.alpha) + p.A2 * np.sin(th2 - th0 - p.alpha) + p.u
    return np.stack([d0, d1, d2])


def star_field(p: KuramotoStarParams, members: int = 1):
    def rhs(flat, t):
        return star_rhs(p, flat.reshape(3, members)).reshape(-1)
    return rhs


# -----------------------
# Observables
# -----------------------
@dataclass(frozen=True)
class PolarObservables:
    z1: float
    z2: float
    r: float
    zeta: float
    mu: float
    degenerate: bool = False


def _mu_from_gap(gap):
    # 1 - |cos(gap/2)| written without cancellation
    half = 0.5 * wrap_angle(gap)
    return 2.0 * np.sin(0.5 * half) ** 2


def polar_observables(theta, previous_zeta: Optional[float] = None) -> PolarObservables:
    theta = np.asarray(theta, dtype=float)
    x1, x2 = theta[0] - theta[1], theta[0] - theta[2]
    z1 = 0.5 * (math.cos(x1) + math.cos(x2))
    z2 = 0.5 * (math.sin(x1) + math.sin(x2))
    mu = float(_mu_from_gap(theta[1] - theta[2]))
    r = 1.0 - mu
    if r < DEGENERATE_R:
        zeta = previous_zeta if previous_zeta is not None else float("nan")
        return PolarObservables(z1, z2, r, zeta, mu, True)
    zeta = math.atan2(z2, z1)
    if previous_zeta is not None:
        zeta = previous_zeta + float(wrap_angle(zeta - previous_zeta))
    return PolarObservables(z1, z2, r, zeta, mu)


def manifold_distance(theta) -> Dict[str, float]:
    gap = wrap_angle(theta[1] - theta[2])
    return {"euclidean": float(abs(gap) / math.sqrt(2.0)), "mu": float(_mu_from_gap(theta[1] - theta[2]))}


def theta_from_mu_zeta(mu: float, zeta: float, theta0: float = 0.0) -> np.ndarray:
    """A phase triple with the given (mu, zeta): peripherals at theta0 - zeta -/+ arccos(1 - mu)."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    a = math.acos(1.0 - mu)
    return np.array([theta0, theta0 - zeta - a, theta0 - zeta + a])


# -----------------------
# (mu, zeta) reduction and its average
# -----------------------
def mu_zeta_rhs(mu, zeta, p: KuramotoStarParams) -> Tuple[np.ndarray, np.ndarray]:
    A = p.A
    dmu = -A * (1.0 - (1.0 - mu) ** 2) * np.cos(zeta - p.alpha)
    dzeta = p.u - A * (1.0 - mu) * star_phase_factor(zeta, p.alpha)
    return dmu, dzeta


def mu_zeta_field(p: KuramotoStarParams, members: int = 1):
    def rhs(flat, t):
        mu, zeta = flat.reshape(2, members)
        return np.concatenate(mu_zeta_rhs(mu, zeta, p))
    return rhs


def phase_factor_amplitude_sq(alpha: float) -> float:
    return 5.0 + 4.0 * math.cos(2.0 * alpha)


def _fast_profile(mu_hat, zeta, p: KuramotoStarParams):
    """u * dmu/dzeta along the fast angle, i.e. the integrand that is averaged."""
    dmu, dzeta = mu_zeta_rhs(mu_hat, zeta, p)
    return p.u * dmu / dzeta


def _g(mu_hat, p: KuramotoStarParams):
    A = p.A
    root = p.u ** 2 - A ** 2 * (1.0 - mu_hat) ** 2 * phase_factor_amplitude_sq(p.alpha)
    return 1.0 / p.u - 1.0 / np.sqrt(root)


def rate_constant(p: KuramotoStarParams, xi: float = 0.5) -> float:
    A = p.A
    return (4.0 * math.pi / 9.0) * (1.0 / math.sqrt(p.u ** 2 - 9.0 * A ** 2 * (1.0 - xi) ** 2) - 1.0 / p.u)


@dataclass(frozen=True)
class AveragedMuReport:
    mu_hat: np.ndarray
    f_av: np.ndarray
    published_f_av: np.ndarray
    quadrature: np.ndarray
    mean: np.ndarray
    c: float
    xi: float
    negative_ok: bool
    rate_bound_ok: bool
    published_rate_bound_ok: bool


def averaged_mu_rhs(mu_hat, p: KuramotoStarParams, xi: float = 0.5, nodes: int = 128) -> AveragedMuReport:
    """Closed-form f_av (the integral over one 2*pi period of zeta) next to its quadrature.

    f_av = 4 pi (2 - m) m sin(2 alpha) u^2 g(m) / ((1 - m)(5 + 4 cos 2 alpha)),
    g(m) = 1/u - 1/sqrt(u^2 - A^2 (1 - m)^2 (5 + 4 cos 2 alpha)).
    The form without the u^2 sin(2 alpha) factor is kept as published_f_av.
    Sign and rate checks use mu_hat in (0, 1); the rate bound only mu_hat <= 0.5.
    """
    A = p.A
    if not p.u > 3.0 * A:
        raise DegenerateParameterError(f"averaging in zeta needs u > 3A, got u={p.u}, A={A}")
    if not 0.0 < xi < 1.0:
        raise ValueError(f"xi must lie in (0, 1), got {xi}")
    m = np.atleast_1d(np.asarray(mu_hat, dtype=float))
    if np.any(m < 0) or np.any(m >= 1):
        raise ValueError("mu_hat must lie in [0, 1)")
    R2 = phase_factor_amplitude_sq(p.alpha)
    g = _g(m, p)
    published = 4.0 * math.pi * (2.0 - m) * m * g / ((1.0 - m) * R2)
    f_av = published * p.u ** 2 * math.sin(2.0 * p.alpha)

    zeta, wts = composite_gauss_legendre(0.0, 2.0 * math.pi, nodes)
    quad = _fast_profile(m[:, None], zeta[None, :], p) @ wts

    c = rate_constant(p, xi)
    inside = (m > 0) & (m < 1)
    low = inside & (m <= 0.5)
    return AveragedMuReport(
        m, f_av, published, quad, quad / (2.0 * math.pi), c, xi,
        bool(np.all(f_av[inside] < 0) and np.all(published[inside] < 0)),
        bool(np.all(f_av[low] < -c * m[low])),
        bool(np.all(published[low] < -c * m[low])),
    )


def zeta_rate_lower_bound(p: KuramotoStarParams, mu_points: int = 101, zeta_points: int = 721) -> Dict[str, float]:
    """min dzeta/dt over a dense [0, 1] x [0, 2 pi) grid against u - 3A."""
    mu, zeta = np.meshgrid(np.linspace(0.0, 1.0, mu_points), np.linspace(0.0, 2.0 * np.pi, zeta_points, endpoint=False))
    _, dzeta = mu_zeta_rhs(mu, zeta, p)
    low = float(np.min(dzeta))
    bound = p.u - 3.0 * p.A
    return {"min_rate": low, "bound": bound, "ok": bool(low >= bound - 1e-12)}


# -----------------------
# Phase-locked equilibria
# -----------------------
def phase_locked_equilibria(alpha: float) -> Dict[str, float]:
    c = -math.atan2(math.sin(alpha), 3.0 * math.cos(alpha))
    return {"c_alpha": c, "c_prime_alpha": math.pi + c}


def locked_jacobian(x: float, alpha: float, A: float) -> np.ndarray:
    d = math.cos(x + alpha) + math.cos(x - alpha)
    o = math.cos(x + alpha)
    return -A * np.array([[d, o], [o, d]])


@dataclass(frozen=True)
class EquilibriumClassification:
    alpha: float
    A: float
    c_alpha: float
    c_prime_alpha: float
    eig_M1: Tuple[float, float]
    eig_M1prime: Tuple[float, float]
    verdict_M1: str
    verdict_M1prime: str
    threshold_alpha: float = THRESHOLD_ALPHA

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def linearized_classification(alpha: float, A: float = 1.0) -> EquilibriumClassification:
    if not A > 0:
        raise DegenerateParameterError(f"A must be positive, got {A}")
    eq = phase_locked_equilibria(alpha)
    eigs = {}
    for key in ("c_alpha", "c_prime_alpha"):
        vals = np.linalg.eigvalsh(locked_jacobian(eq[key], alpha, A))
        eigs[key] = (float(vals[0]), float(vals[1]))

    def verdict(pair):
        return "stable" if max(pair) < 0 else "unstable"

    return EquilibriumClassification(alpha, A, eq["c_alpha"], eq["c_prime_alpha"], eigs["c_alpha"],
                                     eigs["c_prime_alpha"], verdict(eigs["c_alpha"]), verdict(eigs["c_prime_alpha"]))


# -----------------------
# Frequency limit cycle
# -----------------------
def limit_cycle_residual(v1, v2, p: KuramotoStarParams):
    """(v1 + v2 - 3w - u)^2 / (16 A^2 sin^2 a) + (v1 - v2 - w + u)^2 / (16 A^2 cos^2 a) - 1."""
    A = p.A
    s2, c2 = math.sin(p.alpha) ** 2, math.cos(p.alpha) ** 2
    if s2 < 1e-15 or c2 < 1e-15:
        raise DegenerateParameterError(f"the frequency ellipse degenerates at alpha={p.alpha}")
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    return ((v1 + v2 - 3.0 * p.omega - p.u) ** 2 / (16.0 * A ** 2 * s2)
            + (v1 - v2 - p.omega + p.u) ** 2 / (16.0 * A ** 2 * c2) - 1.0)


# -----------------------
# Experiments
# -----------------------
def simulate_star(p: KuramotoStarParams, theta0, horizon: float, cfg: IntegratorConfig = PRECISE) -> Trajectory:
    theta0 = np.asarray(theta0, dtype=float)
    members = 1 if theta0.ndim == 1 else theta0.shape[1]
    traj = integrate(star_field(p, members), theta0.ravel(), (0.0, horizon), cfg, "time_t")
    traj.meta.update({"members": members, "params": p.to_dict()})
    return traj


def observables_frame(traj: Trajectory, p: KuramotoStarParams) -> pd.DataFrame:
    """Per-node observables with zeta unwrapped along the trajectory."""
    th = traj.states.T
    dth = traj.derivatives.T
    x1, x2 = th[0] - th[1], th[0] - th[2]
    z1 = 0.5 * (np.cos(x1) + np.cos(x2))
    z2 = 0.5 * (np.sin(x1) + np.sin(x2))
    mu = _mu_from_gap(th[1] - th[2])
    r = 1.0 - mu
    zeta = pd.Series(np.where(r < DEGENERATE_R, np.nan, np.arctan2(z2, z1))).ffill().to_numpy()
    finite = np.isfinite(zeta)
    zeta[finite] = np.unwrap(zeta[finite])
    v1 = dth[1] + dth[2]
    v2 = dth[0]
    try:
        cycle = limit_cycle_residual(v1, v2, p)
    except DegenerateParameterError:
        cycle = np.full_like(v1, np.nan)
    return pd.DataFrame({
        "t": traj.times, "theta0": th[0], "theta1": th[1], "theta2": th[2],
        "z1": z1, "z2": z2, "r": r, "zeta": zeta, "mu": mu,
        "dist_euclid": np.abs(wrap_angle(th[1] - th[2])) / math.sqrt(2.0),
        "v1": v1, "v2": v2, "cycle_residual": cycle,
    }, columns=OBSERVABLE_COLUMNS)


def _scalar_series(traj: Trajectory, values: np.ndarray, rates: np.ndarray) -> Trajectory:
    return Trajectory(traj.times, values[:, None], rates[:, None], traj.independent_axis)


def mu_trajectory(traj: Trajectory) -> Trajectory:
    th, dth = traj.states.T, traj.derivatives.T
    half = 0.5 * wrap_angle(th[1] - th[2])
    return _scalar_series(traj, _mu_from_gap(th[1] - th[2]), 0.5 * np.sin(half) * (dth[1] - dth[2]))


def gap_trajectory(traj: Trajectory) -> Trajectory:
    th, dth = traj.states.T, traj.derivatives.T
    gap = wrap_angle(th[1] - th[2])
    return _scalar_series(traj, np.abs(gap), np.sign(gap) * (dth[1] - dth[2]))


@dataclass(frozen=True, eq=False)
class RemoteSyncReport:
    params: KuramotoStarParams
    theta: Trajectory = field(repr=False)
    observables: pd.DataFrame = field(repr=False)
    mu_fit: Optional[DecayFit]
    gap_fit: Optional[DecayFit]
    fit_errors: Dict[str, str]
    gap_growth: float
    classification: Optional[EquilibriumClassification]
    averaged_audit: Optional[AveragedMuReport] = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "params": self.params.to_dict(),
            "mu_fit": self.mu_fit.to_dict() if self.mu_fit else None,
            "gap_fit": self.gap_fit.to_dict() if self.gap_fit else None,
            "fit_errors": dict(self.fit_errors),
            "gap_growth": self.gap_growth,
            "classification": self.classification.to_dict() if self.classification else None,
        }
        if self.averaged_audit is not None:
            out["averaged_audit"] = {
                "negative_ok": self.averaged_audit.negative_ok,
                "rate_bound_ok": self.averaged_audit.rate_bound_ok,
                "published_rate_bound_ok": self.averaged_audit.published_rate_bound_ok,
                "c": self.averaged_audit.c,
            }
        return out


def simulate_remote_sync_experiment(p: KuramotoStarParams, theta0, horizon: float,
                                    cfg: IntegratorConfig = PRECISE,
                                    transient_fraction: float = 0.1) -> RemoteSyncReport:
    traj = simulate_star(p, theta0, horizon, cfg)
    obs = observables_frame(traj, p)
    fits: Dict[str, Optional[DecayFit]] = {}
    errors: Dict[str, str] = {}
    for key, series in (("mu", mu_trajectory(traj)), ("gap", gap_trajectory(traj))):
        try:
            fits[key] = fit_exponential_decay(series, [0], transient_fraction)
        except Exception as e:
            fits[key] = None
            errors[key] = f"{type(e).__name__}: {e}"
    gap = np.abs(wrap_angle(traj.states[:, 1] - traj.states[:, 2]))
    growth = float(np.max(gap) / gap[0]) if gap[0] > 0 else float("inf") if np.max(gap) > 0 else 1.0

    classification = audit = None
    if p.symmetric and 0.0 < p.alpha < math.pi / 2:
        classification = linearized_classification(p.alpha, p.A)
    if p.symmetric and p.u > 3.0 * p.A:
        audit = averaged_mu_rhs(np.linspace(0.0, 0.99, 100), p)
    return RemoteSyncReport(p, traj, obs, fits["mu"], fits["gap"], errors, growth, classification, audit)


def frequency_gap(traj: Trajectory, p: KuramotoStarParams, late_fraction: float = 0.5) -> float:
    """Late-window mean of dtheta0/dt - (dtheta1/dt + dtheta2/dt)/2."""
    t = traj.times
    late = t >= t[0] + (1.0 - late_fraction) * (t[-1] - t[0])
    d = traj.derivatives[late]
    gap = d[:, 0] - 0.5 * (d[:, 1] + d[:, 2])
    return float(trapezoid(gap, t[late]) / (t[late][-1] - t[late][0]))


def unequal_coupling_gap_check(p: KuramotoStarParams, theta0, horizon: float = 500.0,
                               cfg: IntegratorConfig = PRECISE, bound: float = 0.2) -> Dict[str, float]:
    """With A1 != A2 the peripheral gap settles near a small constant instead of 0."""
    traj = simulate_star(p, theta0, horizon, cfg)
    gap = np.abs(wrap_angle(traj.states[:, 1] - traj.states[:, 2]))
    late = traj.times >= 0.75 * horizon
    return {"max_gap": float(np.max(gap)), "late_mean_gap": float(np.mean(gap[late])),
            "late_min_gap": float(np.min(gap[late])), "bounded": bool(np.max(gap) < bound)}

"""
Empirical partial-stability lab.

  fit_exponential_decay        log-linear fit of ||x|| along one trajectory
  assess_partial_stability     seeded ensemble verdict: stable / unstable / inconclusive
  find_epsilon_threshold       coarse sweep + bisection for the largest stable epsilon
  build_converse_lyapunov      V(w, v, z) = int_z^(z+delta) ||w(s)||^2 ds on a grid,
                               with the five constants of the certificate
  verify_lyapunov_certificate  grid-wise margins of the certificate inequalities
  check_perturbation_envelope  exponential + convolution envelope for a perturbed run

Every verdict is a sampling audit over the configured grid or ensemble,
not a proof.
"""
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.stats import linregress

from lab_utils import (
    DegenerateCertificateError,
    EnsembleMemberError,
    InadmissiblePerturbationError,
    IntegrationError,
    NonFiniteStateError,
    NoStablePointError,
    NonMonotoneSweepError,
    WindowTooShortError,
    ZeroNormError,
    make_rng,
)
from ode_core import IntegratorConfig, Trajectory, advance, integrate, unstack
from slowfast import SlowFastSystem, batched_rhs, full_system_config

NOISE_FLOOR = 1e-13
MIN_FIT_NODES = 20
R2_ACCEPT = 0.98
ENVELOPE_SLACK = 1.05
GROWTH_UNSTABLE = 10.0
PRECISE = IntegratorConfig(rtol=1e-10, atol=1e-12)


# -----------------------
# Decay fits
# -----------------------
@dataclass(frozen=True)
class DecayFit:
    gain_k: float
    rate_lambda: float
    r_squared: float
    window: Tuple[float, float]
    amplitude: float
    accepted: bool
    reason: str
    nodes_used: int
    envelope_ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


def fit_exponential_decay(traj: Trajectory, component_selector: Sequence[int],
                          transient_fraction: float = 0.1) -> DecayFit:
    """Fit log||x|| = log(gain_k) - lambda*(t - t0) on the post-transient window.

    The intercept is taken at the trajectory origin t0, so gain_k is the fitted
    amplitude there. The window is cut at the first node below the noise floor;
    envelope_ok compares every window node against 1.05 times the fitted line.
    amplitude is the fitted value at the window start.
    """
    if not 0.0 <= transient_fraction < 1.0:
        raise ValueError(f"transient_fraction must be in [0, 1), got {transient_fraction}")
    t = traj.times
    norms = traj.norms(component_selector)
    t_cut = t[0] + transient_fraction * (t[-1] - t[0])
    i0 = int(np.searchsorted(t, t_cut - 1e-12 * max(1.0, abs(t_cut))))
    tw, nw = t[i0:], norms[i0:]
    if len(nw) == 0 or nw[0] == 0.0:
        raise ZeroNormError(f"||x|| is zero at the window start t={t[min(i0, len(t) - 1)]:.6g}")
    reason = ""
    below = np.flatnonzero(nw < NOISE_FLOOR)
    if below.size:
        tw, nw = tw[: below[0]], nw[: below[0]]
        reason = f"window truncated at the noise floor {NOISE_FLOOR:g}"
    if len(nw) < MIN_FIT_NODES:
        raise WindowTooShortError(f"only {len(nw)} nodes in the fit window, need {MIN_FIT_NODES}")

    tau = tw - t[0]
    fit = linregress(tau, np.log(nw))
    rate = -float(fit.slope)
    r2 = float(fit.rvalue) ** 2
    gain = float(math.exp(fit.intercept))
    envelope_ok = bool(np.all(nw <= ENVELOPE_SLACK * gain * np.exp(-rate * tau) * (1 + 1e-12)))
    accepted = r2 >= R2_ACCEPT and rate > 0
    if not accepted:
        why = f"r^2={r2:.4f}" if r2 < R2_ACCEPT else f"rate={rate:.4g} <= 0"
        reason = f"{reason}; not exponential ({why})" if reason else f"not exponential ({why})"
    return DecayFit(gain, rate, r2, (float(tw[0]), float(tw[-1])), gain * math.exp(-rate * float(tau[0])),
                    accepted, reason, int(len(nw)), envelope_ok)


# -----------------------
# Generic nominal system
# -----------------------
@dataclass(frozen=True)
class NominalSystem:
    """dw/dz = phi1(w, v, z), dv/dz = phi2(w, v, z), fields broadcasting like slowfast ones."""

    phi1: Callable
    phi2: Callable
    n: int
    m: int
    period_T: float = 2.0 * np.pi
    name: str = "nominal"

    axis = "fast_axis_z"

    @property
    def dim(self) -> int:
        return self.n + self.m

    def split(self, state):
        return state[: self.n], state[self.n: self.n + self.m]

    def field(self, state, z):
        w, v = self.split(state)
        batch = np.broadcast_shapes(w.shape[1:], np.shape(z))
        dw = np.broadcast_to(np.asarray(self.phi1(w, v, z), dtype=float), (self.n,) + batch)
        dv = np.broadcast_to(np.asarray(self.phi2(w, v, z), dtype=float), (self.m,) + batch)
        return np.concatenate([dw, dv], axis=0)


def _on_time_axis(system) -> bool:
    return isinstance(system, SlowFastSystem)


# -----------------------
# Ensembles
# -----------------------
@dataclass(frozen=True)
class EnsembleSpec:
    count: int = 64
    radius: float = 0.3
    seed: int = 7
    y_range: Tuple[float, float] = (-np.pi, np.pi)
    z_range: Optional[Tuple[float, float]] = None
    transient_fraction: float = 0.1
    nonnegative_x: bool = False

    def __post_init__(self):
        if self.count < 1 or not self.radius > 0:
            raise ValueError(f"ensemble needs count >= 1 and radius > 0, got {self.count}, {self.radius}")

    def initial_conditions(self, n: int, m: int, period_T: float):
        rng = make_rng(self.seed)
        direction = rng.standard_normal((n, self.count))
        direction /= np.linalg.norm(direction, axis=0)
        radii = rng.uniform(self.radius / 10.0, self.radius, self.count)
        x0 = direction * radii
        if self.nonnegative_x:
            x0 = np.abs(x0)
        y0 = rng.uniform(self.y_range[0], self.y_range[1], (m, self.count))
        z_lo, z_hi = self.z_range if self.z_range is not None else (0.0, period_T)
        z0 = rng.uniform(z_lo, z_hi, self.count)
        return x0, y0, z0


@dataclass(frozen=True)
class StabilityVerdict:
    verdict: str
    k: Optional[float]
    lam: Optional[float]
    r2_min: Optional[float]
    growth_max: float
    members: int
    seed: int
    axis: str
    fits: List[DecayFit] = field(default_factory=list, repr=False)
    notes: List[str] = field(default_factory=list)
    trajectories: List[Trajectory] = field(default_factory=list, repr=False)

    @property
    def stable(self) -> bool:
        return self.verdict == "stable"

    def to_report(self) -> dict:
        return {"verdict": self.verdict, "k": self.k, "lambda": self.lam, "r2_min": self.r2_min,
                "growth_max": self.growth_max, "members": self.members, "seed": self.seed, "axis": self.axis}


def simulate_ensemble(system, ensemble: EnsembleSpec, horizon: float, cfg: IntegratorConfig) -> List[Trajectory]:
    """One batched integration for the whole ensemble, split back into members."""
    x0, y0, z0 = ensemble.initial_conditions(system.n, system.m, system.period_T)
    M = ensemble.count
    if _on_time_axis(system):
        state = np.vstack([x0, y0, z0[None]])
        rhs, span, run_cfg, axis = batched_rhs(system, M), (0.0, horizon), full_system_config(system, cfg), "time_t"
    else:
        state = np.vstack([x0, y0])
        rhs, span, run_cfg, axis = batched_rhs(system, M, z0), (0.0, horizon), cfg, "fast_axis_z"
    try:
        traj = integrate(rhs, state.ravel(), span, run_cfg, axis)
    except NonFiniteStateError as e:
        raise EnsembleMemberError(e.index % M, e) from e
    except IntegrationError as e:
        raise EnsembleMemberError(_failing_member(system, state, span, run_cfg, axis, z0), e) from e
    return unstack(traj, M)


def _failing_member(system, state, span, cfg: IntegratorConfig, axis: str, z0) -> Optional[int]:
    """First member whose solo run also fails; None when only the batch does."""
    for j in range(state.shape[1]):
        rhs = batched_rhs(system, 1) if _on_time_axis(system) else batched_rhs(system, 1, z0[j:j + 1])
        try:
            integrate(rhs, state[:, j], span, cfg, axis, endpoints_only=True)
        except IntegrationError:
            return j
    return None


def assess_partial_stability(system, ensemble: EnsembleSpec, horizon: float,
                             cfg: IntegratorConfig = PRECISE, keep_trajectories: bool = False) -> StabilityVerdict:
    members = simulate_ensemble(system, ensemble, horizon, cfg)
    kept = members if keep_trajectories else []
    selector = range(system.n)
    axis = members[0].independent_axis
    growth = []
    for traj in members:
        norms = traj.norms(selector)
        growth.append(float(np.max(norms) / norms[0]))
    growth_max = max(growth)
    if growth_max >= GROWTH_UNSTABLE:
        return StabilityVerdict("unstable", None, None, None, growth_max, len(members), ensemble.seed, axis,
                                notes=[f"||x|| grew by {growth_max:.3g}"], trajectories=kept)

    fits, gains, indices, notes = [], [], [], []
    for j, traj in enumerate(members):
        try:
            fit = fit_exponential_decay(traj, selector, ensemble.transient_fraction)
        except (WindowTooShortError, ZeroNormError) as e:
            notes.append(f"member {j}: {e}")
            continue
        fits.append(fit)
        indices.append(j)
        gains.append(fit.gain_k / float(traj.norms(selector)[0]))
    accepted = [f for f in fits if f.accepted]
    r2_min = min((f.r_squared for f in fits), default=None)
    if len(accepted) == len(members):
        return StabilityVerdict("stable", max(gains), min(f.rate_lambda for f in fits), r2_min,
                                growth_max, len(members), ensemble.seed, axis, fits, notes, kept)
    notes.extend(f"member {j}: {f.reason}" for j, f in zip(indices, fits) if not f.accepted)
    return StabilityVerdict("inconclusive", None, None, r2_min, growth_max, len(members), ensemble.seed, axis,
                            fits, notes, kept)


def stability_predicate(ensemble: EnsembleSpec, horizon: float, cfg: IntegratorConfig = PRECISE,
                        scale_horizon_with_epsilon: bool = False) -> Callable[[object], StabilityVerdict]:
    """Predicate for find_epsilon_threshold; z-axis systems slow down like eps, so their horizon may scale with 1/eps."""
    def predicate(system):
        span = horizon / system.epsilon if scale_horizon_with_epsilon else horizon
        return assess_partial_stability(system, ensemble, span, cfg)
    return predicate


# -----------------------
# Epsilon threshold
# -----------------------
@dataclass(frozen=True)
class ThresholdEstimate:
    epsilon_stable: float
    epsilon_unstable: Optional[float]
    upper_end_stable: bool
    table: List[dict]
    evaluations: int


def _is_stable(result) -> bool:
    return result.stable if hasattr(result, "stable") else bool(result)


def _verdict_name(result) -> str:
    return result.verdict if hasattr(result, "verdict") else ("stable" if result else "not_stable")


def find_epsilon_threshold(family: Callable[[float], object], eps_range: Tuple[float, float],
                           predicate: Callable[[object], object], coarse_points: int = 8,
                           rel_width: float = 0.05) -> ThresholdEstimate:
    lo, hi = float(eps_range[0]), float(eps_range[1])
    if not 0 < lo < hi:
        raise ValueError(f"eps_range must satisfy 0 < lo < hi, got {eps_range}")
    table = []

    def stable_at(eps: float) -> bool:
        result = predicate(family(eps))
        table.append({"epsilon": eps, "verdict": _verdict_name(result), "stage": "sweep" if len(table) < coarse_points else "bisect"})
        return _is_stable(result)

    grid = np.linspace(lo, hi, coarse_points)
    flags = [stable_at(float(e)) for e in grid]
    if not any(flags):
        raise NoStablePointError(f"no stable verdict on [{lo:g}, {hi:g}]")
    first_bad = flags.index(False) if False in flags else len(flags)
    if any(flags[first_bad:]):
        raise NonMonotoneSweepError(list(table))
    if first_bad == len(flags):
        return ThresholdEstimate(hi, None, True, table, len(table))

    good, bad = float(grid[first_bad - 1]), float(grid[first_bad])
    while (bad - good) / bad > rel_width:
        mid = 0.5 * (good + bad)
        if stable_at(mid):
            good = mid
        else:
            bad = mid
    return ThresholdEstimate(good, bad, False, table, len(table))


# -----------------------
# Converse Lyapunov certificate
# -----------------------
@dataclass(frozen=True)
class LyapunovGrid:
    w_radius: float = 0.3
    w_points: int = 15
    v_range: Tuple[float, float] = (-np.pi, np.pi)
    v_points: int = 15
    z_points: int = 8

    def points(self, n: int, m: int, period_T: float):
        axes = [np.linspace(-self.w_radius, self.w_radius, self.w_points)] * n
        axes += [np.linspace(self.v_range[0], self.v_range[1], self.v_points)] * m
        axes += [np.linspace(0.0, period_T, self.z_points, endpoint=False)]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.array([g.ravel() for g in mesh])
        return flat[:n], flat[n:n + m], flat[n + m]

    def offset_points(self, n: int, m: int, period_T: float):
        """Cell midpoints in w and v (plus w = 0), z shifted by half a step; disjoint from points()."""
        def mids(lo, hi, count):
            edges = np.linspace(lo, hi, count)
            return 0.5 * (edges[1:] + edges[:-1]) if count > 1 else edges

        w_axis = np.union1d(mids(-self.w_radius, self.w_radius, self.w_points), [0.0])
        axes = [w_axis] * n + [mids(self.v_range[0], self.v_range[1], self.v_points)] * m
        axes += [np.linspace(0.0, period_T, self.z_points, endpoint=False) + 0.5 * period_T / self.z_points]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = np.array([g.ravel() for g in mesh])
        return flat[:n], flat[n:n + m], flat[n + m]

    def to_dict(self) -> dict:
        return asdict(self)


def integrated_value_fn(system, delta: float, cfg: IntegratorConfig = PRECISE):
    """V(W, V, Z) for a batch of points: quadrature of ||w||^2 carried as one extra state."""
    n, m = system.n, system.m

    def value(W, Vv, Z):
        P = W.shape[1]
        Z = np.asarray(Z, dtype=float)

        def rhs(flat, s):
            st = flat.reshape(n + m + 1, P)
            core = system.field(st[: n + m], Z + s)
            return np.vstack([core, np.sum(st[:n] ** 2, axis=0)[None]]).ravel()

        state0 = np.vstack([W, Vv, np.zeros((1, P))])
        end = integrate(rhs, state0.ravel(), (0.0, delta), cfg, "fast_axis_z", endpoints_only=True).states[-1]
        return end.reshape(n + m + 1, P)[-1]

    return value


@dataclass(frozen=True, eq=False)
class CertificateSamples:
    w_norm: np.ndarray
    values: np.ndarray
    flow_derivative: np.ndarray
    grad_w: np.ndarray
    grad_v: np.ndarray


def certificate_samples(value_fn, system, W, Vv, Z, cfg: IntegratorConfig = PRECISE,
                        flow_step: float = 1e-2, grad_step: float = 1e-5) -> CertificateSamples:
    """V, dV/dz along the flow and the spatial gradient norms at every grid point.

    All the V evaluations go through value_fn in a single batch so they share
    one integration grid.
    """
    n, m, P = system.n, system.m, W.shape[1]
    rhs = batched_rhs(system, P, Z)
    base = np.vstack([W, Vv])
    fwd = advance(rhs, base.ravel(), 0.0, flow_step, cfg, "fast_axis_z").reshape(n + m, P)
    bwd = advance(rhs, base.ravel(), 0.0, -flow_step, cfg, "fast_axis_z").reshape(n + m, P)

    ws, vs, zs = [W, fwd[:n], bwd[:n]], [Vv, fwd[n:], bwd[n:]], [Z, Z + flow_step, Z - flow_step]
    for block, j in [("w", j) for j in range(n)] + [("v", j) for j in range(m)]:
        for sign in (1.0, -1.0):
            Wp, Vp = W.copy(), Vv.copy()
            (Wp if block == "w" else Vp)[j] += sign * grad_step
            ws.append(Wp)
            vs.append(Vp)
            zs.append(Z)
    vals = np.asarray(value_fn(np.hstack(ws), np.hstack(vs), np.concatenate(zs)), dtype=float).reshape(len(zs), P)

    def grad_norm(offset: int, count: int) -> np.ndarray:
        if count == 0:
            return np.zeros(P)
        comps = [(vals[offset + 2 * j] - vals[offset + 2 * j + 1]) / (2.0 * grad_step) for j in range(count)]
        return np.linalg.norm(np.array(comps), axis=0)

    return CertificateSamples(
        np.linalg.norm(W, axis=0), vals[0], (vals[1] - vals[2]) / (2.0 * flow_step),
        grad_norm(3, n), grad_norm(3 + 2 * n, m),
    )


@dataclass(frozen=True, eq=False)
class LyapunovEstimate:
    horizon_delta: float
    grid: LyapunovGrid
    values: np.ndarray
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    slack: float
    raw: Dict[str, float]
    system_name: str
    value_fn: Callable = field(repr=False, compare=False)
    flow_step: float = 1e-2
    grad_step: float = 1e-5

    def constants(self) -> Dict[str, float]:
        return {"c1": self.c1, "c2": self.c2, "c3": self.c3, "c4": self.c4, "c5": self.c5}

    def to_report(self) -> dict:
        return {**self.constants(), "horizon_delta": self.horizon_delta, "grid_spec": self.grid.to_dict(),
                "slack": self.slack, "raw": dict(self.raw), "system": self.system_name}


GRADIENT_FLOOR = 1e-12
ZERO_TOL = 1e-12


def _pilot_rate(system, grid: LyapunovGrid, cfg: IntegratorConfig, pilot_horizon: Optional[float]) -> float:
    eps = getattr(system, "epsilon", 1.0)
    span = pilot_horizon if pilot_horizon is not None else 30.0 / eps
    w0 = np.zeros(system.n)
    w0[0] = 0.5 * grid.w_radius
    v0 = np.full(system.m, 0.5 * (grid.v_range[0] + grid.v_range[1]))
    traj = integrate(batched_rhs(system, 1), np.concatenate([w0, v0]), (0.0, span), cfg, "fast_axis_z")
    fit = fit_exponential_decay(traj, range(system.n), 0.1)
    if not fit.accepted:
        raise DegenerateCertificateError(f"pilot run of {system.name} is not exponentially decaying: {fit.reason}")
    return fit.rate_lambda


def build_converse_lyapunov(system, horizon_delta: Optional[float] = None, grid: LyapunovGrid = LyapunovGrid(),
                            cfg: IntegratorConfig = PRECISE, slack: float = 0.0, flow_step: float = 1e-2,
                            grad_step: float = 1e-5, pilot_horizon: Optional[float] = None) -> LyapunovEstimate:
    """Grid construction of V and its constants for a z-axis nominal system.

    With horizon_delta left out, delta = 5/lambda from a pilot decay fit. Lower
    constants are divided by (1 + slack), upper ones multiplied by it.
    """
    if slack < 0:
        raise ValueError(f"slack must be >= 0, got {slack}")
    delta = horizon_delta if horizon_delta is not None else 5.0 / _pilot_rate(system, grid, cfg, pilot_horizon)
    if not delta > 0:
        raise ValueError(f"horizon_delta must be positive, got {delta}")
    W, Vv, Z = grid.points(system.n, system.m, system.period_T)
    value_fn = integrated_value_fn(system, delta, cfg)
    s = certificate_samples(value_fn, system, W, Vv, Z, cfg, flow_step, grad_step)

    live = s.w_norm > ZERO_TOL
    if not np.any(live):
        raise DegenerateCertificateError("grid has no point with w != 0")
    wn2 = s.w_norm[live] ** 2
    raw = {
        "c1": float(np.min(s.values[live] / wn2)),
        "c2": float(np.max(s.values[live] / wn2)),
        "c3": float(np.min(-s.flow_derivative[live] / wn2)),
        "c4": float(np.max(s.grad_w[live] / s.w_norm[live])),
        "c5": float(np.max(s.grad_v[live] / s.w_norm[live])),
    }
    if raw["c1"] <= 0 or raw["c3"] <= 0:
        raise DegenerateCertificateError(f"non-positive lower constant: c1={raw['c1']:.3g}, c3={raw['c3']:.3g}")
    lower, upper = 1.0 / (1.0 + slack), 1.0 + slack
    return LyapunovEstimate(
        delta, grid, s.values, raw["c1"] * lower, raw["c2"] * upper, raw["c3"] * lower,
        max(raw["c4"], GRADIENT_FLOOR) * upper, max(raw["c5"], GRADIENT_FLOOR) * upper,
        slack, raw, getattr(system, "name", "system"), value_fn, flow_step, grad_step,
    )


@dataclass(frozen=True)
class InequalityCheck:
    passed: bool
    margin: float


@dataclass(frozen=True)
class CertificateReport:
    checks: Dict[str, InequalityCheck]
    zero_ok: bool
    nonnegative_ok: bool

    @property
    def passed(self) -> bool:
        return self.zero_ok and self.nonnegative_ok and all(c.passed for c in self.checks.values())

    def to_report(self) -> dict:
        return {"passed": self.passed, "zero_ok": self.zero_ok, "nonnegative_ok": self.nonnegative_ok,
                "checks": {k: asdict(v) for k, v in self.checks.items()}}


def _upper_margin(bound: np.ndarray, value: np.ndarray) -> float:
    """min over points of bound/value - 1 for 'value <= bound'; value == 0 counts as infinite margin."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(value > 0, bound / value, np.inf)
    return float(np.min(ratio) - 1.0)


def verify_lyapunov_certificate(est: LyapunovEstimate, system, cfg: IntegratorConfig = PRECISE,
                                tol: float = 1e-9) -> CertificateReport:
    """Worst-case margins of the four certificate inequalities for est.value_fn along the flow of system.

    Samples are always recomputed, on the grid's offset points rather than the
    points the constants were fitted on. Margins are relative: 0 means the
    tightest point sits on the bound.
    """
    W, Vv, Z = est.grid.offset_points(system.n, system.m, system.period_T)
    s = certificate_samples(est.value_fn, system, W, Vv, Z, cfg, est.flow_step, est.grad_step)
    live = s.w_norm > ZERO_TOL
    wn, wn2 = s.w_norm[live], s.w_norm[live] ** 2
    V = s.values[live]

    sandwich = min(_upper_margin(V, est.c1 * wn2), _upper_margin(est.c2 * wn2, V))
    decay = _upper_margin(-s.flow_derivative[live], est.c3 * wn2)
    grad_w = _upper_margin(est.c4 * wn, s.grad_w[live])
    grad_v = _upper_margin(est.c5 * wn, s.grad_v[live]) if system.m else np.inf

    checks = {
        "sandwich": InequalityCheck(sandwich >= -tol, sandwich),
        "decay": InequalityCheck(decay >= -tol, decay),
        "grad_w": InequalityCheck(grad_w >= -tol, grad_w),
        "grad_v": InequalityCheck(grad_v >= -tol, grad_v),
    }
    zero_ok = bool(np.all(np.abs(s.values[~live]) <= ZERO_TOL))
    return CertificateReport(checks, zero_ok, bool(np.all(s.values >= -ZERO_TOL)))


def corrupt_value_fn(est: LyapunovEstimate, factor: Callable) -> LyapunovEstimate:
    """Same constants, V multiplied pointwise by factor(W, V, Z)."""
    base = est.value_fn
    return replace(est, value_fn=lambda W, Vv, Z: base(W, Vv, Z) * factor(W, Vv, Z))


def quadratic_decay_margin(av, w_grid, v_grid) -> float:
    """sup of 2 w.h_av(w, v)/||w||^2 over the grid for the candidate V = ||w||^2 (negative is good)."""
    w_axes = [np.asarray(w_grid, dtype=float)] * av.n
    v_axes = [np.asarray(v_grid, dtype=float)] * av.m
    mesh = np.meshgrid(*(w_axes + v_axes), indexing="ij")
    flat = np.array([g.ravel() for g in mesh])
    W, Vv = flat[: av.n], flat[av.n:]
    wn2 = np.sum(W ** 2, axis=0)
    live = wn2 > 0
    h = av.h_av(W[:, live], Vv[:, live])
    return float(np.max(2.0 * np.sum(W[:, live] * h, axis=0) / wn2[live]))


# -----------------------
# Perturbation envelopes
# -----------------------
def _zero(z):
    return np.zeros_like(np.asarray(z, dtype=float))


@dataclass(frozen=True)
class PerturbationBoundSpec:
    """||g1|| <= gamma1(z)||w|| + psi1(z), ||g2|| <= gamma2(z)||w|| + psi2(z); kappa None means sup(c4*gamma1 + c5*gamma2)."""

    gamma1: Callable = _zero
    gamma2: Callable = _zero
    psi1: Callable = _zero
    psi2: Callable = _zero
    kappa: Optional[float] = None
    eta: float = 0.0

    def rates(self, cert: LyapunovEstimate, z: np.ndarray) -> Tuple[float, float, float, float]:
        """(kappa, eta, k1, k2) for this certificate; kappa defaults to the sup over z."""
        gamma = cert.c4 * np.asarray(self.gamma1(z)) + cert.c5 * np.asarray(self.gamma2(z))
        kappa = float(np.max(gamma)) if self.kappa is None else float(self.kappa)
        eta = 0.0 if self.kappa is None else float(self.eta)
        limit = cert.c1 * cert.c3 / cert.c2
        if not 0.0 <= kappa < limit or eta < 0.0:
            raise InadmissiblePerturbationError(
                f"need 0 <= kappa < c1*c3/c2 = {limit:.6g} and eta >= 0, got kappa={kappa:.6g}, eta={eta:.6g}")
        k1 = cert.c3 / (2.0 * cert.c2) - kappa / (2.0 * cert.c1)
        k2 = math.exp(eta / (2.0 * cert.c1))
        return kappa, eta, k1, k2


@dataclass(frozen=True, eq=False)
class EnvelopeReport:
    passed: bool
    max_residual: float
    k1: float
    k2: float
    kappa: float
    eta: float
    ball_condition_ok: bool
    psi_bound_ok: bool
    integral_condition_ok: bool
    tail_limit: float
    tail_max: float
    envelope: np.ndarray = field(repr=False)
    convolution: np.ndarray = field(repr=False)

    def to_report(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("envelope", "convolution")}
        return out


def exponential_convolution(z: np.ndarray, psi: np.ndarray, k1: float) -> np.ndarray:
    """I(z_i) = int_z0^z_i exp(-k1 (z_i - tau)) psi(tau) dtau, trapezoid rule on the node grid."""
    out = np.zeros_like(z)
    for i in range(1, len(z)):
        h = z[i] - z[i - 1]
        decay = math.exp(-k1 * h)
        out[i] = decay * out[i - 1] + 0.5 * h * (decay * psi[i - 1] + psi[i])
    return out


def check_perturbation_envelope(cert: LyapunovEstimate, traj: Trajectory, spec: PerturbationBoundSpec,
                                n: int = 1, slack: float = 0.01) -> EnvelopeReport:
    """||w_p(z)|| against k2*sqrt(c2/c1)*||w_p(z0)||*exp(-k1 (z - z0)) + k2/(2 c1) * int exp(-k1 (z - tau)) psi(tau) dtau.

    The ball radius is the certificate grid's w radius. Failed preconditions
    produce a warning and are reported; the envelope is evaluated regardless.
    """
    z = traj.times
    wn = traj.norms(range(n))
    kappa, eta, k1, k2 = spec.rates(cert, z)
    psi = cert.c4 * np.asarray(spec.psi1(z), dtype=float) + cert.c5 * np.asarray(spec.psi2(z), dtype=float)
    psi = np.broadcast_to(psi, z.shape)
    gamma = cert.c4 * np.asarray(spec.gamma1(z), dtype=float) + cert.c5 * np.asarray(spec.gamma2(z), dtype=float)
    gamma = np.broadcast_to(gamma, z.shape)

    radius = cert.grid.w_radius
    ball_ok = bool(wn[0] < radius / k2 * math.sqrt(cert.c1 / cert.c2))
    psi_bar = float(np.max(psi))
    psi_ok = bool(psi_bar < 2.0 * cert.c1 * k1 * radius / k2)
    integral = cumulative_trapezoid(gamma, z, initial=0.0)
    integral_ok = bool(np.all(integral <= kappa * (z - z[0]) + eta + 1e-12))
    for ok, what in ((ball_ok, "initial state outside the admissible ball"),
                     (psi_ok, "psi bound exceeds 2*c1*k1*delta/k2"),
                     (integral_ok, "gamma integral exceeds kappa*(z - z0) + eta")):
        if not ok:
            warnings.warn(f"perturbation envelope precondition failed: {what}")

    conv = exponential_convolution(z, psi, k1)
    env = k2 * math.sqrt(cert.c2 / cert.c1) * wn[0] * np.exp(-k1 * (z - z[0])) + k2 / (2.0 * cert.c1) * conv
    residual = wn - env
    tail = wn[z >= z[0] + 0.75 * (z[-1] - z[0])]
    return EnvelopeReport(
        bool(np.all(wn <= (1.0 + slack) * env)), float(np.max(residual)), k1, k2, kappa, eta,
        ball_ok, psi_ok, integral_ok, k2 * psi_bar / (2.0 * cert.c1 * k1), float(np.max(tail)), env, conv,
    )


def stability_report(verdict: StabilityVerdict, cert: Optional[LyapunovEstimate] = None) -> dict:
    """JSON-ready {verdict, k, lambda, r2_min, c1..c5, grid_spec, seed}."""
    out = verdict.to_report()
    if cert is not None:
        out.update(cert.constants())
        out["grid_spec"] = cert.grid.to_dict()
        out["horizon_delta"] = cert.horizon_delta
    return out

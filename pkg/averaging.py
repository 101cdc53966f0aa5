"""
Partial averaging of a reduced slow-fast system.

Only the x-block is averaged over one period of z:

    dw/dz = eps * h_av(w, v),        h_av(w, v) = (1/T) * int_0^T h1(w, v, tau) dtau
    dv/dz = eps * h2(w, v, z)

h_av is evaluated lazily by Gauss-Legendre quadrature, in 8-node panels
when the node count allows. The module also computes the averaging defect

    u(w, v, z) = int_0^(z mod T) [h1(w, v, tau) - h_av(w, v)] dtau

that links the original and the averaged x through x = w + eps*u, and
finite-difference Jacobian bounds used to check the defect estimate.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from lab_utils import QUAD_NODES, NonFiniteValueError
from ode_core import Trajectory
from slowfast import DomainBox, ReducedSystem, evaluate_field, sample_domain

PANEL_ORDER = 8


def composite_gauss_legendre(a, b, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of a Gauss-Legendre rule on [a, b] with `nodes` points.

    Multiples of 8 use equal panels of the 8-point rule; any other count >= 8
    is a single panel of that order. a and b may be arrays of equal shape S;
    the result then has shape S + (nodes,).
    """
    if nodes < PANEL_ORDER:
        raise ValueError(f"quadrature needs at least {PANEL_ORDER} nodes, got {nodes}")
    order = PANEL_ORDER if nodes % PANEL_ORDER == 0 else nodes
    panels = nodes // order
    x, w = leggauss(order)
    # reference rule on [0, 1] split into equal panels
    edges = np.arange(panels) / panels
    unit_pts = (edges[:, None] + (x[None, :] + 1.0) / (2.0 * panels)).ravel()
    unit_wts = np.tile(w / (2.0 * panels), panels)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = (b - a)[..., None]
    return a[..., None] + length * unit_pts, length * unit_wts


def _no_slow_block(w):
    return np.zeros((0,) + np.shape(w)[1:])


# -----------------------
# Averaged system
# -----------------------
@dataclass(frozen=True)
class AveragedSystem:
    reduced: ReducedSystem
    quadrature_nodes: int = QUAD_NODES
    shift: float = 0.0

    axis = "fast_axis_z"

    def __post_init__(self):
        composite_gauss_legendre(0.0, 1.0, self.quadrature_nodes)

    @property
    def epsilon(self) -> float:
        return self.reduced.epsilon

    @property
    def period_T(self) -> float:
        return self.reduced.period_T

    @property
    def n(self) -> int:
        return self.reduced.n

    @property
    def m(self) -> int:
        return self.reduced.m

    @property
    def dim(self) -> int:
        return self.n + self.m

    @property
    def name(self) -> str:
        return f"{self.reduced.name}_averaged"

    def split(self, state: np.ndarray):
        return self.reduced.split(state)

    def h_av(self, w, v=None) -> np.ndarray:
        """Mean of h1 over [shift, shift + T]; w has shape (n, ...), v (m, ...)."""
        w = np.asarray(w, dtype=float)
        v = _no_slow_block(w) if v is None else np.asarray(v, dtype=float)
        tau, wts = composite_gauss_legendre(self.shift, self.shift + self.period_T, self.quadrature_nodes)
        vals = evaluate_field(self.reduced.h1, w[..., None], v[..., None], tau, self.n)
        if not np.all(np.isfinite(vals)):
            raise NonFiniteValueError(f"non-finite integrand while averaging {self.reduced.name}")
        return vals @ wts / self.period_T

    def h2(self, w, v, z) -> np.ndarray:
        return evaluate_field(self.reduced.h2, w, v, z, self.m)

    def field(self, state: np.ndarray, z) -> np.ndarray:
        w, v = self.split(state)
        dw = self.h_av(w, v)
        batch = np.broadcast_shapes(dw.shape[1:], np.shape(z))
        dw = np.broadcast_to(dw, (self.n,) + batch)
        dv = self.h2(w, v, z)
        return self.epsilon * np.concatenate([dw, np.broadcast_to(dv, (self.m,) + batch)], axis=0)


def average_reduced(red: ReducedSystem, nodes: int = QUAD_NODES) -> AveragedSystem:
    return AveragedSystem(red, nodes)


# -----------------------
# Averaging defect
# -----------------------
def defect_integral(red: ReducedSystem, av: AveragedSystem, w, v, z) -> np.ndarray:
    """u(w, v, z) for w (n, ...), v (m, ...) and z broadcastable to the batch."""
    w = np.asarray(w, dtype=float)
    v = _no_slow_block(w) if v is None else np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("the averaging defect is defined for z >= 0")
    upper = np.mod(z, red.period_T)
    batch = np.broadcast_shapes(w.shape[1:], v.shape[1:], upper.shape)
    upper = np.broadcast_to(upper, batch)
    tau, wts = composite_gauss_legendre(np.zeros(batch), upper, av.quadrature_nodes)
    vals = evaluate_field(red.h1, w[..., None], v[..., None], tau, red.n)
    if not np.all(np.isfinite(vals)):
        raise NonFiniteValueError(f"non-finite integrand in the averaging defect of {red.name}")
    mean = np.broadcast_to(av.h_av(w, v), (red.n,) + batch)
    return np.sum(vals * wts, axis=-1) - mean * upper


@dataclass(frozen=True)
class DefectReport:
    u: np.ndarray
    norm: float
    bound: Optional[float]
    within_bound: Optional[bool]


def averaging_defect(red: ReducedSystem, av: AveragedSystem, w, v, z: float,
                     bounds: Optional["JacobianBounds"] = None) -> DefectReport:
    """u at a single point, with ||u|| against 2*T*L1*||w|| when bounds are given."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float)) if red.m else np.zeros(0)
    u = defect_integral(red, av, w, v, z)
    norm = float(np.linalg.norm(u))
    if bounds is None:
        return DefectReport(u, norm, None, None)
    bound = 2.0 * red.period_T * bounds.L1 * float(np.linalg.norm(w))
    return DefectReport(u, norm, bound, norm <= bound * (1.0 + 1e-9) + 1e-14)


# -----------------------
# Jacobian bounds
# -----------------------
@dataclass(frozen=True)
class JacobianBounds:
    L1: float
    L2: float
    L1_prime: float
    L2_prime: float
    samples: int


def _spectral(jac: np.ndarray) -> np.ndarray:
    # jac has shape (S, rows, cols)
    if jac.shape[1] == 0 or jac.shape[2] == 0:
        return np.zeros(jac.shape[0])
    return np.linalg.norm(jac, ord=2, axis=(-2, -1))


def _fd_jacobian(fn, rows: int, x, y, z, wrt: str, steps) -> np.ndarray:
    """Central differences; returns (S, rows, cols) with cols = len of the wrt block."""
    block = x if wrt == "x" else y
    cols = block.shape[0]
    jac = np.zeros((len(z), rows, cols))
    for j in range(cols):
        plus = block.copy()
        minus = block.copy()
        plus[j] += steps
        minus[j] -= steps
        args_p = (plus, y) if wrt == "x" else (x, plus)
        args_m = (minus, y) if wrt == "x" else (x, minus)
        diff = evaluate_field(fn, args_p[0], args_p[1], z, rows) - evaluate_field(fn, args_m[0], args_m[1], z, rows)
        jac[:, :, j] = (diff / (2.0 * steps)).T
    return jac


def estimate_jacobian_bounds(red: ReducedSystem, domain: DomainBox, samples: int = 4096, seed: int = 0) -> JacobianBounds:
    x, y, z = sample_domain(domain, red.period_T, samples, seed)
    steps = np.maximum(1e-6, 1e-6 * np.linalg.norm(np.vstack([x, y]), axis=0))
    j1x = _fd_jacobian(red.h1, red.n, x, y, z, "x", steps)
    j2x = _fd_jacobian(red.h2, red.m, x, y, z, "x", steps)
    j1v = _fd_jacobian(red.h1, red.n, x, y, z, "y", steps)
    j2v = _fd_jacobian(red.h2, red.m, x, y, z, "y", steps)
    for jac in (j1x, j2x, j1v, j2v):
        if not np.all(np.isfinite(jac)):
            raise NonFiniteValueError(f"non-finite Jacobian sample for {red.name}")
    wnorm = np.linalg.norm(x, axis=0)
    off = wnorm > 1e-9
    l1p = float(np.max(_spectral(j1v)[off] / wnorm[off])) if np.any(off) else 0.0
    l2p = float(np.max(_spectral(j2v)[off] / wnorm[off])) if np.any(off) else 0.0
    return JacobianBounds(
        float(np.max(_spectral(j1x))), float(np.max(_spectral(j2x))), l1p, l2p, int(len(z)),
    )


# -----------------------
# Change of variables x = w + eps*u(w, y, z)
# -----------------------
@dataclass(frozen=True)
class InversionResult:
    w: np.ndarray
    iterations: int
    residual: float
    converged: bool


def invert_change_of_variables(red: ReducedSystem, av: AveragedSystem, x, y, z,
                               max_iter: int = 200, tol: float = 1e-13) -> InversionResult:
    """Fixed-point solve of x = w + eps*u(w, y, z); contracts when eps*2T*L1 < 1.

    x may be (n,) or (n, N) with y (m, N) and z (N,) for many points at once.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float) if red.m else _no_slow_block(x)
    w = x.copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        w_next = x - red.epsilon * defect_integral(red, av, w, y, z)
        residual = float(np.max(np.abs(w_next - w)))
        w = w_next
        if residual <= tol:
            return InversionResult(w, it, residual, True)
    return InversionResult(w, max_iter, residual, False)


@dataclass(frozen=True)
class ChangeOfVariablesGap:
    max_gap: float
    max_ratio: float
    converged: bool


def change_of_variables_gap(red: ReducedSystem, av: AveragedSystem, traj: Trajectory,
                            bounds: JacobianBounds) -> ChangeOfVariablesGap:
    """Along a reduced trajectory: max ||x - w_p|| and its ratio to eps*2T*L1*||w_p||."""
    if traj.independent_axis != "fast_axis_z":
        raise ValueError("change_of_variables_gap expects a trajectory in the fast axis z")
    z = np.mod(traj.times, red.period_T)
    x = traj.states[:, : red.n].T
    y = traj.states[:, red.n: red.n + red.m].T
    inv = invert_change_of_variables(red, av, x, y, z)
    gap = np.linalg.norm(x - inv.w, axis=0)
    scale = red.epsilon * 2.0 * red.period_T * bounds.L1 * np.linalg.norm(inv.w, axis=0)
    live = scale > 0
    ratio = float(np.max(gap[live] / scale[live])) if np.any(live) else 0.0
    return ChangeOfVariablesGap(float(np.max(gap)), ratio, inv.converged)

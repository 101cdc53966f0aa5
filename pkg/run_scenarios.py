#!/usr/bin/env python3
"""
run_scenarios.py
Runs the named stability scenarios from JSON configs and writes CSV/JSON
artifacts plus a generated plot script (plot_results.py -> plots.html).
Requirements:
    pip install -r requirements.txt
Run:
    python run_scenarios.py list-scenarios
    python run_scenarios.py run scenarios/example1.json --seed 7 --out lab_output/example1
    python run_scenarios.py sweep scenarios/sweep_alpha_u.json --jobs 4
"""

import argparse
import itertools
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from jinja2 import Template
from scipy.stats import linregress

from averaging import average_reduced
from kuramoto_remote import (
    KuramotoStarParams,
    frequency_gap,
    phase_locked_equilibria,
    simulate_remote_sync_experiment,
    theta_from_mu_zeta,
    unequal_coupling_gap_check,
    zeta_rate_lower_bound,
)
from lab_utils import (
    DEFAULT_SEED,
    JOBS,
    OUTPUT_DIR,
    ConfigValidationError,
    atomic_write_csv,
    atomic_write_json,
    atomic_write_text,
    load_json,
)
from ode_core import IntegratorConfig, integrate
from slowfast import batched_rhs, example1, reduce_to_fast_axis
from stability_lab import (
    GROWTH_UNSTABLE,
    EnsembleSpec,
    LyapunovGrid,
    NominalSystem,
    PerturbationBoundSpec,
    assess_partial_stability,
    build_converse_lyapunov,
    check_perturbation_envelope,
    find_epsilon_threshold,
    quadratic_decay_margin,
    stability_predicate,
    stability_report,
    verify_lyapunov_certificate,
)

CONFIG_KEYS = ("scenario", "seed", "output_dir", "integrator", "params", "grid")
MAX_GRID_CELLS = 10_000
SWEEP_COLUMNS = ["status", "verdict", "lambda_hat", "k_hat", "residual", "eig_verdict", "reason"]
VERDICT_CODES = {"stable": 1.0, "certified": 1.0, "pass": 1.0, "inconclusive": 0.0,
                 "unstable": -1.0, "failed": -1.0, "fail": -1.0}


# ---------------------------
# Parameter schemas
# ---------------------------
@dataclass(frozen=True)
class Param:
    kind: str  # float | int | bool | float? | floats
    default: Any
    rule: str = ""
    check: Optional[Callable[[Any], bool]] = None
    help: str = ""


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _type_ok(kind: str, v) -> bool:
    if kind == "float":
        return _is_number(v)
    if kind == "int":
        return isinstance(v, int) and not isinstance(v, bool)
    if kind == "bool":
        return isinstance(v, bool)
    if kind == "float?":
        return v is None or _is_number(v)
    if kind == "floats":
        return isinstance(v, list) and len(v) > 0 and all(_is_number(x) for x in v)
    return False


def _positive(v) -> bool:
    return v > 0


def _nonnegative(v) -> bool:
    return v >= 0


def _in_unit_interval(v) -> bool:
    return 0 <= v < 1


def _alpha_ok(v) -> bool:
    return 0 <= v <= math.pi / 2


def _gl_nodes(v) -> bool:
    return v >= 8


ENSEMBLE_PARAMS = {
    "members": Param("int", 64, ">= 1", lambda v: v >= 1, "ensemble size"),
    "radius": Param("float", 0.3, "> 0", _positive, "largest ||x(0)||"),
    "transient_fraction": Param("float", 0.1, "in [0, 1)", _in_unit_interval, "share of the horizon skipped by fits"),
}
EPSILON = Param("float", 0.01, "> 0", _positive, "time-scale separation")
DRIFT_SIGN = Param("float", 1.0, "-1 or 1", lambda v: v in (-1, 1), "+1 decays, -1 flips the x drift")
QUAD_NODES_PARAM = Param("int", 64, ">= 8", _gl_nodes, "Gauss-Legendre nodes for h_av")

EXAMPLE1_SCHEMA = {
    "epsilon": EPSILON,
    "drift_sign": DRIFT_SIGN,
    **ENSEMBLE_PARAMS,
    "horizon": Param("float", 10.0, "> 0", _positive, "horizon in t"),
}
AVERAGED_SCHEMA = {
    "epsilon": Param("float", 0.05, "> 0", _positive, "time-scale separation"),
    "quadrature_nodes": QUAD_NODES_PARAM,
    **ENSEMBLE_PARAMS,
    "members": Param("int", 16, ">= 1", lambda v: v >= 1, "ensemble size"),
    "v0": Param("float?", math.pi / 2, "", None, "fixed v(0); null draws v(0) in [-pi, pi]"),
    "horizon": Param("float", 20.0, "> 0", _positive, "horizon in z, in units of 1/epsilon"),
}
REDUCED_RATE_SCHEMA = {
    "epsilon": Param("float", 0.05, "> 0", _positive, "time-scale separation"),
    "drift_sign": DRIFT_SIGN,
    **ENSEMBLE_PARAMS,
    "members": Param("int", 8, ">= 1", lambda v: v >= 1, "ensemble size"),
    "horizon": Param("float", 20.0, "> 0", _positive, "horizon in z, in units of 1/epsilon"),
}
THRESHOLD_SCHEMA = {
    "eps_min": Param("float", 0.02, "> 0", _positive, "lower end of the epsilon range"),
    "eps_max": Param("float", 0.5, "> 0", _positive, "upper end of the epsilon range"),
    "coarse_points": Param("int", 8, ">= 2", lambda v: v >= 2, "points of the coarse sweep"),
    "rel_width": Param("float", 0.05, "in (0, 1)", lambda v: 0 < v < 1, "bisection stops at this relative width"),
    **{k: v for k, v in REDUCED_RATE_SCHEMA.items() if k != "epsilon"},
}
STAR_SCHEMA = {
    "omega": Param("float", 1.0, "", None, "natural frequency"),
    "A": Param("float", 1.0, "> 0", _positive, "coupling of peripheral 1 (and 2 unless A2 is set)"),
    "A2": Param("float?", None, "> 0", None, "coupling of peripheral 2; null means A"),
    "alpha": Param("float", 0.9, "in [0, pi/2]", _alpha_ok, "phase shift"),
    "u": Param("float", 0.0, ">= 0", _nonnegative, "detuning of the central oscillator"),
    "mu0": Param("float", 0.1, "in (0, 1)", lambda v: 0 < v < 1, "initial distance mu(0) to the manifold"),
    "zeta0": Param("float", 0.0, "", None, "initial zeta when u > 0 (u = 0 starts at the locked angle)"),
    "horizon": Param("float", 100.0, "> 0", _positive, "horizon in t"),
    "transient_fraction": ENSEMBLE_PARAMS["transient_fraction"],
    "cycle_transient": Param("float", 60.0, ">= 0", _nonnegative, "start of the limit-cycle residual window"),
}
ALPHA_SWEEP_SCHEMA = {
    **{k: v for k, v in STAR_SCHEMA.items() if k != "alpha"},
    "mu0": Param("float", 1e-4, "in (0, 1)", lambda v: 0 < v < 1, "initial distance mu(0) to the manifold"),
    "alpha_min": Param("float", 0.2, "in [0, pi/2]", _alpha_ok, "first alpha"),
    "alpha_max": Param("float", 1.5, "in [0, pi/2]", _alpha_ok, "last alpha"),
    "alpha_step": Param("float", 0.02, "> 0", _positive, "alpha grid step"),
}
U_SWEEP_SCHEMA = {
    **{k: v for k, v in STAR_SCHEMA.items() if k != "u"},
    "alpha": Param("float", 1.4, "in [0, pi/2]", _alpha_ok, "phase shift"),
    "u_values": Param("floats", [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0], "each >= 0",
                      lambda v: all(x >= 0 for x in v), "detuning values"),
}
CERTIFICATE_SCHEMA = {
    "epsilon": Param("float", 1.0, "> 0", _positive, "time-scale separation of the averaged system"),
    "quadrature_nodes": Param("int", 16, ">= 8", _gl_nodes, "Gauss-Legendre nodes for h_av"),
    "delta": Param("float?", None, "> 0", None, "integration horizon of V; null picks 5/lambda from a pilot run"),
    "w_radius": Param("float", 0.3, "> 0", _positive, "w half-width of the grid"),
    "w_points": Param("int", 15, ">= 2", lambda v: v >= 2, "w grid points"),
    "v_min": Param("float", -math.pi, "", None, "v grid start"),
    "v_max": Param("float", math.pi, "", None, "v grid end"),
    "v_points": Param("int", 15, ">= 1", lambda v: v >= 1, "v grid points"),
    "z_points": Param("int", 8, ">= 1", lambda v: v >= 1, "z grid points over one period"),
    "slack": Param("float", 0.1, ">= 0", _nonnegative, "relative slack on the constants"),
    "min_margin": Param("float", 0.0, "", None, "smallest inequality margin that certifies"),
    "flow_step": Param("float", 1e-2, "> 0", _positive, "step of the flow derivative"),
    "grad_step": Param("float", 1e-5, "> 0", _positive, "step of the spatial gradient"),
}
ENVELOPE_SCHEMA = {
    "delta": Param("float", 2.0, "> 0", _positive, "integration horizon of V for dw/dz = -w"),
    "w_radius": Param("float", 1.0, "> 0", _positive, "w half-width of the grid (ball radius)"),
    "w_points": Param("int", 21, ">= 2", lambda v: v >= 2, "w grid points"),
    "z_points": Param("int", 8, ">= 1", lambda v: v >= 1, "z grid points"),
    "gain": Param("float", 0.05, ">= 0", _nonnegative, "vanishing perturbation gain * w * sin z"),
    "psi_bar": Param("float", 0.1, ">= 0", _nonnegative, "constant perturbation"),
    "w0": Param("float", 0.5, "> 0", _positive, "initial w"),
    "horizon": Param("float", 20.0, "> 0", _positive, "horizon in z"),
    "slack": Param("float", 0.01, ">= 0", _nonnegative, "relative tolerance on the envelope"),
}


def _threshold_cross(p: dict) -> List[str]:
    if p["eps_min"] >= p["eps_max"]:
        return [f"params.eps_min must be < params.eps_max, got {p['eps_min']} >= {p['eps_max']}"]
    return []


def _alpha_points(p: dict) -> int:
    return int(math.floor((p["alpha_max"] - p["alpha_min"]) / p["alpha_step"] + 1e-9)) + 1


def _alpha_cross(p: dict) -> List[str]:
    if p["alpha_min"] > p["alpha_max"]:
        return [f"params.alpha_min must be <= params.alpha_max, got {p['alpha_min']} > {p['alpha_max']}"]
    if _alpha_points(p) > MAX_GRID_CELLS:
        return [f"alpha grid has {_alpha_points(p)} points, at most {MAX_GRID_CELLS} allowed"]
    return []


def _star_cross(p: dict) -> List[str]:
    if p.get("A2") is not None and not p["A2"] > 0:
        return [f"params.A2 must be > 0 or null, got {p['A2']}"]
    return []


def _certificate_cross(p: dict) -> List[str]:
    errors = []
    if p["v_min"] >= p["v_max"]:
        errors.append(f"params.v_min must be < params.v_max, got {p['v_min']} >= {p['v_max']}")
    if p["delta"] is not None and not p["delta"] > 0:
        errors.append(f"params.delta must be > 0 or null, got {p['delta']}")
    return errors


# ---------------------------
# Case runners (module level so worker processes can look them up)
# ---------------------------
def _outcome(verdict: str, lam=None, k=None, residual=None, details=None, eig_verdict=None) -> dict:
    return {"status": "ok", "verdict": verdict, "lambda_hat": lam, "k_hat": k, "residual": residual,
            "eig_verdict": eig_verdict, "details": details or {}}


def _ensemble(p: dict, seed: int, **extra) -> EnsembleSpec:
    return EnsembleSpec(count=p["members"], radius=p["radius"], seed=seed,
                        transient_fraction=p["transient_fraction"], **extra)


def _member_frame(verdict) -> Dict[str, pd.DataFrame]:
    return {"trajectories": verdict.trajectories[0].to_frame()} if verdict.trajectories else {}


def _case_example1(p: dict, icfg: IntegratorConfig, seed: int):
    system = example1(p["epsilon"], p["drift_sign"])
    verdict = assess_partial_stability(system, _ensemble(p, seed), p["horizon"], icfg, keep_trajectories=True)
    details = {**stability_report(verdict), "notes": verdict.notes}
    return _outcome(verdict.verdict, verdict.lam, verdict.k, verdict.growth_max, details), _member_frame(verdict)


def _case_example1_averaged(p: dict, icfg: IntegratorConfig, seed: int):
    eps = p["epsilon"]
    av = average_reduced(reduce_to_fast_axis(example1(eps)), p["quadrature_nodes"])
    extra = {} if p["v0"] is None else {"y_range": (p["v0"], p["v0"])}
    verdict = assess_partial_stability(av, _ensemble(p, seed, **extra), p["horizon"] / eps, icfg,
                                       keep_trajectories=True)
    bound = 4.0 / 15.0 * eps
    v_grid = np.linspace(-np.pi, np.pi, 21) if p["v0"] is None else np.array([p["v0"]])
    margin = quadratic_decay_margin(av, np.linspace(-p["radius"], p["radius"], 21), v_grid)
    details = {
        **stability_report(verdict), "notes": verdict.notes, "rate_bound": bound,
        "rate_ok": verdict.lam is not None and verdict.lam >= 0.9 * bound,
        "quadratic_decay_margin": margin,
    }
    residual = verdict.lam / bound - 1.0 if verdict.lam is not None else None
    return _outcome(verdict.verdict, verdict.lam, verdict.k, residual, details), _member_frame(verdict)


def _case_reduced_rate(p: dict, icfg: IntegratorConfig, seed: int):
    eps = p["epsilon"]
    red = reduce_to_fast_axis(example1(eps, p["drift_sign"]))
    verdict = assess_partial_stability(red, _ensemble(p, seed), p["horizon"] / eps, icfg, keep_trajectories=True)
    details = {**stability_report(verdict), "notes": verdict.notes,
               "lambda_over_epsilon": verdict.lam / eps if verdict.lam is not None else None}
    return _outcome(verdict.verdict, verdict.lam, verdict.k, verdict.growth_max, details), _member_frame(verdict)


def _case_threshold(p: dict, icfg: IntegratorConfig, seed: int):
    predicate = stability_predicate(_ensemble(p, seed), p["horizon"], icfg, scale_horizon_with_epsilon=True)
    sign = p["drift_sign"]
    est = find_epsilon_threshold(lambda eps: reduce_to_fast_axis(example1(eps, sign)),
                                 (p["eps_min"], p["eps_max"]), predicate, p["coarse_points"], p["rel_width"])
    verdict = "stable_throughout" if est.upper_end_stable else "threshold_found"
    return _outcome(verdict, residual=est.epsilon_stable, details=asdict(est)), {}


def _star_params(p: dict) -> KuramotoStarParams:
    A2 = p["A"] if p.get("A2") is None else p["A2"]
    return KuramotoStarParams(p["omega"], p["A"], A2, p["alpha"], p["u"])


def _case_star(p: dict, icfg: IntegratorConfig, seed: int):
    params = _star_params(p)
    locked = params.u == 0 and 0 < params.alpha < math.pi / 2
    zeta0 = phase_locked_equilibria(params.alpha)["c_alpha"] if locked else p["zeta0"]
    theta0 = theta_from_mu_zeta(p["mu0"], zeta0)
    rep = simulate_remote_sync_experiment(params, theta0, p["horizon"], icfg, p["transient_fraction"])

    if rep.gap_growth >= GROWTH_UNSTABLE:
        verdict = "unstable"
    elif rep.gap_fit is not None and rep.gap_fit.accepted:
        verdict = "stable"
    else:
        verdict = "inconclusive"
    details = rep.summary()
    details["theta0"] = theta0
    if params.u > 0 and params.symmetric and 0 < params.alpha < math.pi / 2:
        obs = rep.observables
        late = obs["t"] >= p["cycle_transient"]
        details["cycle_residual_max"] = float(obs.loc[late, "cycle_residual"].abs().max()) if late.any() else None
        details["frequency_gap"] = frequency_gap(rep.theta, params)
        details["zeta_rate"] = zeta_rate_lower_bound(params)
    if not params.symmetric:
        details["boundedness"] = unequal_coupling_gap_check(params, theta0, p["horizon"], icfg)
    eig = rep.classification.verdict_M1 if rep.classification is not None and params.u == 0 else None
    fit = rep.gap_fit
    outcome = _outcome(verdict, fit.rate_lambda if fit else None, fit.gain_k if fit else None,
                       rep.gap_growth, details, eig)
    return outcome, {"trajectories": rep.theta.to_frame(), "observables": rep.observables}


def _case_certificate(p: dict, icfg: IntegratorConfig, seed: int):
    av = average_reduced(reduce_to_fast_axis(example1(p["epsilon"])), p["quadrature_nodes"])
    grid = LyapunovGrid(p["w_radius"], p["w_points"], (p["v_min"], p["v_max"]), p["v_points"], p["z_points"])
    est = build_converse_lyapunov(av, p["delta"], grid, icfg, p["slack"], p["flow_step"], p["grad_step"])
    report = verify_lyapunov_certificate(est, av, icfg)
    margin = min(c.margin for c in report.checks.values())
    verdict = "certified" if report.passed and margin >= p["min_margin"] else "failed"
    details = {**est.to_report(), "verification": report.to_report(), "min_margin": margin}
    return _outcome(verdict, residual=margin, details=details), {}


def _no_slow_block(w, v, z):
    return np.zeros((0,) + np.shape(w)[1:])


def _case_envelope(p: dict, icfg: IntegratorConfig, seed: int):
    nominal = NominalSystem(lambda w, v, z: -w, _no_slow_block, 1, 0, name="scalar_decay")
    grid = LyapunovGrid(w_radius=p["w_radius"], w_points=p["w_points"], z_points=p["z_points"])
    cert = build_converse_lyapunov(nominal, p["delta"], grid, icfg)
    gain, psi_bar = p["gain"], p["psi_bar"]
    if p["kind"] == "vanishing":
        perturbed = NominalSystem(lambda w, v, z: -w + gain * w * np.sin(z), _no_slow_block, 1, 0, name="vanishing")
        spec = PerturbationBoundSpec(gamma1=lambda z: np.full_like(z, gain))
    else:
        perturbed = NominalSystem(lambda w, v, z: -w + psi_bar, _no_slow_block, 1, 0, name="constant")
        spec = PerturbationBoundSpec(psi1=lambda z: np.full_like(z, psi_bar))
    traj = integrate(batched_rhs(perturbed, 1), [p["w0"]], (0.0, p["horizon"]), icfg, "fast_axis_z")
    env = check_perturbation_envelope(cert, traj, spec, n=1, slack=p["slack"])
    tail_ok = env.tail_max <= (1.0 + p["slack"]) * env.tail_limit
    passed = env.passed and (tail_ok or p["kind"] == "vanishing")
    details = {**env.to_report(), "tail_ok": tail_ok, "certificate": cert.to_report()}
    return _outcome("pass" if passed else "fail", env.k1, env.k2, env.max_residual, details), {"trajectories": traj.to_frame()}


CASE_RUNNERS = {
    "example1": _case_example1,
    "example1_averaged": _case_example1_averaged,
    "reduced_rate": _case_reduced_rate,
    "threshold": _case_threshold,
    "star": _case_star,
    "certificate": _case_certificate,
    "envelope": _case_envelope,
}


# ---------------------------
# Scenarios
# ---------------------------
def _subset(p: dict, schema: Dict[str, Param]) -> dict:
    return {k: p[k] for k in schema if k in p}


def _alpha_cases(p: dict):
    base = _subset(p, STAR_SCHEMA)
    alphas = [round(p["alpha_min"] + i * p["alpha_step"], 10) for i in range(_alpha_points(p))]
    return [(f"alpha_{a:.4f}", "star", {**base, "alpha": a}) for a in alphas]


def _u_cases(p: dict):
    base = _subset(p, STAR_SCHEMA)
    return [(f"u_{u:g}", "star", {**base, "u": float(u)}) for u in p["u_values"]]


def _flip(values: List[float], verdicts: List[Optional[str]]) -> Optional[dict]:
    for i in range(len(verdicts) - 1):
        if verdicts[i] == "stable" and verdicts[i + 1] != "stable":
            return {"last_stable": values[i], "first_not_stable": values[i + 1]}
    return None


def _aggregate_alpha(p: dict, cases: List[dict]) -> dict:
    ok = [c for c in cases if c["status"] == "ok"]
    alphas = [c["params"]["alpha"] for c in ok]
    sim, eig = _flip(alphas, [c["verdict"] for c in ok]), _flip(alphas, [c["eig_verdict"] for c in ok])
    threshold = math.pi / 3

    def brackets(flip):
        return flip is not None and flip["last_stable"] < threshold < flip["first_not_stable"]

    return {"threshold_alpha": threshold, "simulation_flip": sim, "eigenvalue_flip": eig,
            "simulation_brackets_threshold": brackets(sim), "eigenvalue_brackets_threshold": brackets(eig)}


def _aggregate_u(p: dict, cases: List[dict]) -> dict:
    us = [c["params"]["u"] for c in cases]
    stable = [c["status"] == "ok" and c["verdict"] == "stable" for c in cases]
    order = np.argsort(us, kind="stable")
    rho_hat = None
    for idx in reversed(order):
        if not stable[idx]:
            break
        rho_hat = us[idx]
    return {"rho_hat": rho_hat, "three_A": 3.0 * p["A"]}


@dataclass(frozen=True)
class Scenario:
    description: str
    schema: Dict[str, Param]
    expand: Callable[[dict], List[Tuple[str, str, dict]]]
    cell_runner: Optional[str] = None
    cell_schema: Optional[Dict[str, Param]] = None
    integrator: dict = field(default_factory=dict)
    aggregate: Optional[Callable[[dict, List[dict]], dict]] = None
    cross: Optional[Callable[[dict], List[str]]] = None
    cell_cross: Optional[Callable[[dict], List[str]]] = None

    def params_schema(self, mode: str) -> Dict[str, Param]:
        return self.schema if mode == "run" or self.cell_schema is None else self.cell_schema

    def cross_check(self, mode: str) -> Optional[Callable[[dict], List[str]]]:
        return self.cross if mode == "run" or self.cell_schema is None else self.cell_cross


def _single(runner: str):
    return lambda p: [(runner, runner, p)]


STAR_RK4 = {"scheme": "rk4_fixed", "step": 0.01}

SCENARIOS: Dict[str, Scenario] = {
    "example1": Scenario("full slow-fast example1 ensemble in t", EXAMPLE1_SCHEMA, _single("example1"),
                         "example1", integrator={"scheme": "rk4_fixed", "step": 1e-3}),
    "example1_averaged": Scenario("partially averaged example1 in z against the 4/15*eps rate", AVERAGED_SCHEMA,
                                  _single("example1_averaged"), "example1_averaged"),
    "epsilon_sweep": Scenario("largest stable epsilon for reduced example1 (sweep: lambda per epsilon)",
                              THRESHOLD_SCHEMA, lambda p: [("threshold", "threshold", p)], "reduced_rate",
                              REDUCED_RATE_SCHEMA, cross=_threshold_cross),
    "kuramoto_locked": Scenario("star at u = 0 started near the locked state M1", STAR_SCHEMA, _single("star"), "star",
                                integrator=STAR_RK4, cross=_star_cross),
    "kuramoto_detuned": Scenario("detuned star: mu decay, averaged rate audit and frequency ellipse",
                                 {**STAR_SCHEMA, "u": Param("float", 10.0, ">= 0", _nonnegative, "detuning")},
                                 _single("star"), "star", integrator=STAR_RK4, cross=_star_cross),
    "alpha_sweep": Scenario("alpha grid at fixed u: eigenvalue and simulation verdicts", ALPHA_SWEEP_SCHEMA,
                            _alpha_cases, "star", STAR_SCHEMA, {"scheme": "rk4_fixed", "step": 0.02},
                            _aggregate_alpha, _alpha_cross, _star_cross),
    "u_sweep": Scenario("detuning grid at fixed alpha: smallest u beyond which M is stable", U_SWEEP_SCHEMA,
                        _u_cases, "star", STAR_SCHEMA, STAR_RK4, _aggregate_u, _star_cross, _star_cross),
    "certificate": Scenario("converse Lyapunov certificate for averaged example1", CERTIFICATE_SCHEMA,
                            _single("certificate"), "certificate",
                            integrator={"rtol": 1e-10, "atol": 1e-12}, cross=_certificate_cross),
    "envelope": Scenario("perturbation envelopes for dw/dz = -w", ENVELOPE_SCHEMA,
                         lambda p: [(kind, "envelope", {**p, "kind": kind}) for kind in ("vanishing", "constant")],
                         integrator={"rtol": 1e-10, "atol": 1e-12}),
}

SCENARIO_SCHEMAS: Dict[str, Dict[str, Param]] = {sid: sc.schema for sid, sc in SCENARIOS.items()}


# ---------------------------
# Config validation
# ---------------------------
def _check_params(given, schema: Dict[str, Param], where: str = "params") -> Tuple[dict, List[str]]:
    errors = []
    if not isinstance(given, dict):
        return {}, [f"{where} must be an object"]
    for key in given:
        if key not in schema:
            errors.append(f"unknown key {where}.{key}")
    resolved = {}
    for key, spec in schema.items():
        value = given.get(key, spec.default)
        if not _type_ok(spec.kind, value):
            errors.append(f"{where}.{key} must be of type {spec.kind}, got {value!r}")
            continue
        if spec.check is not None and value is not None and not spec.check(value):
            errors.append(f"{where}.{key} must be {spec.rule}, got {value!r}")
            continue
        resolved[key] = float(value) if spec.kind == "float" else value
    return resolved, errors


def _check_grid(grid, schema: Dict[str, Param]) -> Tuple[Dict[str, list], List[str]]:
    if not isinstance(grid, dict) or not 1 <= len(grid) <= 2:
        return {}, ["grid must be an object with one or two axes"]
    errors, axes, cells = [], {}, 1
    for key, values in grid.items():
        spec = schema.get(key)
        if spec is None:
            errors.append(f"unknown grid axis {key!r}")
            continue
        if spec.kind not in ("float", "int"):
            errors.append(f"grid axis {key!r} must be a numeric parameter")
            continue
        if not isinstance(values, list) or not values:
            errors.append(f"grid.{key} must be a non-empty list")
            continue
        for v in values:
            if not _type_ok(spec.kind, v) or (spec.check is not None and not spec.check(v)):
                errors.append(f"grid.{key} value {v!r} must be {spec.kind} {spec.rule}".rstrip())
        axes[key] = [float(v) if spec.kind == "float" else v for v in values]
        cells *= len(values)
    if cells > MAX_GRID_CELLS:
        errors.append(f"grid has {cells} cells, at most {MAX_GRID_CELLS} allowed")
    return axes, errors


def _cell_errors(check: Callable[[dict], List[str]], params: dict, axes: Dict[str, list]) -> List[str]:
    """Cross-field problems of every grid cell, each message listed once with its first cell."""
    seen: Dict[str, dict] = {}
    for cell in _grid_cells(axes):
        for err in check({**params, **cell}):
            seen.setdefault(err, cell)
    return [f"grid cell {cell}: {err}" for err, cell in seen.items()]


def validate_config(cfg, mode: str, seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    """Resolved run plan, or ConfigValidationError listing every problem found."""
    errors: List[str] = []
    if not isinstance(cfg, dict):
        raise ConfigValidationError(["config must be a JSON object"])
    for key in cfg:
        if key not in CONFIG_KEYS:
            errors.append(f"unknown top-level key {key!r}")

    sid = cfg.get("scenario")
    scenario = SCENARIOS.get(sid) if isinstance(sid, str) else None
    if scenario is None:
        errors.append(f"scenario must be one of {sorted(SCENARIOS)}, got {sid!r}")

    run_seed = seed if seed is not None else cfg.get("seed", DEFAULT_SEED)
    if not (isinstance(run_seed, int) and not isinstance(run_seed, bool) and run_seed >= 0):
        errors.append(f"seed must be a non-negative integer, got {run_seed!r}")
    out_dir = out if out is not None else cfg.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errors.append(f"output_dir must be a string, got {out_dir!r}")

    integrator = None
    given_icfg = cfg.get("integrator", {})
    if not isinstance(given_icfg, dict):
        errors.append("integrator must be an object")
    else:
        unknown = [k for k in given_icfg if k not in IntegratorConfig.__dataclass_fields__]
        errors.extend(f"unknown key integrator.{k}" for k in unknown)
        if not unknown:
            base = scenario.integrator if scenario is not None else {}
            try:
                integrator = IntegratorConfig(**{**base, **given_icfg})
            except ConfigValidationError as e:
                errors.extend(e.errors)

    params, axes = {}, {}
    if scenario is not None:
        params, param_errors = _check_params(cfg.get("params", {}), scenario.params_schema(mode))
        errors.extend(param_errors)
        check = scenario.cross_check(mode)
        if not param_errors and check is not None and mode == "run":
            errors.extend(check(params))
        if mode == "sweep":
            if scenario.cell_runner is None:
                errors.append(f"scenario {sid!r} does not support sweep")
            elif "grid" not in cfg:
                errors.append("sweep needs a grid")
            else:
                axes, grid_errors = _check_grid(cfg["grid"], scenario.params_schema(mode))
                errors.extend(grid_errors)
                if not (param_errors or grid_errors) and check is not None:
                    errors.extend(_cell_errors(check, params, axes))
        elif "grid" in cfg:
            errors.append("grid is only valid with the sweep command")

    if errors:
        raise ConfigValidationError(errors)
    return {
        "scenario": sid, "mode": mode, "seed": run_seed, "integrator": integrator, "params": params, "grid": axes,
        "output_dir": out_dir or os.path.join(OUTPUT_DIR, sid),
    }


# ---------------------------
# Execution
# ---------------------------
def _run_case(task: Tuple) -> dict:
    """Worker: one case or sweep cell; failures become an error record."""
    case_id, runner, params, icfg_dict, seed, out_dir, cell_file = task
    started = time.perf_counter()
    try:
        outcome, frames = CASE_RUNNERS[runner](params, IntegratorConfig(**icfg_dict), seed)
        artifacts = []
        if cell_file is None:
            for kind, frame in sorted(frames.items()):
                name = f"{kind}_{case_id}.csv"
                atomic_write_csv(os.path.join(out_dir, name), frame)
                artifacts.append(name)
        result = {"case": case_id, "params": params, **outcome, "artifacts": artifacts}
    except Exception as e:
        result = {"case": case_id, "params": params, "status": "error", "reason": type(e).__name__, "message": str(e)}
    if cell_file is not None:
        atomic_write_json(os.path.join(out_dir, cell_file), result)
    result["_elapsed"] = time.perf_counter() - started
    return result


def _execute(tasks: List[Tuple], jobs: int) -> List[dict]:
    if jobs > 1 and len(tasks) > 1:
        with Pool(min(jobs, len(tasks))) as P:
            return P.map(_run_case, tasks)
    return [_run_case(task) for task in tasks]


def _report_case(i: int, total: int, result: dict):
    if result["status"] == "ok":
        print(f"  ➡ [{i}/{total}] {result['case']}: {result['verdict']}")
    else:
        print(f"  ⚠ [{i}/{total}] {result['case']} failed: {result['reason']}: {result['message']}")


def _split_timing(results: List[dict]) -> Dict[str, float]:
    return {r["case"]: r.pop("_elapsed") for r in results}


def _config_echo(plan: dict) -> dict:
    return {"scenario": plan["scenario"], "seed": plan["seed"], "integrator": plan["integrator"].to_dict(),
            "params": plan["params"], "grid": plan["grid"]}


def run_scenario(plan: dict, jobs: int = 1) -> dict:
    scenario = SCENARIOS[plan["scenario"]]
    out_dir = plan["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    icfg = plan["integrator"].to_dict()
    tasks = [(case_id, runner, params, icfg, plan["seed"], out_dir, None)
             for case_id, runner, params in scenario.expand(plan["params"])]
    print(f"🚀 {plan['scenario']}: {len(tasks)} case(s) -> {out_dir}")

    started = time.perf_counter()
    results = _execute(tasks, jobs)
    timing = _split_timing(results)
    for i, result in enumerate(results, 1):
        _report_case(i, len(results), result)

    failed = sum(r["status"] != "ok" for r in results)
    summary = {"scenario": plan["scenario"], "mode": "run", "seed": plan["seed"], "config": _config_echo(plan),
               "status": "ok" if not failed else "failed", "failed_cases": failed, "cases": results}
    if scenario.aggregate is not None:
        summary["aggregate"] = scenario.aggregate(plan["params"], results)
    atomic_write_json(os.path.join(out_dir, "summary.json"), summary)
    atomic_write_json(os.path.join(out_dir, "timing.json"),
                      {"wall_clock_s": time.perf_counter() - started, "cases": timing, "jobs": jobs})
    write_plot_script(out_dir, plan["scenario"], _traces(results), None)
    return summary


def _grid_cells(axes: Dict[str, list]) -> List[dict]:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def _sweep_row(cell: dict, result: dict) -> dict:
    row = dict(cell)
    for col in SWEEP_COLUMNS:
        row[col] = result.get(col)
    return row


def _lambda_trend(axis: str, frame: pd.DataFrame) -> Optional[dict]:
    ok = frame[pd.to_numeric(frame["lambda_hat"], errors="coerce").notna()]
    if len(ok) < 3 or ok[axis].nunique() < 2:
        return None
    fit = linregress(ok[axis].astype(float), ok["lambda_hat"].astype(float))
    return {"axis": axis, "slope": float(fit.slope), "intercept": float(fit.intercept),
            "r_squared": float(fit.rvalue) ** 2, "points": int(len(ok))}


def sweep(plan: dict, jobs: int = 1) -> dict:
    scenario = SCENARIOS[plan["scenario"]]
    out_dir = plan["output_dir"]
    os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)
    icfg = plan["integrator"].to_dict()
    cells = _grid_cells(plan["grid"])
    tasks = [(f"cell_{i:05d}", scenario.cell_runner, {**plan["params"], **cell}, icfg, plan["seed"], out_dir,
              os.path.join("cells", f"cell_{i:05d}.json")) for i, cell in enumerate(cells)]
    print(f"🚀 {plan['scenario']} sweep over {' x '.join(plan['grid'])}: {len(tasks)} cell(s) -> {out_dir}")

    started = time.perf_counter()
    results = _execute(tasks, jobs)
    timing = _split_timing(results)
    for i, result in enumerate(results, 1):
        _report_case(i, len(results), result)

    frame = pd.DataFrame([_sweep_row(cell, r) for cell, r in zip(cells, results)],
                         columns=list(plan["grid"]) + SWEEP_COLUMNS)
    atomic_write_csv(os.path.join(out_dir, "sweep.csv"), frame)
    atomic_write_text(os.path.join(out_dir, "sweep.md"), frame.to_markdown(index=False) + "\n")

    failed = sum(r["status"] != "ok" for r in results)
    summary = {"scenario": plan["scenario"], "mode": "sweep", "seed": plan["seed"], "config": _config_echo(plan),
               "status": "ok" if not failed else "failed", "failed_cases": failed,
               "verdict_counts": frame["verdict"].fillna("error").value_counts().sort_index().to_dict(),
               "rows": frame.to_dict(orient="records")}
    if len(plan["grid"]) == 1:
        summary["lambda_trend"] = _lambda_trend(next(iter(plan["grid"])), frame)
    atomic_write_json(os.path.join(out_dir, "summary.json"), summary)
    atomic_write_json(os.path.join(out_dir, "timing.json"),
                      {"wall_clock_s": time.perf_counter() - started, "cells": timing, "jobs": jobs})
    write_plot_script(out_dir, plan["scenario"], [], list(plan["grid"]))
    return summary


# ---------------------------
# Plot script
# ---------------------------
PLOT_TEMPLATE = Template('''#!/usr/bin/env python3
"""
plot_results.py (generated for scenario {{ scenario }})
Reads the CSV files next to this script and writes plots.html.
Requirements:
    pip install pandas plotly
Run:
    python plot_results.py
"""

import os

import pandas as pd
import plotly.graph_objects as go
import plotly.io as pio

HERE = os.path.dirname(os.path.abspath(__file__))
TRACES = {{ traces }}
SWEEP_AXES = {{ sweep_axes }}
VERDICT_CODES = {{ verdict_codes }}


def decay_figure():
    fig = go.Figure()
    for spec in TRACES:
        df = pd.read_csv(os.path.join(HERE, spec["file"]))
        y = (df[spec["columns"]] ** 2).sum(axis=1) ** 0.5
        fig.add_trace(go.Scatter(x=df[spec["x"]], y=y, mode="lines", name=spec["label"]))
    fig.update_yaxes(type="log", title="||x||  /  mu")
    fig.update_xaxes(title="t or z")
    fig.update_layout(title="{{ scenario }}: decay traces")
    return fig


def verdict_figure():
    df = pd.read_csv(os.path.join(HERE, "sweep.csv"))
    df["code"] = df["verdict"].map(VERDICT_CODES)
    if len(SWEEP_AXES) == 2:
        table = df.pivot(index=SWEEP_AXES[1], columns=SWEEP_AXES[0], values="code")
        fig = go.Figure(go.Heatmap(z=table.values, x=table.columns, y=table.index, zmin=-1, zmax=1,
                                   colorscale="RdYlGn", colorbar=dict(title="verdict")))
        fig.update_xaxes(title=SWEEP_AXES[0])
        fig.update_yaxes(title=SWEEP_AXES[1])
    else:
        fig = go.Figure(go.Scatter(x=df[SWEEP_AXES[0]], y=df["code"], mode="markers", name="verdict"))
        fig.add_trace(go.Scatter(x=df[SWEEP_AXES[0]], y=df["lambda_hat"], mode="lines+markers",
                                 name="lambda_hat", yaxis="y2"))
        fig.update_layout(yaxis2=dict(overlaying="y", side="right", title="lambda_hat"))
        fig.update_xaxes(title=SWEEP_AXES[0])
    fig.update_layout(title="{{ scenario }}: verdict map (1 stable, 0 inconclusive, -1 unstable)")
    return fig


def main():
    figs = []
    if TRACES:
        figs.append(decay_figure())
    if SWEEP_AXES:
        figs.append(verdict_figure())
    body = "\\n".join(pio.to_html(f, full_html=False, include_plotlyjs="cdn") for f in figs)
    out = os.path.join(HERE, "plots.html")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(f"<html><head><meta charset=\\"utf-8\\"><title>{{ scenario }}</title></head><body>{body}</body></html>")
    print(f"Plots written to {out}")


if __name__ == "__main__":
    main()
''')


def _traces(results: List[dict]) -> List[dict]:
    traces = []
    for r in results:
        for name in r.get("artifacts", []):
            if name.startswith("observables_"):
                traces.append({"file": name, "x": "t", "columns": ["mu"], "label": f"{r['case']} mu"})
            elif name.startswith("trajectories_") and not any(a.startswith("observables_") for a in r["artifacts"]):
                traces.append({"file": name, "x": "axis", "columns": ["x0"], "label": f"{r['case']} ||x||"})
    return traces


def write_plot_script(out_dir: str, scenario: str, traces: List[dict], sweep_axes: Optional[List[str]]):
    text = PLOT_TEMPLATE.render(scenario=scenario, traces=repr(traces), sweep_axes=repr(sweep_axes or []),
                                verdict_codes=repr(VERDICT_CODES))
    atomic_write_text(os.path.join(out_dir, "plot_results.py"), text)


# ---------------------------
# CLI
# ---------------------------
def _digest(summary: dict) -> dict:
    out = {k: summary[k] for k in ("scenario", "mode", "seed", "status", "failed_cases")}
    if summary["mode"] == "run":
        out["cases"] = {c["case"]: c.get("verdict", c.get("reason")) for c in summary["cases"]}
        if "aggregate" in summary:
            out["aggregate"] = summary["aggregate"]
    else:
        out["verdict_counts"] = summary["verdict_counts"]
        out["lambda_trend"] = summary.get("lambda_trend")
    return out


def list_scenarios():
    for sid, sc in SCENARIOS.items():
        sweepable = "" if sc.cell_runner is None else " [sweep]"
        print(f"ℹ️ {sid}{sweepable}: {sc.description}")
        for key, spec in sc.schema.items():
            rule = f" ({spec.rule})" if spec.rule else ""
            print(f"    {key}: {spec.kind} = {spec.default!r}{rule}  {spec.help}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Run slow-fast stability scenarios from JSON configs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run one scenario"), ("sweep", "run a scenario over a 1-D or 2-D grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="Path to the scenario JSON config")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed")
        p.add_argument("--out", default=None, help="Override the output directory")
        p.add_argument("--jobs", type=int, default=None, help=f"Worker processes (default {JOBS})")
    sub.add_parser("list-scenarios", help="list scenario ids and their parameters")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-scenarios":
        list_scenarios()
        return 0

    try:
        try:
            raw = load_json(args.config)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigValidationError([f"cannot read config {args.config}: {e}"])
        plan = validate_config(raw, args.command, args.seed, args.out)
    except ConfigValidationError as e:
        for err in e.errors:
            print(f"❌ {err}")
        return 1

    jobs = args.jobs if args.jobs is not None else JOBS
    summary = run_scenario(plan, max(1, jobs)) if args.command == "run" else sweep(plan, max(1, jobs))
    print(json.dumps(_digest(summary), indent=2, default=str))
    if summary["failed_cases"]:
        print(f"⚠ {summary['failed_cases']} case(s) failed; see {plan['output_dir']}/summary.json")
        return 2
    print(f"✅ Done: {plan['output_dir']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Harness measuring how well the asymptotic formulas track direct integration:
convergence orders, horizon sensitivity, peak location and slow-flow envelopes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from ._io import write_csv, write_json
from .asymptotic_forced import (SlowFlowState, UnstableDetuningError, forced_expansion,
                                forced_initial_state_ndof, forced_modal_expansion,
                                integrate_slow_flow, leading_order_guesses, locate_peak,
                                modal_coupling, resonance_peak, slow_flow_rhs, stability,
                                stationary_solve)
from .asymptotic_free import FreeExpansion, NdofFreeExpansion
from .model import (InternalResonanceError, ModalModel, OscillatorParams, check_internal_resonance,
                    modal_reduce, solve_generalized_eigen)
from .timestep import OdeSystem, integrate, sample_envelope

HORIZON_RULES = ("gamma/eps", "gamma/eps2")


def horizon(epsilon: float, gamma: float, rule: str) -> float:
    if rule == "gamma/eps":
        return gamma / epsilon
    if rule == "gamma/eps2":
        return gamma / epsilon**2
    raise ValueError(f"horizon rule must be one of {HORIZON_RULES}")


def fit_slope(epsilons, errors) -> tuple[float, float, tuple[float, float]]:
    """OLS slope and intercept of log(error) on log(eps) with a 95% interval."""
    x, y = np.log(np.asarray(epsilons, float)), np.log(np.asarray(errors, float))
    if x.size < 3:
        raise ValueError("a slope needs at least three epsilon values")
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, x.size - 2) * fit.stderr
    return float(fit.slope), float(fit.intercept), (float(fit.slope - half), float(fit.slope + half))


def _check_epsilons(epsilons) -> list[float]:
    eps = sorted((float(e) for e in epsilons), reverse=True)
    if len(eps) < 3:
        raise ValueError("at least three epsilon values are required")
    if eps[0] / eps[-1] < 4 * (1 - 1e-12):
        raise ValueError("epsilon values must span at least a factor of four")
    return eps


def _per_epsilon(run, eps_list):
    """Independent per-epsilon runs, concurrently, results in input order."""
    with ThreadPoolExecutor(max_workers=min(len(eps_list), os.cpu_count() or 1)) as pool:
        return list(pool.map(run, eps_list))


def _sample_times(t0: float, t1: float, frequency: float, per_period: int = 50) -> np.ndarray:
    n = max(int(math.ceil(per_period * (t1 - t0) * frequency / (2 * math.pi))), 2)
    return np.linspace(t0, t1, n + 1)


@dataclass(frozen=True)
class ConvergenceReport:
    epsilons: tuple[float, ...]
    max_errors: tuple[float, ...]
    fitted_slope: float | None
    slope_ci: tuple[float, float] | None
    horizon_rule: str
    gamma: float
    status: str                     # "ok", "floor-limited" or "ill-prepared"
    label: str = ""
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None) -> None:
        write_json(json_path, self.to_dict())
        if csv_path is not None:
            write_csv(csv_path, ["epsilon", "max_error"], zip(self.epsilons, self.max_errors))


def _report(label, epsilons, errors, gamma, rule, status, details, min_slope_points=3):
    slope, ci = None, None
    if status == "ok":
        slope, _, ci = fit_slope(epsilons, errors)
    return ConvergenceReport(tuple(epsilons), tuple(float(e) for e in errors), slope, ci, rule,
                             float(gamma), status, label, details)


def convergence_order_free(params_base: OscillatorParams, a: float, epsilons=(0.02, 0.01, 0.005),
                           gamma: float = 20.0, *, order: int = 2, horizon_rule: str = "gamma/eps",
                           exact_start: bool = False, rel_tol: float = 1e-10,
                           abs_tol: float = 1e-12) -> ConvergenceReport:
    """Sup error of the free expansion against direct integration, per epsilon.

    The direct run starts from the expansion's own initial displacement (zero
    velocity).  Runs whose errors all sit within 1e3 integrator tolerances of
    zero are reported as floor-limited without a slope.
    """
    eps_list = _check_epsilons(epsilons)

    def one(eps):
        p = params_base.replace(epsilon=eps)
        ex = FreeExpansion.build(a, p, order, exact_start)
        t_end = horizon(eps, gamma, horizon_rule)
        y0 = FreeExpansion.build(a, p, 2, exact_start).initial_state()
        traj = integrate(OdeSystem.free_1dof(p), y0, (0.0, t_end), rel_tol, abs_tol)
        tt = _sample_times(0.0, t_end, ex.nu)
        return float(np.max(np.abs(traj.sample_component(tt, 0) - ex.displacement(tt))))

    errors = _per_epsilon(one, eps_list)
    floors = [1e3 * rel_tol * eps * abs(a) for eps in eps_list]
    status = "floor-limited" if all(e <= f for e, f in zip(errors, floors)) else "ok"
    return _report(f"free order {order}", eps_list, errors, gamma, horizon_rule, status,
                   {"a": a, "order": order, "params": params_base.to_dict()})


def convergence_order_forced(params_base: OscillatorParams, epsilons=(0.02, 0.01, 0.005),
                             gamma: float = 20.0, *, initial_offset=(0.0, 0.0), branch: int = 0,
                             horizon_rule: str = "gamma/eps", rel_tol: float = 1e-10,
                             abs_tol: float = 1e-12) -> ConvergenceReport:
    """Sup error of the forced expansion driven by the integrated slow flow.

    Initial data are the value and derivative of the expansion at the
    stationary point shifted by ``initial_offset`` = (da, dbeta).  Data farther
    than epsilon^2 from stationary are reported as ill-prepared.  ``branch``
    indexes the first-order stationary states, largest amplitude first; an
    unstable or out-of-bound point is refused.
    """
    eps_list = _check_epsilons(epsilons)
    prepared = all(max(abs(initial_offset[0]), abs(initial_offset[1])) <= eps**2 for eps in eps_list)

    def one(eps):
        p = params_base.replace(epsilon=eps)
        guesses = leading_order_guesses(p.sigma, p)
        if not 0 <= branch < len(guesses):
            raise ValueError(f"branch {branch} does not exist at sigma = {p.sigma}: {len(guesses)} found")
        point = stationary_solve(p.sigma, p, guesses[branch] if branch else None)
        rep = stability(point, p)
        if not rep.stable or rep.bound_satisfied is False:
            raise UnstableDetuningError(p.sigma, rep.sigma_bound)
        state0 = SlowFlowState(point.a + initial_offset[0], point.beta + initial_offset[1])
        t_end = horizon(eps, gamma, horizon_rule)
        slow = integrate_slow_flow(state0, p, t_end)
        da, db = slow_flow_rhs(state0, p)
        u0, v0 = forced_expansion(0.0, state0.a, state0.beta, p, da, db)
        traj = integrate(OdeSystem.forced_1dof(p), [float(u0), float(v0)], (0.0, t_end), rel_tol, abs_tol)
        tt = _sample_times(0.0, t_end, p.forcing_frequency)
        a_t, b_t = slow.at(tt)
        approx = forced_expansion(tt, a_t, b_t, p)[0]
        return float(np.max(np.abs(traj.sample_component(tt, 0) - approx)))

    errors = _per_epsilon(one, eps_list)
    status = "ok" if prepared else "ill-prepared"
    return _report("forced", eps_list, errors, gamma, horizon_rule, status,
                   {"initial_offset": list(initial_offset), "params": params_base.to_dict()})


def stationary_tracking_error(params: OscillatorParams, t_transient: float, window: float, *,
                              rel_tol: float = 1e-10, abs_tol: float = 1e-12) -> dict:
    """Sup error on [t_transient, t_transient + window] between the direct forced
    solution and the periodic expansion at the stationary point."""
    point = stationary_solve(params.sigma, params)
    u0, v0 = forced_expansion(0.0, point.a, point.beta, params)
    t_end = t_transient + window
    traj = integrate(OdeSystem.forced_1dof(params), [float(u0), float(v0)], (0.0, t_end), rel_tol, abs_tol)
    tt = _sample_times(t_transient, t_end, params.forcing_frequency)
    err = float(np.max(np.abs(traj.sample_component(tt, 0) - forced_expansion(tt, point.a, point.beta, params)[0])))
    return {"epsilon": params.epsilon, "a": point.a, "beta": point.beta, "max_error": err,
            "max_error_over_eps3": err / params.epsilon**3, "t_transient": t_transient, "window": window}


# --- N degrees of freedom -------------------------------------------------------

def _ndof_setup(model: ModalModel, mode: int, tol: float = 1e-3):
    basis = solve_generalized_eigen(model)
    report = check_internal_resonance(basis, mode, tol)
    if report.resonant:
        raise InternalResonanceError(report)
    return basis, modal_reduce(model, basis, mode)


def nonlinear_mode_check(model_base: ModalModel, a1: float, epsilons=(0.02, 0.01, 0.005),
                         gamma: float = 20.0, *, mode: int = 1, include_fundamental: bool = False,
                         coupling: bool = False, rel_tol: float = 1e-10,
                         abs_tol: float = 1e-12) -> dict:
    """Free motion started on the nonlinear mode: driven-coordinate error and the
    size of the non-driven modal coordinates, per epsilon, with fitted slopes."""
    eps_list = _check_epsilons(epsilons)
    n = model_base.n

    def one(eps):
        model = model_base.replace(epsilon=eps)
        basis, red = _ndof_setup(model, mode)
        ex = NdofFreeExpansion(a1, red, basis, 2, include_fundamental, coupling)
        t_end = gamma / eps
        traj = integrate(OdeSystem.free_ndof(model), ex.initial_state(), (0.0, t_end), rel_tol, abs_tol,
                         dense_components=range(n))
        tt = _sample_times(0.0, t_end, ex.driven.nu)
        y_num = basis.modal_coordinates(model, traj.sample(tt))
        y_app = ex.modal(tt)
        others = red.others()
        return {"epsilon": eps,
                "driven_error": float(np.max(np.abs(y_num[:, mode - 1] - y_app[:, mode - 1]))),
                "cross_max": float(np.max(np.abs(y_num[:, others]))),
                "cross_error": float(np.max(np.abs(y_num[:, others] - y_app[:, others])))}

    rows = _per_epsilon(one, eps_list)
    out = {"rows": rows, "a1": a1, "gamma": gamma, "include_fundamental": include_fundamental,
           "coupling": coupling}
    for key in ("driven_error", "cross_max", "cross_error"):
        slope, _, ci = fit_slope(eps_list, [r[key] for r in rows])
        out[f"{key}_slope"], out[f"{key}_ci"] = slope, ci
    return out


def convergence_order_forced_ndof(model_base: ModalModel, sigma: float, epsilons=(0.02, 0.01, 0.005),
                                  gamma: float = 20.0, *, mode: int = 1, coupling: bool = True,
                                  constant_denominator: str = "free", include_fundamental: bool = True,
                                  rel_tol: float = 1e-10, abs_tol: float = 1e-12) -> ConvergenceReport:
    """Forced N-DOF run from well-prepared data; error on the driven modal coordinate.

    ``details`` also carries the error of the non-driven modal coordinates.
    """
    eps_list = _check_epsilons(epsilons)
    n = model_base.n

    def one(eps):
        model = model_base.replace(epsilon=eps)
        basis, red = _ndof_setup(model, mode)
        p = red.effective_params(sigma)
        cp = modal_coupling(red) if coupling else None
        point = stationary_solve(sigma, p, coupling=cp)
        rep = stability(point, p, cp)
        if not rep.stable:
            raise UnstableDetuningError(sigma, rep.sigma_bound)
        kw = {"sigma": sigma, "constant_denominator": constant_denominator,
              "include_fundamental": include_fundamental}
        t_end = gamma / eps
        state0 = forced_initial_state_ndof(point, red, basis, constant_denominator=constant_denominator,
                                           include_fundamental=include_fundamental)
        traj = integrate(OdeSystem.forced_ndof(model, p.forcing_frequency), state0, (0.0, t_end),
                         rel_tol, abs_tol, dense_components=range(n))
        tt = _sample_times(0.0, t_end, p.forcing_frequency)
        y_num = basis.modal_coordinates(model, traj.sample(tt))
        y_app = forced_modal_expansion(tt, point.a, point.beta, red, **kw)
        others = red.others()
        return (float(np.max(np.abs(y_num[:, mode - 1] - y_app[:, mode - 1]))),
                float(np.max(np.abs(y_num[:, others] - y_app[:, others]))))

    errors, cross_errors = (list(col) for col in zip(*_per_epsilon(one, eps_list)))
    return _report("forced ndof", eps_list, errors, gamma, "gamma/eps", "ok",
                   {"sigma": sigma, "coupling": coupling, "constant_denominator": constant_denominator,
                    "include_fundamental": include_fundamental, "cross_errors": cross_errors})


def compare_constant_denominators(model: ModalModel, sigma: float, *, mode: int = 1,
                                  t_transient: float | None = None, window: float | None = None,
                                  rel_tol: float = 1e-10, abs_tol: float = 1e-12) -> dict:
    """Which constant-term divisor of the forced cross modes matches direct
    simulation: w_k^2 ("free") or w_k^2 - w^2 ("shifted").

    Compares the time average of each non-driven modal coordinate after the
    transient, where the constant term is the only surviving contribution.
    """
    basis, red = _ndof_setup(model, mode)
    p = red.effective_params(sigma)
    eps = model.epsilon
    cp = modal_coupling(red)
    point = stationary_solve(sigma, p, coupling=cp)
    lam = max(p.lam, 1e-3)
    t_transient = 10 / (eps * lam) if t_transient is None else t_transient
    period = 2 * math.pi / p.forcing_frequency
    window = 20 * period if window is None else window
    window = period * max(1, round(window / period))
    kw = {"sigma": sigma, "include_fundamental": True}
    y0 = forced_modal_expansion(0.0, point.a, point.beta, red, constant_denominator="free", **kw)[0]
    phis = np.asarray(basis.phis)
    state0 = np.concatenate([phis @ y0, np.zeros(model.n)])
    traj = integrate(OdeSystem.forced_ndof(model, p.forcing_frequency), state0,
                     (0.0, t_transient + window), rel_tol, abs_tol, dense_components=range(model.n))
    tt = t_transient + window * np.arange(4096) / 4096
    y_num = basis.modal_coordinates(model, traj.sample(tt))
    others = red.others()
    measured = np.mean(y_num[:, others], axis=0)
    out = {"epsilon": eps, "sigma": sigma, "modes": (others + 1).tolist(), "measured_mean": measured.tolist()}
    errs = {}
    for variant in ("free", "shifted"):
        y_app = forced_modal_expansion(tt, point.a, point.beta, red, constant_denominator=variant, **kw)
        predicted = np.mean(y_app[:, others], axis=0)
        out[f"{variant}_mean"] = predicted.tolist()
        errs[variant] = float(np.max(np.abs(predicted - measured)))
        out[f"{variant}_error"] = errs[variant]
    out["better"] = min(errs, key=errs.get)
    return out


# --- peak location --------------------------------------------------------------

@dataclass(frozen=True)
class PeakLocationRow:
    epsilon: float
    sigma_scan: float
    a_scan: float
    sigma_pred: float
    a_pred: float
    gap: float
    gap_over_eps2: float
    amplitude_rel_error: float


def peak_location_check(params: OscillatorParams, epsilon_list=(0.02, 0.01, 0.005)) -> dict:
    """Scanned maximum of the stationary amplitude against the two-term prediction.

    The scan traces the response branch (through its folds) around the predicted
    peak and refines the maximum along the branch.
    """
    if params.lam <= 0:
        raise ValueError("the peak check needs damping")
    eps_list = sorted((float(e) for e in epsilon_list), reverse=True)

    def one(eps):
        p = params.replace(epsilon=eps)
        est = resonance_peak(p)
        top = locate_peak(p)
        gap = abs(top.sigma - est.sigma)
        return PeakLocationRow(eps, top.sigma, top.a, est.sigma, est.amplitude, gap, gap / eps**2,
                               abs(top.a - est.amplitude) / abs(est.amplitude))

    rows = _per_epsilon(one, eps_list)
    ratios = [rows[i].gap / rows[i + 1].gap for i in range(len(rows) - 1)
              if rows[i + 1].gap > 0 and rows[i].epsilon / rows[i + 1].epsilon > 1.5]
    return {"rows": [asdict(r) for r in rows], "shrink_ratios": ratios, "params": params.to_dict()}


# --- slow flow against the simulated envelope -----------------------------------

def slow_flow_vs_envelope(params: OscillatorParams, state0: SlowFlowState, t_end: float, *,
                          rel_tol: float = 1e-10, abs_tol: float = 1e-12) -> dict:
    """Amplitude from the slow flow against the envelope of the direct solution / epsilon."""
    eps = params.epsilon
    slow = integrate_slow_flow(state0, params, t_end)
    da, db = slow_flow_rhs(state0, params) if state0.a > 0 else (0.0, 0.0)
    u0, v0 = forced_expansion(0.0, state0.a, state0.beta, params, da, db)
    traj = integrate(OdeSystem.forced_1dof(params), [float(u0), float(v0)], (0.0, t_end), rel_tol, abs_tol)
    times, env = sample_envelope(traj, 0)
    a_slow, _ = slow.at(times)
    dev = np.abs(env / eps - a_slow)
    return {"epsilon": eps, "t_end": t_end, "n_extrema": int(times.size),
            "sup_deviation": float(np.max(dev)),
            "sup_relative_deviation": float(np.max(dev / np.maximum(np.abs(a_slow), 1e-300))),
            "final_slow_a": float(a_slow[-1]), "final_envelope_over_eps": float(env[-1] / eps),
            "times": times, "envelope_over_eps": env / eps, "slow_a": a_slow}

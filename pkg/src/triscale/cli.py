"""Command-line front end: JSON config in, CSV/JSON artifacts out.

Every subcommand reads one JSON config (``--config``), applies ``--set
key.path=value`` overrides, rejects keys it does not know, runs, and writes
its output to ``--out`` (stdout when omitted, for single-file outputs).

Exit codes: 0 success, 2 configuration, 3 solver or failed residual check,
4 integrator, 5 refusal on internal resonance.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from ._io import csv_text, json_text
from .asymptotic_forced import (RESIDUAL_TOL, AmplitudeFloorError, SlowFlowState, StationarySolveError,
                                UnstableDetuningError, forced_initial_state, forced_initial_state_ndof,
                                frequency_response_curve,
                                locate_peak, modal_coupling, resonance_peak, stationary_solve)
from .asymptotic_free import NdofFreeExpansion, backbone_frequency, free_initial_state
from .model import (InternalResonanceError, ModalModel, ModelError, OscillatorParams,
                    check_internal_resonance, modal_reduce, model_from_dict, solve_generalized_eigen)
from .spectral import SpectrumError, dominant_peaks, spectrum
from .timestep import SYSTEM_KINDS, EnvelopeError, IntegratorError, OdeSystem, integrate
from . import validation

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_INTEGRATOR, EXIT_RESONANCE = 0, 2, 3, 4, 5

# Largest acceptable eigen residual and orthonormality defect for ``modal``.
EIGEN_RESIDUAL_TOL = 1e-9
ORTHONORMALITY_TOL = 1e-10


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    """Outputs were written but an internal residual check did not pass."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    data: dict
    out: Path | None
    rel_tol: float
    abs_tol: float


# --- config plumbing ------------------------------------------------------------

def apply_override(data: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as JSON when it can be."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
        node = child
    node[parts[-1]] = value


def _check_keys(data: dict, allowed: set[str], where: str = "config") -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _require(data: dict, key: str):
    if key not in data:
        raise ConfigError(f"config is missing '{key}'")
    return data[key]


def _params(data: dict) -> OscillatorParams:
    return OscillatorParams.from_dict(_require(data, "params"))


def _model(data: dict) -> ModalModel:
    return model_from_dict(_require(data, "model"))


def _reduction(data: dict):
    """Eigenbasis and reduction of the configured model, refusing internal resonance."""
    model = _model(data)
    basis = solve_generalized_eigen(model)
    mode = int(data.get("mode", 1))
    report = check_internal_resonance(basis, mode, float(data.get("resonance_tol", 1e-3)))
    if report.resonant:
        raise InternalResonanceError(report)
    return model, basis, modal_reduce(model, basis, mode)


def _one_dof_params(data: dict, sigma: float = 0.0) -> tuple[OscillatorParams, object]:
    """1-DOF parameters from ``params`` or from the driven mode of ``model``.

    Returns the parameters and the modal coupling (None for a plain oscillator).
    """
    if ("params" in data) == ("model" in data):
        raise ConfigError("config needs exactly one of 'params' or 'model'")
    if "params" in data:
        return _params(data), None
    _, _, red = _reduction(data)
    cp = modal_coupling(red) if data.get("coupling", False) else None
    return red.effective_params(sigma), cp


def _grid(spec, name: str) -> np.ndarray:
    if isinstance(spec, dict):
        _check_keys(spec, {"start", "stop", "num"}, name)
        return np.linspace(float(_require(spec, "start")), float(_require(spec, "stop")),
                           int(spec.get("num", 101)))
    if isinstance(spec, list) and spec:
        return np.array(spec, dtype=float)
    raise ConfigError(f"{name} must be a non-empty list or a {{start, stop, num}} object")


_ONE_OR_MANY = {"params", "model", "mode", "resonance_tol", "coupling"}


# --- commands -------------------------------------------------------------------

def cmd_backbone(cfg: RunConfig) -> list[tuple[str, str]]:
    """Backbone frequency at first and second order on an amplitude grid."""
    data = cfg.data
    _check_keys(data, _ONE_OR_MANY | {"amplitudes", "physical_amplitude"})
    p, _ = _one_dof_params(data)
    amps = _grid(_require(data, "amplitudes"), "amplitudes")
    if data.get("physical_amplitude", False):
        amps = amps / p.epsilon
    nu2 = backbone_frequency(amps, p, 2)
    nu1 = backbone_frequency(amps, p, 1)
    return [("csv", csv_text(["a", "nu", "nu_order1"], np.column_stack([amps, nu2, nu1])))]


def cmd_response(cfg: RunConfig) -> list[tuple[str, str]]:
    """Stationary amplitude and phase along the detuning range."""
    data = cfg.data
    _check_keys(data, _ONE_OR_MANY | {"sigma_range", "n_points"})
    p, cp = _one_dof_params(data)
    rng = _require(data, "sigma_range")
    if not (isinstance(rng, list) and len(rng) == 2):
        raise ConfigError("sigma_range must be [low, high]")
    curve = frequency_response_curve(p, (float(rng[0]), float(rng[1])), int(data.get("n_points", 201)), cp)
    rows = [(pt.sigma, p.omega + p.epsilon * pt.sigma, pt.a, pt.beta, pt.gamma, pt.stable, pt.residual,
             pt.trace_j, pt.det_j) for pt in curve.points]
    header = ["sigma", "forcing_freq", "a", "beta", "gamma", "stable", "residual", "trace_j", "det_j"]
    out = [("csv", csv_text(header, rows))]
    worst = max(pt.residual for pt in curve.points)
    if worst > RESIDUAL_TOL:
        raise CheckFailed(f"stationary residual {worst:.3g} above {RESIDUAL_TOL:g}", out)
    return out


def cmd_peak(cfg: RunConfig) -> list[tuple[str, str]]:
    """Two-term prediction of the resonance peak, optionally checked against the branch maximum."""
    data = cfg.data
    _check_keys(data, _ONE_OR_MANY | {"locate"})
    p, cp = _one_dof_params(data)
    est = resonance_peak(p)
    payload = asdict(est)
    payload.update(amplitude=est.amplitude, sigma=est.sigma, beta=est.beta, gamma=-est.beta)
    if data.get("locate", False):
        top = locate_peak(p, coupling=cp)
        payload["located"] = {"sigma": top.sigma, "a": top.a, "beta": top.beta, "residual": top.residual}
    return [("json", json_text(payload))]


_SIM_KEYS = _ONE_OR_MANY | {"system", "t_end", "t_start", "initial", "sigma", "output"}


def _run_simulation(cfg: RunConfig):
    data = cfg.data
    kind = _require(data, "system")
    if kind not in SYSTEM_KINDS:
        raise ConfigError(f"system must be one of {list(SYSTEM_KINDS)}")
    t0 = float(data.get("t_start", 0.0))
    t_end = float(_require(data, "t_end"))
    init = data.get("initial", {})
    _check_keys(init, {"state", "amplitude", "physical_amplitude", "stationary"}, "initial")
    if kind.endswith("1dof"):
        params = _params(data)
        system = OdeSystem(kind, params=params)
        eps = params.epsilon
    else:
        model, basis, red = _reduction(data)
        wf = red.omega + model.epsilon * float(data.get("sigma", 0.0))
        system = OdeSystem.free_ndof(model) if kind == "free_ndof" else OdeSystem.forced_ndof(model, wf)
        eps = model.epsilon

    if "state" in init:
        y0 = np.array(init["state"], dtype=float)
        if y0.size != system.dimension:
            raise ConfigError(f"initial.state needs {system.dimension} entries")
    elif "amplitude" in init:
        if not kind.startswith("free"):
            raise ConfigError("initial.amplitude applies to free systems; use initial.stationary")
        a = float(init["amplitude"]) / (eps if init.get("physical_amplitude", False) else 1.0)
        if kind == "free_1dof":
            y0 = free_initial_state(a, system.params)
        else:
            y0 = NdofFreeExpansion(a, red, basis, coupling=bool(data.get("coupling", False))).initial_state()
    elif init.get("stationary", False):
        if kind == "forced_1dof":
            point = stationary_solve(system.params.sigma, system.params)
            y0 = forced_initial_state(point, system.params)
        elif kind == "forced_ndof":
            sigma = float(data.get("sigma", 0.0))
            cp = modal_coupling(red) if data.get("coupling", False) else None
            p = red.effective_params(sigma)
            point = stationary_solve(sigma, p, coupling=cp)
            y0 = forced_initial_state_ndof(point, red, basis, include_fundamental=cp is not None)
        else:
            raise ConfigError("initial.stationary applies to forced systems")
    else:
        raise ConfigError("initial needs one of state, amplitude or stationary")

    traj = integrate(system, y0, (t0, t_end), cfg.rel_tol, cfg.abs_tol)
    return system, traj


def _output_times(data: dict, traj) -> np.ndarray | None:
    spec = data.get("output")
    if spec is None:
        return None
    _check_keys(spec, {"step", "n"}, "output")
    if "step" in spec:
        step = float(spec["step"])
        if step <= 0:
            raise ConfigError("output.step must be positive")
        n = int(math.floor((traj.t_end - traj.t_start) / step * (1 + 1e-12)))
        return traj.t_start + step * np.arange(n + 1)
    return np.linspace(traj.t_start, traj.t_end, int(_require(spec, "n")))


def cmd_simulate(cfg: RunConfig) -> list[tuple[str, str]]:
    """Direct integration of one of the four systems; trajectory CSV."""
    _check_keys(cfg.data, _SIM_KEYS)
    _, traj = _run_simulation(cfg)
    header, rows = traj.table(_output_times(cfg.data, traj))
    return [("csv", csv_text(header, rows))]


def cmd_spectrum(cfg: RunConfig) -> list[tuple[str, str]]:
    """Spectrum of a simulated component plus its dominant peaks (second file)."""
    data = cfg.data
    _check_keys(data, (_SIM_KEYS - {"output"}) | {"spectrum"})
    opts = data.get("spectrum", {})
    _check_keys(opts, {"component", "n_samples", "window_length", "n_peaks", "floor"}, "spectrum")
    _, traj = _run_simulation(cfg)
    spec = spectrum(traj, int(opts.get("component", 0)), int(opts.get("n_samples", 8192)),
                    opts.get("window_length"))
    peaks = dominant_peaks(spec, int(opts.get("n_peaks", 3)), float(opts.get("floor", 0.01)))
    return [("csv", csv_text(["frequency", "magnitude"], np.column_stack([spec.frequencies, spec.magnitudes]))),
            ("peaks", csv_text(["frequency", "magnitude", "bin_index"],
                               [(pk.frequency, pk.magnitude, pk.bin_index) for pk in peaks]))]


def cmd_modal(cfg: RunConfig) -> list[tuple[str, str]]:
    """Eigenbasis, resonance flags and the driven-mode reduction of a model."""
    data = cfg.data
    _check_keys(data, {"model", "mode", "resonance_tol"})
    model = _model(data)
    basis = solve_generalized_eigen(model)
    mode = int(data.get("mode", 1))
    report = check_internal_resonance(basis, mode, float(data.get("resonance_tol", 1e-3)))
    red = modal_reduce(model, basis, mode)
    residual = float(np.max(basis.residuals(model)))
    ortho = float(basis.orthonormality_error(model))
    payload = {
        "omegas": basis.omegas, "phis": basis.phis, "max_residual": residual,
        "orthonormality_error": ortho, "mode": mode,
        "resonance_flags": [asdict(f) for f in report.flags],
        "reduction": {"delta_phi": red.delta_phi, "check_c": red.check_c, "check_d": red.check_d,
                      "lambda_k": red.lambda_k, "f_k": red.f_k},
    }
    out = [("json", json_text(payload))]
    scale = max(1.0, float(np.max(basis.omegas)) ** 2)
    if residual > EIGEN_RESIDUAL_TOL * scale or ortho > ORTHONORMALITY_TOL:
        raise CheckFailed(f"eigen residual {residual:.3g} or orthonormality {ortho:.3g} too large", out)
    return out


# validate: check name -> (allowed keys, runner)
def _v_free(d, cfg):
    r = validation.convergence_order_free(
        _params(d), float(_require(d, "a")), d.get("epsilons", (0.02, 0.01, 0.005)), float(d.get("gamma", 20)),
        order=int(d.get("order", 2)), horizon_rule=d.get("horizon_rule", "gamma/eps"),
        exact_start=bool(d.get("exact_start", False)), rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    return r.to_dict(), (["epsilon", "max_error"], list(zip(r.epsilons, r.max_errors)))


def _v_forced(d, cfg):
    r = validation.convergence_order_forced(
        _params(d), d.get("epsilons", (0.02, 0.01, 0.005)), float(d.get("gamma", 20)),
        initial_offset=tuple(d.get("initial_offset", (0.0, 0.0))), branch=int(d.get("branch", 0)),
        horizon_rule=d.get("horizon_rule", "gamma/eps"), rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    return r.to_dict(), (["epsilon", "max_error"], list(zip(r.epsilons, r.max_errors)))


def _v_tracking(d, cfg):
    r = validation.stationary_tracking_error(_params(d), float(_require(d, "t_transient")),
                                             float(_require(d, "window")), rel_tol=cfg.rel_tol,
                                             abs_tol=cfg.abs_tol)
    return r, None


def _v_nonlinear_mode(d, cfg):
    r = validation.nonlinear_mode_check(
        _model(d), float(_require(d, "a1")), d.get("epsilons", (0.02, 0.01, 0.005)), float(d.get("gamma", 20)),
        mode=int(d.get("mode", 1)), include_fundamental=bool(d.get("include_fundamental", False)),
        coupling=bool(d.get("coupling", False)), rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    keys = ["epsilon", "driven_error", "cross_max", "cross_error"]
    return r, (keys, [[row[k] for k in keys] for row in r["rows"]])


def _v_forced_ndof(d, cfg):
    r = validation.convergence_order_forced_ndof(
        _model(d), float(d.get("sigma", 0.0)), d.get("epsilons", (0.02, 0.01, 0.005)), float(d.get("gamma", 20)),
        mode=int(d.get("mode", 1)), coupling=bool(d.get("coupling", True)),
        constant_denominator=d.get("constant_denominator", "free"),
        include_fundamental=bool(d.get("include_fundamental", True)), rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    return r.to_dict(), (["epsilon", "max_error"], list(zip(r.epsilons, r.max_errors)))


def _v_denominators(d, cfg):
    r = validation.compare_constant_denominators(_model(d), float(d.get("sigma", 0.0)), mode=int(d.get("mode", 1)),
                                                 rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    return r, None


def _v_peak_location(d, cfg):
    r = validation.peak_location_check(_params(d), d.get("epsilons", (0.02, 0.01, 0.005)))
    keys = list(r["rows"][0]) if r["rows"] else []
    return r, (keys, [[row[k] for k in keys] for row in r["rows"]])


def _v_envelope(d, cfg):
    init = _require(d, "initial")
    _check_keys(init, {"a", "beta"}, "initial")
    r = validation.slow_flow_vs_envelope(_params(d), SlowFlowState(float(init["a"]), float(init["beta"])),
                                         float(_require(d, "t_end")), rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol)
    table = (["t", "envelope_over_eps", "slow_a"],
             np.column_stack([r["times"], r["envelope_over_eps"], r["slow_a"]]))
    summary = {k: v for k, v in r.items() if k not in ("times", "envelope_over_eps", "slow_a")}
    return summary, table


_CHECKS = {
    "free": ({"params", "a", "epsilons", "gamma", "order", "horizon_rule", "exact_start"}, _v_free),
    "forced": ({"params", "epsilons", "gamma", "initial_offset", "branch", "horizon_rule"}, _v_forced),
    "tracking": ({"params", "t_transient", "window"}, _v_tracking),
    "nonlinear_mode": ({"model", "a1", "epsilons", "gamma", "mode", "include_fundamental", "coupling"},
                       _v_nonlinear_mode),
    "forced_ndof": ({"model", "sigma", "epsilons", "gamma", "mode", "coupling", "constant_denominator",
                     "include_fundamental"}, _v_forced_ndof),
    "denominators": ({"model", "sigma", "mode"}, _v_denominators),
    "peak_location": ({"params", "epsilons"}, _v_peak_location),
    "envelope": ({"params", "initial", "t_end"}, _v_envelope),
}


def cmd_validate(cfg: RunConfig) -> list[tuple[str, str]]:
    """Run one validation check; JSON report plus a CSV table when the check has one."""
    data = cfg.data
    check = _require(data, "check")
    if check not in _CHECKS:
        raise ConfigError(f"check must be one of {sorted(_CHECKS)}")
    allowed, runner = _CHECKS[check]
    _check_keys(data, allowed | {"check"})
    report, table = runner(data, cfg)
    out = [("json", json_text({"check": check, **report}))]
    if table is not None:
        out.append(("table", csv_text(*table)))
    return out


COMMANDS = {
    "backbone": cmd_backbone,
    "response": cmd_response,
    "peak": cmd_peak,
    "simulate": cmd_simulate,
    "spectrum": cmd_spectrum,
    "validate": cmd_validate,
    "modal": cmd_modal,
}

# suffix appended to the --out stem for secondary files
_SECONDARY = {"peaks": "_peaks.csv", "table": ".csv"}


def _write(outputs, out: Path | None) -> None:
    if out is None:
        if len(outputs) > 1:
            raise ConfigError("this command writes several files; pass --out")
        sys.stdout.write(outputs[0][1])
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    for tag, text in outputs:
        path = out if tag in ("csv", "json") else out.with_name(out.stem + _SECONDARY[tag])
        path.write_bytes(text.encode("utf-8"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="triscale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        p = sub.add_parser(name, help=func.__doc__.splitlines()[0])
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, help="output file (stdout when omitted)")
        p.add_argument("--rel-tol", type=float, default=1e-10, help="integrator relative tolerance")
        p.add_argument("--abs-tol", type=float, default=1e-12, help="integrator absolute tolerance")
        p.add_argument("--seedless", action="store_true",
                       help="fail if any global random number generator state changes")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted key, JSON value); repeatable")
    return parser


def _load_config(args) -> RunConfig:
    try:
        data = json.loads(args.config.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for assignment in args.set:
        apply_override(data, assignment)
    return RunConfig(args.command, data, args.out, args.rel_tol, args.abs_tol)


def _rng_state():
    np_state = np.random.get_state()
    return (np_state[0], np_state[1].tobytes(), *np_state[2:]), random.getstate()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    before = _rng_state() if args.seedless else None
    try:
        cfg = _load_config(args)
        try:
            outputs = COMMANDS[cfg.command](cfg)
            failure = None
        except CheckFailed as exc:
            outputs, failure = exc.args[1], exc.args[0]
        _write(outputs, cfg.out)
        if failure is not None:
            print(f"error: {failure}", file=sys.stderr)
            return EXIT_SOLVER
        if before is not None and _rng_state() != before:
            print("error: a random number generator was used", file=sys.stderr)
            return EXIT_SOLVER
        return EXIT_OK
    except InternalResonanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESONANCE
    except (StationarySolveError, AmplitudeFloorError, UnstableDetuningError, EnvelopeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IntegratorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRATOR
    except (ConfigError, ModelError, SpectrumError, ValueError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())

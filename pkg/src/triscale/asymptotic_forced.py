"""Forced, damped response near primary resonance: slow flow, stationary
branches, stability, the resonance peak and the reconstructed expansion.

The forcing angular frequency is ``omega + epsilon * sigma`` and the response
is about ``epsilon * a * cos((omega + epsilon * sigma) t + beta)``.  Internally
the slow-flow rates are handled divided by epsilon (``G = rate / epsilon``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, root

from .asymptotic_free import cross_mode_sums
from .model import (Eigenbasis, InternalResonanceError, ModalReduction, OscillatorParams,
                    check_internal_resonance)
from .timestep import integrate_scaled


class AmplitudeFloorError(ValueError):
    """Amplitude below the floor where the phase equation is singular."""

    def __init__(self, message: str, time: float | None = None):
        super().__init__(message if time is None else f"{message} at t = {time:.17g}")
        self.time = time


class StationarySolveError(RuntimeError):
    def __init__(self, message: str, best: tuple[float, float, float], residual: float):
        super().__init__(f"{message}; best iterate (sigma, a, beta) = {best}, residual {residual:.3g}")
        self.best = best
        self.residual = residual


class UnstableDetuningError(ValueError):
    def __init__(self, sigma: float, bound: float | None):
        text = "undefined (complex root)" if bound is None else f"{bound:.17g}"
        super().__init__(f"stationary point at sigma = {sigma:.17g} is unstable; stability bound {text}")
        self.sigma = sigma
        self.bound = bound


def wrap_phase(beta):
    """Map to (-pi, pi]."""
    wrapped = np.mod(np.asarray(beta, dtype=float) + math.pi, 2 * math.pi) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def amplitude_floor(params: OscillatorParams) -> float:
    """a_min = 1e-8 |F_m| / (lambda omega); lambda = 0 drops the damping factor."""
    if params.f_m == 0:
        return 0.0
    scale = params.lam * params.omega if params.lam > 0 else params.omega
    return 1e-8 * abs(params.f_m) / scale


@dataclass(frozen=True)
class SlowFlowState:
    a: float
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "beta", wrap_phase(self.beta))


@dataclass(frozen=True)
class ModalCoupling:
    """Extra epsilon^2 slow-flow terms fed back by the non-driven modes.

    dbeta/dt gains eps^2 (-freq_c a^2 - freq_d a^4 + 3 force_q a cos beta) and
    da/dt gains eps^2 force_q a^2 sin beta.  ``force_q`` comes from the direct
    forcing response of the other modes.
    """

    freq_c: float = 0.0
    freq_d: float = 0.0
    force_q: float = 0.0


def modal_coupling(reduction: ModalReduction) -> ModalCoupling:
    s0, s1, s2, s3 = cross_mode_sums(reduction)
    w, dl, c, d = reduction.omega, reduction.driven_delta, reduction.c, reduction.d
    others = reduction.others()
    q = float(np.sum(reduction.delta_phi[others] * reduction.f_k[others]
                     / (reduction.omegas[others] ** 2 - w**2)))
    return ModalCoupling(freq_c=c**2 * dl**4 * (s0 + s2 / 2) / (2 * w),
                         freq_d=3 * d**2 * dl**6 * (9 * s1 + s3) / (32 * w),
                         force_q=3 * d * dl**3 * q / (8 * w))


def _first_order(a, beta, sigma, p: OscillatorParams):
    w, lam, f, d = p.omega, p.lam, p.f_m, p.d
    sb, cb = math.sin(beta), math.cos(beta)
    g1 = -f * sb / (2 * w) - lam * a / 2
    g2 = -sigma + 3 * d * a * a / (8 * w) - f * cb / (2 * a * w)
    return g1, g2


def _second_order(a, beta, sigma, p: OscillatorParams, coupling: ModalCoupling | None):
    w, lam, f, c, d = p.omega, p.lam, p.f_m, p.c, p.d
    sb, cb = math.sin(beta), math.cos(beta)
    w2, w3 = w * w, w * w * w
    h1 = (3 * d * lam * a**3 / (16 * w2) + sigma * f * sb / (4 * w2) + lam * f * cb / (8 * w2)
          + 9 * d * a * a * f * sb / (32 * w3))
    h2 = (-lam**2 / (8 * w) - 15 * d * d * a**4 / (256 * w3) - 5 * c * c * a * a / (12 * w3)
          + sigma * f * cb / (4 * w2 * a) + 3 * d * a * f * cb / (32 * w3)
          - lam * f * sb / (8 * w2 * a))
    if coupling is not None:
        h1 += coupling.force_q * a * a * sb
        h2 += -coupling.freq_c * a * a - coupling.freq_d * a**4 + 3 * coupling.force_q * a * cb
    return h1, h2


def _scaled_rates(a, beta, sigma, p, coupling=None):
    g1, g2 = _first_order(a, beta, sigma, p)
    h1, h2 = _second_order(a, beta, sigma, p, coupling)
    eps = p.epsilon
    return g1 + eps * h1, g2 + eps * h2


def _check_floor(a: float, p: OscillatorParams) -> None:
    floor = amplitude_floor(p)
    if a < floor or (a == 0 and p.f_m != 0) or a < 0:
        raise AmplitudeFloorError(f"amplitude {a!r} below the floor {floor:.3g}")


def slow_flow_rhs(state: SlowFlowState, params: OscillatorParams,
                  coupling: ModalCoupling | None = None) -> tuple[float, float]:
    """(da/dt, dbeta/dt) truncated after the epsilon^2 terms."""
    _check_floor(state.a, params)
    g1, g2 = _scaled_rates(state.a, state.beta, params.sigma, params, coupling)
    return params.epsilon * g1, params.epsilon * g2


@dataclass(frozen=True, eq=False)
class SlowFlowTrajectory:
    """Slow-flow solution; ``beta`` is wrapped, ``beta_unwrapped`` is continuous."""

    times: np.ndarray
    a: np.ndarray
    beta_unwrapped: np.ndarray
    dense: object

    @property
    def beta(self) -> np.ndarray:
        return wrap_phase(self.beta_unwrapped)

    @property
    def final(self) -> SlowFlowState:
        return SlowFlowState(self.a[-1], self.beta_unwrapped[-1])

    def at(self, t) -> tuple[np.ndarray, np.ndarray]:
        """(a, unwrapped beta) interpolated at ``t``."""
        y = self.dense(t)
        return y[..., 0], y[..., 1]


class _FloorHit(Exception):
    def __init__(self, t):
        self.t = t


def integrate_slow_flow(state0: SlowFlowState, params: OscillatorParams, t_end: float,
                        tol: float = 1e-10, coupling: ModalCoupling | None = None) -> SlowFlowTrajectory:
    _check_floor(state0.a, params)
    floor = amplitude_floor(params)
    eps, sigma = params.epsilon, params.sigma

    def fun(t, y):
        if y[0] < floor or (y[0] <= 0 and params.f_m != 0):
            raise _FloorHit(t)
        g1, g2 = _scaled_rates(y[0], y[1], sigma, params, coupling)
        return np.array([eps * g1, eps * g2])

    try:
        times, states, dense, _ = integrate_scaled(
            fun, [state0.a, state0.beta], (0.0, t_end), rel_tol=tol, abs_tol=max(1e-13, tol * 1e-2))
    except _FloorHit as hit:
        raise AmplitudeFloorError("slow-flow amplitude crossed the floor", hit.t) from None
    return SlowFlowTrajectory(times, states[:, 0], states[:, 1], dense)


# --- stationary points --------------------------------------------------------

def _jacobian(a, beta, sigma, p, coupling):
    """Rows G1, G2; columns d/da, d/dbeta, d/dsigma.  Analytic first-order part,
    central differences for the epsilon^2 part."""
    w, lam, f, d = p.omega, p.lam, p.f_m, p.d
    sb, cb = math.sin(beta), math.cos(beta)
    jac = np.array([
        [-lam / 2, -f * cb / (2 * w), 0.0],
        [3 * d * a / (4 * w) + f * cb / (2 * a * a * w), f * sb / (2 * a * w), -1.0],
    ])
    x = np.array([a, beta, sigma])
    steps = 1e-6 * np.maximum(1.0, np.abs(x))
    for j in range(3):
        up, dn = x.copy(), x.copy()
        up[j] += steps[j]
        dn[j] -= steps[j]
        hu = _second_order(*up, p, coupling)
        hd = _second_order(*dn, p, coupling)
        jac[0, j] += p.epsilon * (hu[0] - hd[0]) / (2 * steps[j])
        jac[1, j] += p.epsilon * (hu[1] - hd[1]) / (2 * steps[j])
    return jac


_FREE_COLUMNS = {"sigma": (0, 1), "a": (1, 2), "beta": (0, 2)}


def _solve_fixed(fixed: str, value: float, x0, p, coupling, tol: float, max_iter: int = 100):
    """Newton with backtracking on (G1, G2) = 0 in the variables other than ``fixed``.

    ``x0`` is a full (a, beta, sigma) guess.  Returns (a, beta, sigma, max|G|).
    """
    names = ("a", "beta", "sigma")
    x = np.array(x0, dtype=float)
    x[names.index(fixed)] = value
    cols = _FREE_COLUMNS[fixed]
    floor = amplitude_floor(p)

    def resid(xx):
        if xx[0] <= floor or (xx[0] <= 0):
            return None
        return np.array(_scaled_rates(xx[0], xx[1], xx[2], p, coupling))

    g = resid(x)
    if g is None:
        raise AmplitudeFloorError("initial guess below the amplitude floor")
    norm = float(np.max(np.abs(g)))
    for _ in range(max_iter):
        if norm <= tol:
            return x[0], x[1], x[2], norm
        jac = _jacobian(x[0], x[1], x[2], p, coupling)[:, cols]
        try:
            step = np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        damping = 1.0
        for _ in range(40):
            trial = x.copy()
            trial[list(cols)] += damping * step
            gt = resid(trial)
            if gt is not None and float(np.max(np.abs(gt))) < norm:
                x, g, norm = trial, gt, float(np.max(np.abs(gt)))
                break
            damping *= 0.5
        else:
            break
    # hybrid Powell fallback on the same unknowns, then a Newton polish
    def fun(z):
        xx = x.copy()
        xx[list(cols)] = z
        if xx[0] <= floor or xx[0] <= 0:
            return np.array([1e6, 1e6])
        return np.array(_scaled_rates(xx[0], xx[1], xx[2], p, coupling))

    sol = root(fun, x[list(cols)], method="hybr", options={"xtol": 1e-15, "maxfev": 2000})
    xx = x.copy()
    xx[list(cols)] = sol.x
    gx = resid(xx)
    if gx is not None and float(np.max(np.abs(gx))) < norm:
        x, g, norm = xx, gx, float(np.max(np.abs(gx)))
    for _ in range(5):
        if norm <= tol:
            break
        jac = _jacobian(x[0], x[1], x[2], p, coupling)[:, cols]
        try:
            trial = x.copy()
            trial[list(cols)] += np.linalg.solve(jac, -g)
        except np.linalg.LinAlgError:
            break
        gt = resid(trial)
        if gt is None or float(np.max(np.abs(gt))) >= norm:
            break
        x, g, norm = trial, gt, float(np.max(np.abs(gt)))
    if norm <= tol:
        return x[0], x[1], x[2], norm
    raise StationarySolveError("stationary solve did not converge",
                               (float(x[2]), float(x[0]), float(x[1])), norm * p.epsilon)


def leading_order_guesses(sigma: float, params: OscillatorParams) -> list[SlowFlowState]:
    """Stationary states of the first-order slow flow, largest amplitude first.

    Their squared amplitudes are the positive real roots of
    k^2 x^3 - 2 sigma k x^2 + (sigma^2 + lambda^2/4) x - F^2/(4 w^2) = 0 with
    k = 3d/(8w); an undamped oscillator borrows lambda = 1e-3 to keep the
    linear case finite.
    """
    p = params
    lam = p.lam if p.lam > 0 else 1e-3
    k = 3 * p.d / (8 * p.omega)
    coeffs = [k * k, -2 * sigma * k, sigma * sigma + lam * lam / 4, -p.f_m**2 / (4 * p.omega**2)]
    while coeffs and coeffs[0] == 0:
        coeffs.pop(0)
    roots = np.roots(coeffs)
    xs = sorted((float(r.real) for r in roots if abs(r.imag) <= 1e-9 * max(1.0, abs(r)) and r.real > 0),
                reverse=True)
    floor = 10 * amplitude_floor(p)
    out = []
    for x in xs:
        a = max(math.sqrt(x), floor)
        sb = -lam * p.omega * a / p.f_m
        cb = 2 * a * p.omega * (k * a * a - sigma) / p.f_m
        out.append(SlowFlowState(a, math.atan2(sb, cb)))
    return out


def leading_order_guess(sigma: float, params: OscillatorParams) -> SlowFlowState:
    """The largest first-order stationary state (the resonant branch where it is multivalued)."""
    return leading_order_guesses(sigma, params)[0]


@dataclass(frozen=True)
class StabilityReport:
    jacobian: np.ndarray
    eigenvalues: np.ndarray
    trace_numeric: float
    det_numeric: float
    trace_analytic: float
    det_analytic: float
    det_printed: float
    sigma_bound: float | None
    bound_satisfied: bool | None
    stable: bool


@dataclass(frozen=True)
class StationaryPoint:
    sigma: float
    a: float
    beta: float
    residual: float
    trace_j: float
    det_j: float
    eig_real: tuple[float, float]
    stable: bool

    @property
    def gamma(self) -> float:
        return -self.beta


def numerical_jacobian(a: float, beta: float, params: OscillatorParams,
                       coupling: ModalCoupling | None = None) -> np.ndarray:
    """Central-difference Jacobian of (da/dt, dbeta/dt) with respect to (a, beta)."""
    h = 1e-7 * max(1.0, abs(a))
    eps, sigma = params.epsilon, params.sigma
    jac = np.empty((2, 2))
    for j, (da, db) in enumerate(((h, 0.0), (0.0, h))):
        up = _scaled_rates(a + da, beta + db, sigma, params, coupling)
        dn = _scaled_rates(a - da, beta - db, sigma, params, coupling)
        jac[0, j] = eps * (up[0] - dn[0]) / (2 * h)
        jac[1, j] = eps * (up[1] - dn[1]) / (2 * h)
    return jac


def stability_bound(a: float, params: OscillatorParams) -> float | None:
    """Upper detuning of the lower stable range, None when the root is complex."""
    w, d, lam = params.omega, params.d, params.lam
    rad = 9 * d * d * a**4 / (16 * w * w) - lam**2
    if rad < 0:
        return None
    return 3 * d * a * a / (4 * w) - 0.5 * math.sqrt(rad)


def stability(point: StationaryPoint, params: OscillatorParams,
              coupling: ModalCoupling | None = None) -> StabilityReport:
    """Numerical eigenvalues decide; leading-order trace and determinant are reported.

    ``det_analytic`` uses +lambda^2/4, the sign consistent with the stability
    bound; ``det_printed`` keeps the -lambda^2/4 variant for comparison.
    """
    p = params.replace(sigma=point.sigma)
    jac = numerical_jacobian(point.a, point.beta, p, coupling)
    eig = np.linalg.eigvals(jac)
    w, d, lam, eps, s, a = p.omega, p.d, p.lam, p.epsilon, point.sigma, point.a
    core = s * s - 3 * d * s * a * a / (2 * w) + 27 * d * d * a**4 / (64 * w * w)
    bound = stability_bound(a, p)
    return StabilityReport(
        jacobian=jac, eigenvalues=eig,
        trace_numeric=float(np.trace(jac)), det_numeric=float(np.linalg.det(jac)),
        trace_analytic=-lam * eps,
        det_analytic=eps * eps * (lam * lam / 4 + core),
        det_printed=eps * eps * (-lam * lam / 4 + core),
        sigma_bound=bound,
        bound_satisfied=None if bound is None else bool(s <= bound),
        stable=bool(np.all(eig.real < 0)))


def _make_point(a, beta, sigma, norm, p, coupling) -> StationaryPoint:
    p = p.replace(sigma=sigma)
    jac = numerical_jacobian(a, beta, p, coupling)
    eig = np.linalg.eigvals(jac)
    real = tuple(sorted(float(x) for x in eig.real))
    return StationaryPoint(sigma=float(sigma), a=float(a), beta=wrap_phase(beta),
                           residual=float(norm * p.epsilon), trace_j=float(np.trace(jac)),
                           det_j=float(np.linalg.det(jac)), eig_real=real,
                           stable=bool(real[1] < 0))


RESIDUAL_TOL = 1e-12  # on G = rate / epsilon, i.e. 1e-12 * epsilon on the rates


def stationary_solve(sigma: float, params: OscillatorParams, guess: SlowFlowState | None = None,
                     coupling: ModalCoupling | None = None) -> StationaryPoint:
    """Fixed point of the slow flow at detuning ``sigma``.

    Without a guess the first-order stationary states are tried in turn, the
    largest amplitude first.
    """
    p = params.replace(sigma=sigma)
    if p.f_m == 0:
        raise ValueError("unforced slow flow: only the trivial state a = 0 is stationary")
    if guess is not None:
        _check_floor(guess.a, p)
        a, beta, s, norm = _solve_fixed("sigma", sigma, (guess.a, guess.beta, sigma), p, coupling, RESIDUAL_TOL)
        return _make_point(a, beta, s, norm, p, coupling)
    failure = None
    for start in leading_order_guesses(sigma, p):
        try:
            a, beta, s, norm = _solve_fixed("sigma", sigma, (start.a, start.beta, sigma), p, coupling,
                                            RESIDUAL_TOL)
        except StationarySolveError as exc:
            failure = failure or exc
            continue
        return _make_point(a, beta, s, norm, p, coupling)
    raise failure


def solve_at_amplitude(a: float, params: OscillatorParams, sigma_guess: float, beta_guess: float,
                       coupling: ModalCoupling | None = None) -> StationaryPoint:
    """Stationary point with prescribed amplitude; solves for (sigma, beta)."""
    _check_floor(a, params)
    a, beta, s, norm = _solve_fixed("a", a, (a, beta_guess, sigma_guess), params, coupling, RESIDUAL_TOL)
    return _make_point(a, beta, s, norm, params, coupling)


def solve_at_phase(beta: float, params: OscillatorParams, a_guess: float, sigma_guess: float,
                   coupling: ModalCoupling | None = None) -> StationaryPoint:
    """Stationary point with prescribed phase; solves for (a, sigma)."""
    a, b, s, norm = _solve_fixed("beta", beta, (a_guess, beta, sigma_guess), params, coupling, RESIDUAL_TOL)
    return _make_point(a, b, s, norm, params, coupling)


# --- resonance peak -----------------------------------------------------------

@dataclass(frozen=True)
class PeakEstimate:
    a0: float
    a1: float
    sigma0: float
    sigma1: float
    beta0: float
    beta1: float
    forcing_frequency: float
    epsilon: float

    @property
    def amplitude(self) -> float:
        return self.a0 + self.epsilon * self.a1

    @property
    def sigma(self) -> float:
        return self.sigma0 + self.epsilon * self.sigma1

    @property
    def beta(self) -> float:
        return self.beta0 + self.epsilon * self.beta1


def resonance_peak(params: OscillatorParams) -> PeakEstimate:
    """Two-term expansion of the maximum of the stationary amplitude.

    The phase correction is +lambda/(2 omega): that is the value at which the
    stationary equations hold at the peak.
    """
    p = params
    if p.lam <= 0:
        raise ValueError("the resonance peak is unbounded without damping")
    if p.f_m == 0:
        raise ValueError("the resonance peak needs a nonzero forcing amplitude")
    w = p.omega
    a0 = p.f_m / (p.lam * w)
    s0 = 3 * p.d * a0 * a0 / (8 * w)
    a1 = -a0 * s0 / w
    s1 = -29 * s0 * s0 / (12 * w) - 5 * p.c**2 * a0 * a0 / (12 * w**3) - p.lam**2 / (4 * w)
    b1 = p.lam / (2 * w)
    return PeakEstimate(a0=a0, a1=a1, sigma0=s0, sigma1=s1, beta0=-math.pi / 2, beta1=b1,
                        forcing_frequency=w + p.epsilon * s0 + p.epsilon**2 * s1, epsilon=p.epsilon)


# --- response curve -----------------------------------------------------------

@dataclass(frozen=True)
class ResponseCurve:
    points: tuple[StationaryPoint, ...]
    sweep_mode: tuple[tuple[int, str], ...]  # (index of first point, "sigma" | "a")
    params: OscillatorParams

    def arrays(self) -> dict[str, np.ndarray]:
        keys = ("sigma", "a", "beta", "residual", "trace_j", "det_j", "stable")
        return {k: np.array([getattr(pt, k) for pt in self.points]) for k in keys}

    def peak(self) -> StationaryPoint:
        return max(self.points, key=lambda pt: pt.a)


def _continuation(params, coupling, start: StationaryPoint, sigma_lo, sigma_hi, direction,
                  n_points, a_scale):
    """Follow the branch from ``start``; swaps sigma/a parameterization at folds."""
    s_scale = sigma_hi - sigma_lo
    ds_nominal = 1.0 / max(n_points - 1, 1)
    points = [start]
    modes = [(0, "sigma")]
    tangent = np.array([direction, 0.0])  # in (sigma/s_scale, a/a_scale)
    ds = ds_nominal
    mode = "sigma"
    max_points = 40 * n_points
    while len(points) < max_points:
        cur = points[-1]
        if len(points) >= 2:
            prev = points[-2]
            sec = np.array([(cur.sigma - prev.sigma) / s_scale, (cur.a - prev.a) / a_scale])
            if np.linalg.norm(sec) > 0:
                tangent = sec / np.linalg.norm(sec)
        preferred = "sigma" if abs(tangent[0]) >= abs(tangent[1]) else "a"
        beta_slope = 0.0
        if len(points) >= 2:
            step_len = math.hypot((cur.sigma - prev.sigma) / s_scale, (cur.a - prev.a) / a_scale)
            if step_len > 0:
                db = math.remainder(cur.beta - prev.beta, 2 * math.pi)
                beta_slope = db / step_len
        new = None
        for attempt in range(12):
            for trial_mode in (preferred, "a" if preferred == "sigma" else "sigma"):
                sig_pred = cur.sigma + ds * tangent[0] * s_scale
                a_pred = cur.a + ds * tangent[1] * a_scale
                beta_pred = cur.beta + ds * beta_slope
                try:
                    if trial_mode == "sigma":
                        if abs(tangent[0]) < 1e-3:
                            continue
                        a, b, s, norm = _solve_fixed("sigma", sig_pred, (max(a_pred, cur.a * 0.5), beta_pred, sig_pred),
                                                     params, coupling, RESIDUAL_TOL)
                    else:
                        if abs(tangent[1]) < 1e-3 or a_pred <= amplitude_floor(params):
                            continue
                        a, b, s, norm = _solve_fixed("a", a_pred, (a_pred, beta_pred, sig_pred),
                                                     params, coupling, RESIDUAL_TOL)
                except (StationarySolveError, AmplitudeFloorError):
                    continue
                step = np.array([(s - cur.sigma) / s_scale, (a - cur.a) / a_scale])
                jump = float(np.linalg.norm(step))
                # a fixed-amplitude solve near a maximum of a can land on the
                # far side and send the sweep back along the same branch
                if jump > 3 * ds or jump == 0 or np.dot(step, tangent) <= 0:
                    continue
                new = (a, b, s, norm, trial_mode)
                break
            if new is not None:
                break
            ds *= 0.5
        if new is None:
            return points, modes, False
        a, b, s, norm, used = new
        if used != mode:
            modes.append((len(points), used))
            mode = used
        if (direction > 0 and s > sigma_hi) or (direction < 0 and s < sigma_lo):
            edge = sigma_hi if direction > 0 else sigma_lo
            try:
                a, b, s, norm = _solve_fixed("sigma", edge, (a, b, edge), params, coupling, RESIDUAL_TOL)
                points.append(_make_point(a, b, s, norm, params, coupling))
            except (StationarySolveError, AmplitudeFloorError):
                pass
            return points, modes, True
        if (direction > 0 and s < sigma_lo) or (direction < 0 and s > sigma_hi):
            return points, modes, True
        points.append(_make_point(a, b, s, norm, params, coupling))
        ds = min(ds_nominal, ds * 1.5)
        if a > 1e3 * a_scale:
            return points, modes, True
    return points, modes, True


def frequency_response_curve(params: OscillatorParams, sigma_range: tuple[float, float],
                             n_points: int = 201, coupling: ModalCoupling | None = None) -> ResponseCurve:
    """Stationary branch over ``sigma_range``, followed through folds.

    The sweep advances in sigma and swaps to an amplitude-parameterized solve
    (for sigma and beta at fixed a) when the branch turns; if it stalls, a second
    sweep runs from the other end and the two pieces are merged.
    """
    lo, hi = float(sigma_range[0]), float(sigma_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError("sigma_range must be a finite increasing pair")
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    a_scale = abs(params.f_m) / (params.lam * params.omega) if params.lam > 0 else abs(params.f_m) / params.omega
    a_scale = a_scale or 1.0

    def first(sigma):
        for guess in (None, SlowFlowState(a_scale, -math.pi / 2)):
            try:
                return stationary_solve(sigma, params, guess, coupling)
            except (StationarySolveError, AmplitudeFloorError):
                continue
        return None

    start = first(lo)
    forward, modes, done = ([], [], False)
    if start is not None:
        forward, modes, done = _continuation(params, coupling, start, lo, hi, 1.0, n_points, a_scale)
    if not done:
        end = first(hi)
        if end is not None:
            backward, _, _ = _continuation(params, coupling, end, lo, hi, -1.0, n_points, a_scale)
            merged = list(forward)
            tail = backward[::-1]
            # nearest-neighbour join: drop backward points already covered
            if merged:
                last = merged[-1]
                tail = [pt for pt in tail if pt.sigma > last.sigma or
                        min(abs(pt.a - q.a) / a_scale + abs(pt.sigma - q.sigma) / (hi - lo) for q in merged) > 1e-6]
                modes = list(modes) + [(len(merged), "sigma")]
            else:
                modes = [(0, "sigma")]
            forward = merged + tail
    if not forward:
        raise StationarySolveError("no point of the response curve converged", (lo, float("nan"), float("nan")),
                                   float("inf"))
    return ResponseCurve(tuple(forward), tuple(modes), params)


def locate_peak(params: OscillatorParams, curve: ResponseCurve | None = None,
                coupling: ModalCoupling | None = None) -> StationaryPoint:
    """Maximum stationary amplitude, refined by maximizing a over the phase."""
    if curve is None:
        est = resonance_peak(params)
        half = max(1.0, 4 * abs(params.epsilon * est.sigma1), abs(est.sigma0))
        curve = frequency_response_curve(params, (est.sigma - half, est.sigma + half), 401, coupling)
    top = curve.peak()
    state = {"a": top.a, "sigma": top.sigma}

    def neg_a(beta):
        pt = solve_at_phase(beta, params, state["a"], state["sigma"], coupling)
        state["a"], state["sigma"] = pt.a, pt.sigma
        return -pt.a

    idx = curve.points.index(top)
    neighbours = [curve.points[j].beta for j in (idx - 1, idx + 1) if 0 <= j < len(curve.points)]
    width = max([abs(math.remainder(b - top.beta, 2 * math.pi)) for b in neighbours] + [1e-3])
    res = minimize_scalar(neg_a, bounds=(top.beta - width, top.beta + width), method="bounded",
                          options={"xatol": 1e-12})
    return solve_at_phase(res.x, params, state["a"], state["sigma"], coupling)


# --- reconstructed response ---------------------------------------------------

def forced_expansion(t, a, beta, params: OscillatorParams, da_dt=0.0, dbeta_dt=0.0):
    """Physical displacement and velocity of the second-order forced expansion.

    ``a`` and ``beta`` may be arrays matching ``t`` (slowly varying); the
    velocity includes their rates when given.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    eps, w2 = params.epsilon, params.omega**2
    wf = params.forcing_frequency
    phi = wf * t + beta
    k0, k2, k3 = -params.c * a**2 / (2 * w2), params.c * a**2 / (6 * w2), params.d * a**3 / (32 * w2)
    u = eps * a * np.cos(phi) + eps**2 * (k0 + k2 * np.cos(2 * phi) + k3 * np.cos(3 * phi))
    dphi = wf + np.asarray(dbeta_dt)
    dk = np.asarray(da_dt)
    v = (eps * dk * np.cos(phi) - eps * a * dphi * np.sin(phi)
         + eps**2 * (-params.c * a * dk / w2 + params.c * a * dk / (3 * w2) * np.cos(2 * phi)
                     + 3 * params.d * a * a * dk / (32 * w2) * np.cos(3 * phi)
                     - dphi * (2 * k2 * np.sin(2 * phi) + 3 * k3 * np.sin(3 * phi))))
    return u, v


def evaluate_forced_expansion(t, point: StationaryPoint, params: OscillatorParams):
    """Physical displacement of the periodic response at a stationary point."""
    return forced_expansion(t, point.a, point.beta, params.replace(sigma=point.sigma))[0]


def forced_initial_state(point: StationaryPoint, params: OscillatorParams) -> np.ndarray:
    u, v = forced_expansion(0.0, point.a, point.beta, params.replace(sigma=point.sigma))
    return np.array([float(u), float(v)])


# --- N degrees of freedom: reduce, then delegate ------------------------------

def _refuse_resonance(reduction: ModalReduction, tol: float) -> None:
    report = check_internal_resonance(reduction.omegas, reduction.mode, tol)
    if report.resonant:
        raise InternalResonanceError(report)


def _ndof_coupling(reduction, coupling: bool):
    return modal_coupling(reduction) if coupling else None


def stationary_solve_ndof(sigma: float, reduction: ModalReduction, guess: SlowFlowState | None = None,
                          *, coupling: bool = False, tol: float = 1e-3) -> StationaryPoint:
    _refuse_resonance(reduction, tol)
    return stationary_solve(sigma, reduction.effective_params(sigma), guess,
                            _ndof_coupling(reduction, coupling))


def resonance_peak_ndof(reduction: ModalReduction, *, tol: float = 1e-3) -> PeakEstimate:
    _refuse_resonance(reduction, tol)
    return resonance_peak(reduction.effective_params())


def response_curve_ndof(reduction: ModalReduction, sigma_range, n_points: int = 201, *,
                        coupling: bool = False, tol: float = 1e-3) -> ResponseCurve:
    _refuse_resonance(reduction, tol)
    return frequency_response_curve(reduction.effective_params(), sigma_range, n_points,
                                    _ndof_coupling(reduction, coupling))


def forced_cross_mode_coefficients(a: float, reduction: ModalReduction, constant_denominator: str = "free",
                                   include_fundamental: bool = False) -> np.ndarray:
    """Per-mode epsilon^2 coefficients (constant, cos phi, cos 2phi, cos 3phi, cos(wt)).

    ``constant_denominator`` selects w_k^2 ("free") or w_k^2 - w^2 ("shifted")
    for the constant term.  ``include_fundamental`` adds the cos phi response to
    the cubic term and the direct forcing response at cos(w t).
    """
    if constant_denominator not in ("free", "shifted"):
        raise ValueError("constant_denominator must be 'free' or 'shifted'")
    n = len(reduction.omegas)
    out = np.zeros((n, 5))
    w2 = reduction.omega**2
    for k in reduction.others():
        wk2 = reduction.omegas[k] ** 2
        ck, dk = reduction.cross_c[k], reduction.cross_d[k]
        denom = wk2 if constant_denominator == "free" else wk2 - w2
        out[k, 0] = -ck * a**2 / (2 * denom)
        if include_fundamental:
            out[k, 1] = -3 * dk * a**3 / (4 * (wk2 - w2))
            out[k, 4] = reduction.f_k[k] / (wk2 - w2)
        out[k, 2] = -ck * a**2 / (2 * (wk2 - 4 * w2))
        out[k, 3] = -dk * a**3 / (4 * (wk2 - 9 * w2))
    return out


def forced_modal_expansion(t, a, beta, reduction: ModalReduction, *, sigma: float,
                           constant_denominator: str = "free", include_fundamental: bool = False):
    """Physical modal coordinates, shape (len(t), n).  ``a``/``beta`` may vary with t."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), t.shape)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), t.shape)
    p = reduction.effective_params(sigma)
    eps = p.epsilon
    n = len(reduction.omegas)
    y = np.zeros((t.size, n))
    y[:, reduction.mode - 1] = forced_expansion(t, a, beta, p)[0]
    phi = p.forcing_frequency * t + beta
    unit = eps**2 * forced_cross_mode_coefficients(1.0, reduction, constant_denominator, include_fundamental)
    a2, a3 = (a * a)[:, None], (a * a * a)[:, None]
    ph = phi[:, None]
    y += (unit[:, 0] * a2 + unit[:, 1] * a3 * np.cos(ph) + unit[:, 2] * a2 * np.cos(2 * ph)
          + unit[:, 3] * a3 * np.cos(3 * ph) + unit[:, 4] * np.cos(p.forcing_frequency * t[:, None]))
    return y


def evaluate_forced_expansion_ndof(t, point: StationaryPoint, reduction: ModalReduction, basis: Eigenbasis,
                                   *, constant_denominator: str = "free", include_fundamental: bool = False,
                                   tol: float = 1e-3) -> np.ndarray:
    """Physical displacement vectors sum_k ỹ_k phi_k, shape (len(t), n)."""
    _refuse_resonance(reduction, tol)
    y = forced_modal_expansion(t, point.a, point.beta, reduction, sigma=point.sigma,
                               constant_denominator=constant_denominator,
                               include_fundamental=include_fundamental)
    return y @ np.asarray(basis.phis).T


def forced_initial_state_ndof(point: StationaryPoint, reduction: ModalReduction, basis: Eigenbasis, *,
                              constant_denominator: str = "free", include_fundamental: bool = False) -> np.ndarray:
    """Physical (u, u') at t = 0 taken from the N-DOF expansion at a stationary point.

    The velocity is a central difference of the expansion with a step of 1e-5
    forcing periods / 2 pi, accurate far below the expansion error.
    """
    kw = {"sigma": point.sigma, "constant_denominator": constant_denominator,
          "include_fundamental": include_fundamental}
    h = 1e-5 / reduction.effective_params(point.sigma).forcing_frequency
    y0 = forced_modal_expansion(0.0, point.a, point.beta, reduction, **kw)[0]
    yd = (forced_modal_expansion(h, point.a, point.beta, reduction, **kw)[0]
          - forced_modal_expansion(-h, point.a, point.beta, reduction, **kw)[0]) / (2 * h)
    phis = np.asarray(basis.phis)
    return np.concatenate([phis @ y0, phis @ yd])

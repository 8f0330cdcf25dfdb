"""Direct integration of the governing equations with an adaptive Dormand-Prince 5(4) pair.

Coefficients (Dormand & Prince 1980; dense output after Shampine 1986)::

    c  = 0, 1/5, 3/10, 4/5, 8/9, 1, 1
    a  = see DP_A below (row i holds the weights of stages 0..i-1)
    b5 = 35/384, 0, 500/1113, 125/192, -2187/6784, 11/84, 0
    b4 = 5179/57600, 0, 7571/16695, 393/640, -92097/339200, 187/2100, 1/40

The seventh stage equals f at the new point (first-same-as-last).  The quartic
interpolant is  y(t0 + s h) = y0 + h * sum_j k_j * (P[j] . (s, s^2, s^3, s^4)).

All equations are integrated in the scaled displacement u = u_phys / eps; inputs
and outputs of :func:`integrate` are physical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import brentq

from .model import ModalModel, OscillatorParams

DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DP_A = np.array([
    [0, 0, 0, 0, 0, 0],
    [1 / 5, 0, 0, 0, 0, 0],
    [3 / 40, 9 / 40, 0, 0, 0, 0],
    [44 / 45, -56 / 15, 32 / 9, 0, 0, 0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
])
DP_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
DP_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
DP_E = DP_B5 - DP_B4
DP_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SYSTEM_KINDS = ("free_1dof", "forced_1dof", "free_ndof", "forced_ndof")


class IntegratorError(RuntimeError):
    """Step size underflow or step budget exhausted."""

    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} (reached t = {t_reached:.17g})")
        self.t_reached = t_reached


class EnvelopeError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OdeSystem:
    """One of the four governing systems.

    1-DOF kinds need ``params``; N-DOF kinds need ``model``.  ``forcing_frequency``
    is required for ``forced_ndof`` (the 1-DOF forcing frequency comes from params).
    """

    kind: str
    params: OscillatorParams | None = None
    model: ModalModel | None = None
    forcing_frequency: float | None = None

    def __post_init__(self):
        if self.kind not in SYSTEM_KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if self.kind.endswith("1dof") and self.params is None:
            raise ValueError(f"{self.kind} needs params")
        if self.kind.endswith("ndof") and self.model is None:
            raise ValueError(f"{self.kind} needs a model")
        if self.kind == "forced_ndof" and not (self.forcing_frequency and self.forcing_frequency > 0):
            raise ValueError("forced_ndof needs a positive forcing_frequency")

    @classmethod
    def free_1dof(cls, params: OscillatorParams) -> "OdeSystem":
        return cls("free_1dof", params=params)

    @classmethod
    def forced_1dof(cls, params: OscillatorParams) -> "OdeSystem":
        return cls("forced_1dof", params=params)

    @classmethod
    def free_ndof(cls, model: ModalModel) -> "OdeSystem":
        return cls("free_ndof", model=model)

    @classmethod
    def forced_ndof(cls, model: ModalModel, forcing_frequency: float) -> "OdeSystem":
        return cls("forced_ndof", model=model, forcing_frequency=forcing_frequency)

    @property
    def n_dof(self) -> int:
        return 1 if self.model is None else self.model.n

    @property
    def dimension(self) -> int:
        return 2 * self.n_dof

    @property
    def epsilon(self) -> float:
        return self.params.epsilon if self.model is None else self.model.epsilon

    def scaled_rhs(self):
        """Right-hand side f(t, y) for y = (u, u') in scaled units."""
        eps = self.epsilon
        if self.model is None:
            p = self.params
            w2, ec, ed = p.omega**2, eps * p.c, eps * p.d
            if self.kind == "free_1dof":
                def rhs(t, y):
                    u = y[0]
                    return np.array([y[1], -w2 * u - ec * u * u - ed * u * u * u])
            else:
                el, ef, wf = eps * p.lam, eps * p.f_m, p.forcing_frequency

                def rhs(t, y):
                    u, v = y[0], y[1]
                    return np.array([v, -w2 * u - el * v - ec * u * u - ed * u * u * u
                                     + ef * math.cos(wf * t)])
            return rhs

        m = self.model
        n = m.n
        minv = np.linalg.inv(m.mass)
        stiff = minv @ m.stiffness
        col_p = eps * minv[:, m.p - 1]
        col_prev = eps * minv[:, m.p - 2] if m.p > 1 else np.zeros(n)
        spring = col_p - col_prev
        ip, iq = m.p - 1, m.p - 2
        c, d = m.c, m.d
        if self.kind == "free_ndof":
            def rhs(t, y):
                u = y[:n]
                e = u[ip] - u[iq] if ip > 0 else u[ip]
                acc = -(stiff @ u) - spring * (e * e * (c + d * e))
                return np.concatenate((y[n:], acc))
            return rhs
        damp = eps * (m.eps_m * np.eye(n) + m.eps_k * stiff)
        load = eps * (minv @ m.force)
        wf = self.forcing_frequency

        def rhs(t, y):
            u, v = y[:n], y[n:]
            e = u[ip] - u[iq] if ip > 0 else u[ip]
            acc = -(stiff @ u) - damp @ v - spring * (e * e * (c + d * e)) + load * math.cos(wf * t)
            return np.concatenate((v, acc))
        return rhs

    def structured(self):
        """(stiff, damp, spring, ip, iq, c, d, load, wf): every kind is
        u'' = -stiff u - damp u' - spring N(e) + load cos(wf t), scaled units."""
        eps = self.epsilon
        if self.model is None:
            p = self.params
            forced = self.kind == "forced_1dof"
            return (np.array([[p.omega**2]]), np.array([[eps * p.lam if forced else 0.0]]),
                    np.array([eps]), 0, -1, p.c, p.d,
                    np.array([eps * p.f_m if forced else 0.0]),
                    p.forcing_frequency if forced else 0.0)
        m = self.model
        n = m.n
        minv = np.linalg.inv(m.mass)
        stiff = minv @ m.stiffness
        spring = eps * minv[:, m.p - 1]
        if m.p > 1:
            spring = spring - eps * minv[:, m.p - 2]
        if self.kind == "forced_ndof":
            damp = eps * (m.eps_m * np.eye(n) + m.eps_k * stiff)
            load = eps * (minv @ m.force)
            wf = float(self.forcing_frequency)
        else:
            damp, load, wf = np.zeros((n, n)), np.zeros(n), 0.0
        return stiff, damp, spring, m.p - 1, m.p - 2, m.c, m.d, load, wf

    def energy(self, state) -> np.ndarray:
        """Conserved energy of the undamped free systems, in scaled units.

        ``state`` is physical, shape (dim,) or (m, dim).
        """
        if self.kind not in ("free_1dof", "free_ndof"):
            raise ValueError("energy is a first integral only of the free systems")
        eps = self.epsilon
        y = np.asarray(state, dtype=float) / eps
        n = self.n_dof
        u, v = y[..., :n], y[..., n:]
        if self.model is None:
            p = self.params
            u, v = u[..., 0], v[..., 0]
            return 0.5 * v**2 + 0.5 * p.omega**2 * u**2 + eps * p.c * u**3 / 3 + eps * p.d * u**4 / 4
        m = self.model
        e = m.spring_elongation(u)
        kinetic = 0.5 * np.einsum("...i,ij,...j->...", v, m.mass, v)
        elastic = 0.5 * np.einsum("...i,ij,...j->...", u, m.stiffness, u)
        return kinetic + elastic + eps * (m.c * e**3 / 3 + m.d * e**4 / 4)


@dataclass(frozen=True, eq=False)
class DenseOutput:
    """Per-step quartic interpolants: y(t0 + s h) = y0 + sum_k q[:, k] s^(k+1).

    Only the state indices listed in ``components`` are stored.
    """

    t0: np.ndarray
    h: np.ndarray
    y0: np.ndarray
    q: np.ndarray
    components: np.ndarray = None
    lo: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.components is None:
            object.__setattr__(self, "components", np.arange(self.y0.shape[1]))
        object.__setattr__(self, "lo", np.minimum(self.t0, self.t0 + self.h))

    def column(self, index: int) -> int:
        hits = np.flatnonzero(self.components == index)
        if hits.size == 0:
            raise ValueError(f"state index {index} has no stored interpolant")
        return int(hits[0])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        idx = np.clip(np.searchsorted(self.lo, t, side="right") - 1, 0, len(self.lo) - 1)
        s = ((t - self.t0[idx]) / self.h[idx])[:, None]
        q = self.q[idx]
        out = self.y0[idx] + s * (q[:, :, 0] + s * (q[:, :, 1] + s * (q[:, :, 2] + s * q[:, :, 3])))
        return out[0] if scalar else out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Physical states at accepted step ends, in increasing time order."""

    times: np.ndarray
    states: np.ndarray
    dense_output: DenseOutput | None
    n_dof: int
    epsilon: float
    n_rejected: int = 0

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def sample(self, t) -> np.ndarray:
        """Interpolated states; columns follow ``dense_output.components``."""
        if self.dense_output is None:
            raise ValueError("trajectory was computed without dense output")
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t_start - 1e-12 * max(1.0, abs(self.t_start))) or np.any(
                t > self.t_end + 1e-12 * max(1.0, abs(self.t_end))):
            raise ValueError("sample time outside the trajectory span")
        return self.dense_output(t)

    def sample_component(self, t, index: int) -> np.ndarray:
        """Interpolated values of state entry ``index`` (0-based)."""
        return self.sample(t)[..., self.dense_output.column(index)]

    def table(self, t=None) -> tuple[list[str], np.ndarray]:
        """Header and rows (t, u_i, v_i) at the accepted steps or at times ``t``."""
        times = self.times if t is None else np.asarray(t, dtype=float)
        if t is None:
            states = self.states
        else:
            states = np.column_stack([self.sample_component(times, i) for i in range(2 * self.n_dof)])
        header = ["t"] + [f"u_{i + 1}" for i in range(self.n_dof)] + [f"v_{i + 1}" for i in range(self.n_dof)]
        return header, np.column_stack([times, states])

    def to_csv(self, path: str | Path, t=None) -> None:
        from ._io import write_csv

        write_csv(path, *self.table(t))


def _initial_step(fun, t0, y0, f0, direction, rtol, atol):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = fun(t0 + h0 * direction, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def integrate_scaled(fun, y0, t_span, rel_tol=1e-10, abs_tol=1e-12, *, max_steps=10_000_000,
                     dense=True, dense_components=None):
    """Core DP5(4) loop on an arbitrary first-order system.

    Returns (times, states, DenseOutput | None, n_rejected) in integration order.
    """
    if not (1e-13 <= rel_tol <= 1e-3) or not (1e-13 <= abs_tol <= 1e-3):
        raise ValueError("tolerances must lie in [1e-13, 1e-3]")
    t0, t_end = float(t_span[0]), float(t_span[1])
    if t_end == t0:
        raise ValueError("empty time span")
    direction = 1.0 if t_end > t0 else -1.0
    y = np.array(y0, dtype=float)
    dim = y.size
    keep = np.arange(dim) if dense_components is None else np.asarray(dense_components, dtype=int)
    k = np.empty((7, dim))
    f = fun(t0, y)
    k[0] = f
    h = _initial_step(fun, t0, y, f, direction, rel_tol, abs_tol)
    t = t0
    times, states = [t0], [y.copy()]
    d_t0, d_h, d_y0, d_q = [], [], [], []
    rejected = 0
    min_step_scale = 10 * np.finfo(float).eps
    a_rows = [DP_A[i, :i] for i in range(7)]
    for _ in range(max_steps):
        if direction * (t - t_end) >= 0:
            break
        min_step = min_step_scale * max(1.0, abs(t))
        h = min(h, abs(t_end - t))
        while True:
            if h < min_step:
                raise IntegratorError("step size underflow", t)
            hs = h * direction
            for i in range(1, 7):
                k[i] = fun(t + DP_C[i] * hs, y + hs * (a_rows[i] @ k[:i]))
            y_new = y + hs * (DP_A[6] @ k[:6])
            err_vec = hs * (DP_E @ k)
            scale = abs_tol + rel_tol * np.maximum(np.abs(y), np.abs(y_new))
            err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
            if err <= 1.0:
                factor = 10.0 if err == 0 else min(10.0, 0.9 * err ** -0.2)
                break
            rejected += 1
            h *= max(0.2, 0.9 * err ** -0.2)
        t_new = t + hs
        if direction * (t_new - t_end) > 0 or abs(t_new - t_end) <= min_step:
            t_new = t_end
        if dense:
            d_t0.append(t)
            d_h.append(hs)
            d_y0.append(y[keep])
            d_q.append(hs * (k[:, keep].T @ DP_P))
        t, y = t_new, y_new
        k[0] = k[6]
        times.append(t)
        states.append(y.copy())
        h *= factor
    else:
        raise IntegratorError("step budget exhausted", t)
    dense_out = None
    if dense:
        dense_out = DenseOutput(np.array(d_t0), np.array(d_h), np.array(d_y0), np.array(d_q))
    return np.array(times), np.array(states), dense_out, rejected


@numba.njit(cache=True, nogil=True)
def _structured_rhs(t, y, stiff, damp, spring, ip, iq, c, d, load, wf, out):
    n = stiff.shape[0]
    e = y[ip] - y[iq] if ip > 0 else y[ip]
    nl = e * e * (c + d * e)
    cw = np.cos(wf * t)
    for i in range(n):
        acc = -spring[i] * nl + load[i] * cw
        for j in range(n):
            acc -= stiff[i, j] * y[j] + damp[i, j] * y[n + j]
        out[i] = y[n + i]
        out[n + i] = acc


@numba.njit(cache=True, nogil=True)
def _dp5_structured(stiff, damp, spring, ip, iq, c, d, load, wf, y0, t0, t_end, rtol, atol,
                    h0, max_steps, dense, keep, c_nodes, a_mat, e_vec, p_mat):
    dim = y0.size
    nkeep = keep.size
    direction = 1.0 if t_end > t0 else -1.0
    cap = 1024
    times = np.empty(cap)
    states = np.empty((cap, dim))
    dq = np.empty((cap if dense else 1, nkeep, 4))
    dh = np.empty(cap)
    k = np.empty((7, dim))
    ytmp = np.empty(dim)
    y = y0.copy()
    y_new = np.empty(dim)
    t = t0
    times[0] = t
    states[0] = y
    _structured_rhs(t, y, stiff, damp, spring, ip, iq, c, d, load, wf, k[0])
    h = h0
    count = 1
    rejected = 0
    status = 0
    tiny = 10 * 2.220446049250313e-16
    factor = 1.0
    hs = 0.0
    min_step = 0.0
    for _ in range(max_steps):
        if direction * (t - t_end) >= 0:
            break
        min_step = tiny * max(1.0, abs(t))
        h = min(h, abs(t_end - t))
        while True:
            if h < min_step:
                status = 1
                break
            hs = h * direction
            for i in range(1, 7):
                for m in range(dim):
                    acc = 0.0
                    for j in range(i):
                        acc += a_mat[i, j] * k[j, m]
                    ytmp[m] = y[m] + hs * acc
                _structured_rhs(t + c_nodes[i] * hs, ytmp, stiff, damp, spring, ip, iq, c, d,
                                load, wf, k[i])
            err = 0.0
            for m in range(dim):
                y_new[m] = ytmp[m]
                ev = 0.0
                for j in range(7):
                    ev += e_vec[j] * k[j, m]
                sc = atol + rtol * max(abs(y[m]), abs(y_new[m]))
                err += (hs * ev / sc) ** 2
            err = np.sqrt(err / dim)
            if err <= 1.0:
                factor = 10.0 if err == 0 else min(10.0, 0.9 * err ** -0.2)
                break
            rejected += 1
            h *= max(0.2, 0.9 * err ** -0.2)
        if status:
            break
        t_new = t + hs
        if direction * (t_new - t_end) > 0 or abs(t_new - t_end) <= min_step:
            t_new = t_end
        if count >= cap:
            cap *= 2
            times2 = np.empty(cap)
            times2[:count] = times[:count]
            times = times2
            states2 = np.empty((cap, dim))
            states2[:count] = states[:count]
            states = states2
            dh2 = np.empty(cap)
            dh2[:count] = dh[:count]
            dh = dh2
            if dense:
                dq2 = np.empty((cap, nkeep, 4))
                dq2[:count] = dq[:count]
                dq = dq2
        dh[count - 1] = hs
        if dense:
            for mi in range(nkeep):
                m = keep[mi]
                for col in range(4):
                    acc = 0.0
                    for j in range(7):
                        acc += k[j, m] * p_mat[j, col]
                    dq[count - 1, mi, col] = hs * acc
        t = t_new
        for m in range(dim):
            y[m] = y_new[m]
            k[0, m] = k[6, m]
        times[count] = t
        states[count] = y
        count += 1
        h *= factor
    if status == 0 and direction * (t - t_end) < 0:
        status = 2
    return times[:count], states[:count], dh[:count - 1], dq[:count - 1] if dense else dq[:0], \
        rejected, status, t


def integrate(system: OdeSystem, y0, t_span, rel_tol: float = 1e-10, abs_tol: float = 1e-12, *,
              dense: bool = True, dense_components=None, max_steps: int = 50_000_000) -> Trajectory:
    """Integrate ``system`` from the physical state ``y0`` = (u_1..u_n, v_1..v_n).

    Same Dormand-Prince scheme and step control as :func:`integrate_scaled`,
    compiled for the structured right-hand side shared by all four kinds.
    ``dense_components`` restricts the stored interpolants to some state
    indices, which keeps long N-DOF runs affordable.
    """
    eps = system.epsilon
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.size != system.dimension:
        raise ValueError(f"initial state must have {system.dimension} entries")
    if not (1e-13 <= rel_tol <= 1e-3) or not (1e-13 <= abs_tol <= 1e-3):
        raise ValueError("tolerances must lie in [1e-13, 1e-3]")
    t0, t_end = float(t_span[0]), float(t_span[1])
    if t_end == t0:
        raise ValueError("empty time span")
    parts = system.structured()
    ys = y0 / eps
    fun = system.scaled_rhs()
    direction = 1.0 if t_end > t0 else -1.0
    h0 = _initial_step(fun, t0, ys, fun(t0, ys), direction, rel_tol, abs_tol)
    stiff, damp, spring, ip, iq, c, d, load, wf = parts
    keep = np.arange(system.dimension) if dense_components is None else np.unique(
        np.asarray(dense_components, dtype=np.int64))
    if keep.size == 0 or keep[0] < 0 or keep[-1] >= system.dimension:
        raise ValueError("dense_components out of range")
    times, states, dh, dq, rejected, status, t_reached = _dp5_structured(
        np.ascontiguousarray(stiff, dtype=float), np.ascontiguousarray(damp, dtype=float),
        np.ascontiguousarray(spring, dtype=float), int(ip), int(iq), float(c), float(d),
        np.ascontiguousarray(load, dtype=float), float(wf), ys, t0, t_end, float(rel_tol),
        float(abs_tol), float(h0), int(max_steps), bool(dense), keep.astype(np.int64), DP_C, DP_A, DP_E, DP_P)
    if status == 1:
        raise IntegratorError("step size underflow", t_reached * 1.0)
    if status == 2:
        raise IntegratorError("step budget exhausted", t_reached * 1.0)
    dense_out = DenseOutput(times[:-1].copy(), dh, states[:-1][:, keep], dq, keep) if dense else None
    states = states * eps
    if dense_out is not None:
        dense_out = DenseOutput(dense_out.t0, dense_out.h, dense_out.y0 * eps, dense_out.q * eps, keep)
    if times[-1] < times[0]:
        times, states = times[::-1].copy(), states[::-1].copy()
        if dense_out is not None:
            dense_out = DenseOutput(*(arr[::-1].copy() for arr in
                                      (dense_out.t0, dense_out.h, dense_out.y0, dense_out.q)), keep)
    for arr in (times, states):
        arr.setflags(write=False)
    return Trajectory(times, states, dense_out, system.n_dof, eps, rejected)


def sample_envelope(traj: Trajectory, component: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Times and values of the local maxima of |u_component|.

    Extrema are the zeros of the velocity component, located inside each step
    by root-finding on the dense interpolant.
    """
    if traj.dense_output is None:
        raise EnvelopeError("envelope extraction needs dense output")
    dense = traj.dense_output
    vi = traj.n_dof + component
    ucol, vcol = dense.column(component), dense.column(vi)
    v = traj.states[:, vi]
    times_out, amps = [], []
    for j in np.flatnonzero(np.sign(v[:-1]) * np.sign(v[1:]) < 0):
        ta, tb = traj.times[j], traj.times[j + 1]
        root = brentq(lambda tt: float(dense(tt)[vcol]), ta, tb, xtol=1e-14 * max(1.0, abs(tb)), rtol=1e-15)
        times_out.append(root)
        amps.append(abs(float(dense(root)[ucol])))
    # exact zeros landing on a step boundary
    exact = np.flatnonzero(v[1:-1] == 0) + 1
    for j in exact:
        times_out.append(traj.times[j])
        amps.append(abs(traj.states[j, component]))
    if len(times_out) < 2:
        raise EnvelopeError("fewer than two extrema found")
    order = np.argsort(times_out)
    return np.asarray(times_out)[order], np.asarray(amps)[order]

"""Problem parameters, N-DOF systems and their modal reduction.

The N-DOF system is

    M u'' + eps C u' + K u + eps g(u) = eps F cos(w t)      (scaled, u = u_phys / eps)

with proportional damping C = eps_m M + eps_k K and a single nonlinear spring
between components p-1 and p (p = 1 grounds it).  The spring force is
N(e) = c e^2 + d e^3 on the elongation e = u_p - u_{p-1}; it enters row p with
a plus sign and row p-1 with a minus sign, so that d > 0 stiffens the chain.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg


class ModelError(ValueError):
    """Invalid parameters or matrices."""


@dataclass(frozen=True)
class OscillatorParams:
    """Scalars of the single-degree-of-freedom problem.

    ``sigma`` is the detuning: the forcing angular frequency is
    ``omega + epsilon * sigma``.
    """

    omega: float = 1.0
    c: float = 0.0
    d: float = 0.0
    lam: float = 0.0
    epsilon: float = 0.01
    f_m: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("omega", "c", "d", "lam", "epsilon", "f_m", "sigma"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ModelError(f"{name} must be finite, got {value!r}")
        if self.omega <= 0:
            raise ModelError("omega must be positive")
        if self.epsilon <= 0:
            raise ModelError("epsilon must be positive")
        if self.lam < 0:
            raise ModelError("lambda must be non-negative")
        if self.forcing_frequency <= 0:
            raise ModelError("forcing frequency omega + epsilon*sigma must stay positive")

    @property
    def forcing_frequency(self) -> float:
        return self.omega + self.epsilon * self.sigma

    def replace(self, **changes) -> "OscillatorParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {"omega": self.omega, "c": self.c, "d": self.d, "lambda": self.lam,
                "epsilon": self.epsilon, "f_m": self.f_m, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, data: dict) -> "OscillatorParams":
        allowed = {"omega", "c", "d", "lambda", "lam", "epsilon", "f_m", "sigma"}
        unknown = set(data) - allowed
        if unknown:
            raise ModelError(f"unknown parameter keys: {sorted(unknown)}")
        kwargs = {("lam" if k == "lambda" else k): float(v) for k, v in data.items()}
        return cls(**kwargs)


def _as_matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.shape != (n, n):
        raise ModelError(f"{name} must be {n}x{n}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(arr)), np.finfo(float).tiny)
    if np.max(np.abs(arr - arr.T)) > 1e-12 * scale:
        raise ModelError(f"{name} is not symmetric")
    arr = 0.5 * (arr + arr.T)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModalModel:
    """Mass/stiffness system with one nonlinear spring ending at DOF ``p`` (1-based)."""

    mass: np.ndarray
    stiffness: np.ndarray
    p: int = 1
    c: float = 0.0
    d: float = 0.0
    eps_m: float = 0.0
    eps_k: float = 0.0
    force: np.ndarray = field(default=None)
    epsilon: float = 0.01

    def __post_init__(self):
        mass = np.atleast_2d(np.asarray(self.mass, dtype=float))
        n = mass.shape[0]
        object.__setattr__(self, "mass", _as_matrix(mass, n, "mass"))
        object.__setattr__(self, "stiffness", _as_matrix(self.stiffness, n, "stiffness"))
        force = np.zeros(n) if self.force is None else np.array(self.force, dtype=float).reshape(-1)
        if force.shape != (n,):
            raise ModelError(f"force must have length {n}")
        force.setflags(write=False)
        object.__setattr__(self, "force", force)
        if not (1 <= int(self.p) <= n) or int(self.p) != self.p:
            raise ModelError(f"p must be an integer in [1, {n}]")
        object.__setattr__(self, "p", int(self.p))
        if self.epsilon <= 0:
            raise ModelError("epsilon must be positive")
        if self.eps_m < 0 or self.eps_k < 0:
            raise ModelError("damping coefficients must be non-negative")
        try:
            np.linalg.cholesky(self.mass)
        except np.linalg.LinAlgError as exc:
            raise ModelError("mass matrix is not positive definite") from exc

    @property
    def n(self) -> int:
        return self.mass.shape[0]

    def replace(self, **changes) -> "ModalModel":
        return dataclasses.replace(self, **changes)

    def spring_elongation(self, u: np.ndarray) -> np.ndarray:
        """e = u_p - u_{p-1} along the last axis (u_0 = 0)."""
        e = u[..., self.p - 1]
        if self.p > 1:
            e = e - u[..., self.p - 2]
        return e

    def to_dict(self) -> dict:
        return {"n": self.n, "mass": self.mass.tolist(), "stiffness": self.stiffness.tolist(),
                "p": self.p, "c": self.c, "d": self.d, "eps_m": self.eps_m,
                "eps_k": self.eps_k, "force": self.force.tolist(), "epsilon": self.epsilon}


def chain_model(n: int, k: float = 1.0, *, p: int = 1, c: float = 1.0, d: float = 1.0,
                eps_m: float = 0.0, eps_k: float = 0.0, force=None,
                epsilon: float = 0.01) -> ModalModel:
    """Unit masses joined by springs of stiffness k, both ends fixed."""
    if n < 1:
        raise ModelError("chain needs at least one mass")
    stiffness = 2 * k * np.eye(n) - k * np.eye(n, k=1) - k * np.eye(n, k=-1)
    return ModalModel(np.eye(n), stiffness, p=p, c=c, d=d, eps_m=eps_m, eps_k=eps_k,
                      force=force, epsilon=epsilon)


_MODEL_KEYS = {"n", "mass", "stiffness", "p", "c", "d", "eps_m", "eps_k", "force", "epsilon"}
_CHAIN_EXTRA = {"p", "c", "d", "eps_m", "eps_k", "force", "epsilon"}


def model_from_dict(data: dict) -> ModalModel:
    """Build a model from its JSON description (explicit matrices or ``chain``)."""
    if "chain" in data:
        unknown = set(data) - {"chain"} - _CHAIN_EXTRA
        chain = data["chain"]
        unknown |= {f"chain.{k}" for k in set(chain) - {"n", "k"}}
        if unknown:
            raise ModelError(f"unknown model keys: {sorted(unknown)}")
        extra = {k: data[k] for k in _CHAIN_EXTRA if k in data}
        return chain_model(int(chain["n"]), float(chain.get("k", 1.0)), **extra)
    unknown = set(data) - _MODEL_KEYS
    if unknown:
        raise ModelError(f"unknown model keys: {sorted(unknown)}")
    for key in ("mass", "stiffness"):
        if key not in data:
            raise ModelError(f"model is missing '{key}'")
    mass = np.atleast_2d(np.array(data["mass"], dtype=float))
    if "n" in data and int(data["n"]) != mass.shape[0]:
        raise ModelError("n does not match the mass matrix size")
    kwargs = {k: data[k] for k in ("p", "c", "d", "eps_m", "eps_k", "force", "epsilon") if k in data}
    return ModalModel(mass, data["stiffness"], **kwargs)


def load_model(path: str | Path) -> ModalModel:
    return model_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class Eigenbasis:
    """Ascending eigen angular frequencies and M-orthonormal mode shapes (columns)."""

    omegas: np.ndarray
    phis: np.ndarray

    @property
    def n(self) -> int:
        return self.omegas.shape[0]

    def residuals(self, model: ModalModel) -> np.ndarray:
        """Relative residual |K phi - w^2 M phi| / |K phi| per mode."""
        k_phi = model.stiffness @ self.phis
        r = k_phi - (model.mass @ self.phis) * self.omegas**2
        return np.linalg.norm(r, axis=0) / np.linalg.norm(k_phi, axis=0)

    def orthonormality_error(self, model: ModalModel) -> float:
        return float(np.max(np.abs(self.phis.T @ model.mass @ self.phis - np.eye(self.n))))

    def modal_coordinates(self, model: ModalModel, u: np.ndarray) -> np.ndarray:
        """y = Phi^T M u along the last axis."""
        return u @ (model.mass @ self.phis)


def _jacobi_eigh(a: np.ndarray, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a dense symmetric matrix."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= 1e-14 * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * norm:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(1.0, theta))
                cs = 1.0 / math.hypot(1.0, t)
                sn = t * cs
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = cs * ap - sn * aq
                a[:, q] = sn * ap + cs * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = cs * ap - sn * aq
                a[q, :] = sn * ap + cs * aq
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = cs * vp - sn * vq
                v[:, q] = sn * vp + cs * vq
    else:
        raise ModelError("Jacobi rotations did not converge")
    return np.diag(a).copy(), v


def solve_generalized_eigen(model: ModalModel) -> Eigenbasis:
    """Solve K phi = w^2 M phi by a Cholesky transform plus cyclic Jacobi."""
    chol = np.linalg.cholesky(model.mass)
    half = scipy.linalg.solve_triangular(chol, model.stiffness, lower=True)
    reduced = scipy.linalg.solve_triangular(chol, half.T, lower=True)
    reduced = 0.5 * (reduced + reduced.T)
    values, vectors = _jacobi_eigh(reduced)
    if np.min(values) <= 0:
        raise ModelError("stiffness matrix is not positive definite")
    order = np.argsort(values, kind="stable")
    values = values[order]
    phis = scipy.linalg.solve_triangular(chol.T, vectors[:, order], lower=False)
    # one Rayleigh-quotient polish per mode keeps the residual near round-off
    values = np.einsum("ij,ij->j", phis, model.stiffness @ phis) / np.einsum(
        "ij,ij->j", phis, model.mass @ phis)
    phis = phis / np.sqrt(np.einsum("ij,ij->j", phis, model.mass @ phis))
    for k in range(phis.shape[1]):
        col = phis[:, k]
        lead = np.flatnonzero(np.abs(col) > 1e-12 * np.max(np.abs(col)))[0]
        if col[lead] < 0:
            phis[:, k] = -col
    omegas = np.sqrt(values)
    omegas.setflags(write=False)
    phis.setflags(write=False)
    return Eigenbasis(omegas, phis)


@dataclass(frozen=True, eq=False)
class ModalReduction:
    """Effective single-mode coefficients.  Arrays are indexed by 0-based mode."""

    mode: int
    omegas: np.ndarray
    delta_phi: np.ndarray
    check_c: float
    check_d: float
    cross_c: np.ndarray
    cross_d: np.ndarray
    lambda_k: np.ndarray
    f_k: np.ndarray
    c: float
    d: float
    epsilon: float

    @property
    def omega(self) -> float:
        return float(self.omegas[self.mode - 1])

    @property
    def driven_delta(self) -> float:
        return float(self.delta_phi[self.mode - 1])

    def effective_params(self, sigma: float = 0.0, epsilon: float | None = None) -> OscillatorParams:
        """The 1-DOF parameters seen by the driven mode."""
        i = self.mode - 1
        return OscillatorParams(omega=self.omega, c=self.check_c, d=self.check_d,
                                lam=float(self.lambda_k[i]), f_m=float(self.f_k[i]),
                                epsilon=self.epsilon if epsilon is None else epsilon,
                                sigma=sigma)

    def others(self) -> np.ndarray:
        """0-based indices of the non-driven modes."""
        return np.array([k for k in range(len(self.omegas)) if k != self.mode - 1], dtype=int)


def modal_reduce(model: ModalModel, basis: Eigenbasis, mode: int = 1) -> ModalReduction:
    if not (1 <= mode <= basis.n):
        raise ModelError(f"mode must be in [1, {basis.n}]")
    phis = np.asarray(basis.phis)
    row_p = phis[model.p - 1, :]
    row_prev = phis[model.p - 2, :] if model.p > 1 else np.zeros(basis.n)
    delta = row_p - row_prev
    d1 = delta[mode - 1]
    cross_c = model.c * d1**2 * delta
    cross_d = model.d * d1**3 * delta
    lambda_k = model.eps_m + model.eps_k * np.asarray(basis.omegas) ** 2
    f_k = phis.T @ model.force
    arrays = [np.array(x, dtype=float) for x in (basis.omegas, delta, cross_c, cross_d, lambda_k, f_k)]
    for arr in arrays:
        arr.setflags(write=False)
    omegas, delta, cross_c, cross_d, lambda_k, f_k = arrays
    return ModalReduction(mode=mode, omegas=omegas, delta_phi=delta,
                          check_c=float(model.c * d1**3), check_d=float(model.d * d1**4),
                          cross_c=cross_c, cross_d=cross_d, lambda_k=lambda_k, f_k=f_k,
                          c=float(model.c), d=float(model.d), epsilon=float(model.epsilon))


@dataclass(frozen=True)
class ResonanceFlag:
    k: int          # 1-based mode index
    kind: str       # "2:1", "3:1" or "multiple"
    relative_gap: float


@dataclass(frozen=True)
class ResonanceReport:
    mode: int
    tol: float
    flags: tuple[ResonanceFlag, ...]

    @property
    def resonant(self) -> bool:
        return bool(self.flags)


class InternalResonanceError(ModelError):
    def __init__(self, report: ResonanceReport):
        kinds = ", ".join(f"mode {f.k} ({f.kind}, gap {f.relative_gap:.3g})" for f in report.flags)
        super().__init__(f"internal resonance with mode {report.mode}: {kinds}")
        self.report = report


def check_internal_resonance(basis_or_omegas, mode: int = 1, tol: float = 1e-3) -> ResonanceReport:
    """Flag 2:1 and 3:1 ratios with the driven mode, or a repeated driven frequency."""
    omegas = np.asarray(getattr(basis_or_omegas, "omegas", basis_or_omegas), dtype=float)
    w2 = omegas[mode - 1] ** 2
    flags = []
    for k, wk in enumerate(omegas, start=1):
        if k == mode:
            continue
        if abs(wk**2 - w2) <= tol * w2:
            flags.append(ResonanceFlag(k, "multiple", abs(wk**2 - w2) / w2))
        for kind, ratio in (("2:1", 4.0), ("3:1", 9.0)):
            gap = abs(wk**2 - ratio * w2) / w2
            if gap < tol:
                flags.append(ResonanceFlag(k, kind, gap))
    return ResonanceReport(mode, tol, tuple(flags))

"""Second-order triple-scale expansion of free vibrations.

``a`` is the amplitude of the scaled solution: the physical displacement is
about ``epsilon * a * cos(nu t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (Eigenbasis, InternalResonanceError, ModalReduction, OscillatorParams,
                    check_internal_resonance)


def _check_order(order: int) -> None:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")


def backbone_frequency(a, params: OscillatorParams, order: int = 2):
    """Amplitude-dependent angular frequency of the free oscillation."""
    _check_order(order)
    w, c, d, eps = params.omega, params.c, params.d, params.epsilon
    a2 = np.square(a)
    nu = w + eps * 3 * d * a2 / (8 * w)
    if order == 2:
        nu = nu + eps**2 * (-5 * c**2 * a2 / (12 * w**3) - 15 * d**2 * a2**2 / (256 * w**3))
    return nu


def backbone_curvature(a, params: OscillatorParams):
    """Second derivative of the order-2 backbone frequency with respect to a."""
    w, c, d, eps = params.omega, params.c, params.d, params.epsilon
    return eps * 3 * d / (4 * w) + eps**2 * (-5 * c**2 / (6 * w**3) - 45 * d**2 * np.square(a) / (64 * w**3))


def second_order_terms(a, params: OscillatorParams) -> tuple[float, float, float]:
    """Coefficients (constant, cos 2th, cos 3th) of the epsilon^2 bracket."""
    w2 = params.omega**2
    return (-params.c * a**2 / (2 * w2), params.c * a**2 / (6 * w2), params.d * a**3 / (32 * w2))


@dataclass(frozen=True)
class FreeExpansion:
    """Free response  eps a cos(nu t) + eps^2 (k0 + k2 cos 2nu t + k3 cos 3nu t).

    With ``exact_start`` an extra ``-eps^2 (k0 + k2 + k3) cos(nu t)`` makes the
    initial displacement exactly ``eps a``.
    """

    a: float
    nu: float
    params: OscillatorParams
    order: int = 2
    exact_start: bool = False

    def __post_init__(self):
        _check_order(self.order)
        if not self.nu > 0:
            raise ValueError("backbone frequency must stay positive")

    @classmethod
    def build(cls, a: float, params: OscillatorParams, order: int = 2,
              exact_start: bool = False) -> "FreeExpansion":
        return cls(float(a), float(backbone_frequency(a, params, order)), params, order, exact_start)

    def _coefficients(self):
        """(cos th, cos 2th, cos 3th, constant) coefficients in physical units."""
        eps = self.params.epsilon
        c1, c2, c3, c0 = eps * self.a, 0.0, 0.0, 0.0
        if self.order == 2:
            k0, k2, k3 = second_order_terms(self.a, self.params)
            c0, c2, c3 = eps**2 * k0, eps**2 * k2, eps**2 * k3
            if self.exact_start:
                c1 -= eps**2 * (k0 + k2 + k3)
        return c1, c2, c3, c0

    def displacement(self, t):
        c1, c2, c3, c0 = self._coefficients()
        th = self.nu * np.asarray(t, dtype=float)
        return c0 + c1 * np.cos(th) + c2 * np.cos(2 * th) + c3 * np.cos(3 * th)

    def velocity(self, t):
        c1, c2, c3, _ = self._coefficients()
        th = self.nu * np.asarray(t, dtype=float)
        return -self.nu * (c1 * np.sin(th) + 2 * c2 * np.sin(2 * th) + 3 * c3 * np.sin(3 * th))

    def initial_state(self) -> np.ndarray:
        return np.array([float(self.displacement(0.0)), 0.0])


def evaluate_free_expansion(t, a: float, params: OscillatorParams, order: int = 2,
                            exact_start: bool = False):
    """Physical displacement of the free expansion at time(s) ``t``."""
    return FreeExpansion.build(a, params, order, exact_start).displacement(t)


def free_initial_state(a: float, params: OscillatorParams, order: int = 2,
                       exact_start: bool = False) -> np.ndarray:
    """Physical (displacement, velocity) at t = 0 consistent with the expansion."""
    return FreeExpansion.build(a, params, order, exact_start).initial_state()


# --- N degrees of freedom ---------------------------------------------------

def cross_mode_sums(reduction: ModalReduction) -> tuple[float, float, float, float]:
    """Sums over the non-driven modes of dphi_k^2 / (w_k^2 - m^2 w^2), m = 0..3."""
    others = reduction.others()
    s = reduction.delta_phi[others] ** 2
    wk2 = reduction.omegas[others] ** 2
    w2 = reduction.omega**2
    return tuple(float(np.sum(s / (wk2 - m * m * w2))) for m in range(4))


def coupling_frequency_shift(a: float, reduction: ModalReduction) -> float:
    """epsilon^2 coefficient added to the driven-mode frequency by the cross-mode feedback.

    The cross-mode responses (including their cos th part) feed back into the
    driven mode through the spring elongation; this is the resulting secular
    term, zero for n = 1.
    """
    s0, s1, s2, s3 = cross_mode_sums(reduction)
    dl, c, d = reduction.driven_delta, reduction.c, reduction.d
    big_c = c**2 * dl**4 * a**2 * (s0 + s2 / 2) + 3 * d**2 * dl**6 * a**4 * (9 * s1 + s3) / 16
    return -big_c / (2 * reduction.omega)


def free_cross_mode_coefficients(a: float, reduction: ModalReduction,
                                 include_fundamental: bool = False) -> np.ndarray:
    """Per-mode epsilon^2 coefficients (constant, cos th, cos 2th, cos 3th).

    The driven mode's row is zero.  ``include_fundamental`` adds the cos th
    response forced by the cubic term, which the classical form leaves out.
    """
    n = len(reduction.omegas)
    out = np.zeros((n, 4))
    w2 = reduction.omega**2
    for k in reduction.others():
        wk2 = reduction.omegas[k] ** 2
        ck, dk = reduction.cross_c[k], reduction.cross_d[k]
        out[k, 0] = -ck * a**2 / (2 * wk2)
        if include_fundamental:
            out[k, 1] = -3 * dk * a**3 / (4 * (wk2 - w2))
        out[k, 2] = ck * a**2 / (2 * (4 * w2 - wk2))
        out[k, 3] = dk * a**3 / (4 * (9 * w2 - wk2))
    return out


@dataclass(frozen=True, eq=False)
class NdofFreeExpansion:
    """Nonlinear-normal-mode expansion: driven modal coordinate plus cross-mode terms."""

    a1: float
    reduction: ModalReduction
    basis: Eigenbasis
    order: int = 2
    include_fundamental: bool = False
    coupling: bool = False
    exact_start: bool = False

    def __post_init__(self):
        _check_order(self.order)

    @property
    def params(self) -> OscillatorParams:
        return self.reduction.effective_params()

    @property
    def driven(self) -> FreeExpansion:
        nu = float(backbone_frequency(self.a1, self.params, self.order))
        if self.coupling and self.order == 2:
            nu += self.reduction.epsilon**2 * coupling_frequency_shift(self.a1, self.reduction)
        return FreeExpansion(float(self.a1), nu, self.params, self.order, self.exact_start)

    def modal(self, t) -> np.ndarray:
        """Physical modal coordinates, shape (len(t), n)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        driven = self.driven
        n = len(self.reduction.omegas)
        y = np.zeros((t.size, n))
        y[:, self.reduction.mode - 1] = driven.displacement(t)
        if self.order == 2:
            coef = self.reduction.epsilon**2 * free_cross_mode_coefficients(
                self.a1, self.reduction, self.include_fundamental)
            th = driven.nu * t[:, None]
            y += coef[:, 0] + coef[:, 1] * np.cos(th) + coef[:, 2] * np.cos(2 * th) + coef[:, 3] * np.cos(3 * th)
        return y

    def displacement(self, t) -> np.ndarray:
        """Physical displacement vectors, shape (len(t), n)."""
        return self.modal(t) @ np.asarray(self.basis.phis).T

    def initial_state(self) -> np.ndarray:
        u0 = self.displacement(0.0)[0]
        return np.concatenate([u0, np.zeros_like(u0)])


def evaluate_free_expansion_ndof(t, a1: float, reduction: ModalReduction, basis: Eigenbasis,
                                 order: int = 2, *, include_fundamental: bool = False,
                                 coupling: bool = False, tol: float = 1e-3) -> np.ndarray:
    """Physical displacement vectors ũ(t) = sum_k ỹ_k(t) phi_k, shape (len(t), n).

    Refuses (InternalResonanceError) when a 2:1 or 3:1 ratio with the driven
    mode makes a cross-mode divisor vanish.
    """
    report = check_internal_resonance(basis, reduction.mode, tol)
    if report.resonant:
        raise InternalResonanceError(report)
    return NdofFreeExpansion(a1, reduction, basis, order, include_fundamental, coupling).displacement(t)

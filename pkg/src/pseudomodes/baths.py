"""Spectral densities, multi-exponential correlation-function expansions and
a quadrature oracle for C(t).

An expansion represents C(t) = sum_j a_j exp(-nu_j t) for t >= 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

REAL_TOL = 1e-10


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class CFTerm:
    amplitude: complex
    exponent: complex

    def __post_init__(self):
        object.__setattr__(self, "amplitude", complex(self.amplitude))
        object.__setattr__(self, "exponent", complex(self.exponent))
        if self.exponent.real < -1e-14:
            raise ValueError(f"decay exponent must have Re >= 0, got {self.exponent}")


@dataclass(frozen=True)
class Underdamped:
    lam: float
    gamma: float
    omega0: float

    def __post_init__(self):
        if min(self.lam, self.gamma, self.omega0) <= 0:
            raise ValueError("underdamped parameters must be positive")
        if self.gamma >= self.omega0:
            raise ValueError("underdamped expansion requires gamma < omega0 (overdamped regime rejected)")

    def density(self, w):
        w = np.asarray(w, dtype=float)
        g = 2 * self.lam**2 * self.gamma * w / ((w**2 - self.omega0**2) ** 2 + 4 * self.gamma**2 * w**2)
        return np.where(w > 0, g, 0.0)

    def density_over_w(self, w):
        w = np.asarray(w, dtype=float)
        return 2 * self.lam**2 * self.gamma / ((w**2 - self.omega0**2) ** 2 + 4 * self.gamma**2 * w**2)

    @property
    def scale(self) -> float:
        return self.omega0

    def tail_decay(self) -> int:
        return 3

    def describe(self) -> dict:
        return {"kind": "underdamped", "lambda": self.lam, "gamma": self.gamma, "omega0": self.omega0}


@dataclass(frozen=True)
class DrudeLorentz:
    lam: float
    gamma: float

    def __post_init__(self):
        if min(self.lam, self.gamma) <= 0:
            raise ValueError("Drude-Lorentz parameters must be positive")

    def density(self, w):
        w = np.asarray(w, dtype=float)
        g = 2 * self.lam * self.gamma * w / (self.gamma**2 + w**2)
        return np.where(w > 0, g, 0.0)

    def density_over_w(self, w):
        w = np.asarray(w, dtype=float)
        return 2 * self.lam * self.gamma / (self.gamma**2 + w**2)

    @property
    def scale(self) -> float:
        return self.gamma

    def tail_decay(self) -> int:
        return 1

    def describe(self) -> dict:
        return {"kind": "drude_lorentz", "lambda": self.lam, "gamma": self.gamma}


class ZeroDensity:
    """G identically zero; useful as a trivial quadrature case."""

    scale = 1.0

    def density(self, w):
        return np.zeros_like(np.asarray(w, dtype=float))

    def density_over_w(self, w):
        return np.zeros_like(np.asarray(w, dtype=float))

    def tail_decay(self) -> int:
        return 10

    def describe(self) -> dict:
        return {"kind": "zero"}


@dataclass(frozen=True)
class CFExpansion:
    terms: tuple[CFTerm, ...]
    beta: float
    provenance: dict = field(default_factory=dict)
    check_real: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.check_real and self.terms:
            c0 = sum(t.amplitude for t in self.terms)
            if abs(c0.imag) > REAL_TOL * max(1.0, abs(c0)):
                raise ValueError(f"C(0) must be real, got imaginary part {c0.imag:.3e}")

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([t.amplitude for t in self.terms], dtype=complex)

    @property
    def exponents(self) -> np.ndarray:
        return np.array([t.exponent for t in self.terms], dtype=complex)

    @property
    def omega_reg(self) -> float | None:
        return self.provenance.get("omega_reg")

    def __call__(self, t):
        return evaluate_cf(self, t)

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "terms": [
                {"re_a": t.amplitude.real, "im_a": t.amplitude.imag,
                 "re_nu": t.exponent.real, "im_nu": t.exponent.imag}
                for t in self.terms
            ],
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CFExpansion":
        terms = [CFTerm(complex(d["re_a"], d["im_a"]), complex(d["re_nu"], d["im_nu"])) for d in data["terms"]]
        return cls(tuple(terms), float(data["beta"]), dict(data.get("provenance", {})))


def evaluate_cf(expansion: CFExpansion, t) -> np.ndarray | complex:
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("C(t) is defined for t >= 0 only")
    a, nu = expansion.amplitudes, expansion.exponents
    val = np.exp(-np.multiply.outer(t_arr, nu)) @ a if a.size else np.zeros(t_arr.shape, complex)
    return complex(val) if np.ndim(t) == 0 else val


def _cot(z: complex) -> complex:
    return np.cos(z) / np.sin(z)


def underdamped_expansion(lam: float, gamma: float, omega0: float, beta: float, k_max: int) -> CFExpansion:
    sd = Underdamped(lam, gamma, omega0)
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError("Matsubara expansion requires finite positive beta")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    w = math.sqrt(omega0**2 - gamma**2)
    nu_p, nu_m = complex(gamma, w), complex(gamma, -w)
    terms = []
    for nu in (nu_p, nu_m):
        a = lam**2 / (4 * nu.imag) * (1 + 1j * _cot(beta * nu / 2))
        terms.append(CFTerm(a, nu))
    for k in range(1, k_max + 1):
        vk = 2 * math.pi * k / beta
        # residues of the Bose factor at w = -i nu_k; the denominator is
        # (nu_k^2 - nu_+^2)(nu_k^2 - nu_-^2), checked against cf_quadrature
        ak = -(4 * lam**2 * gamma / beta) * vk / ((nu_p**2 - vk**2) * (nu_m**2 - vk**2))
        terms.append(CFTerm(ak, vk))
    prov = {**sd.describe(), "beta": beta, "k_max": k_max, "omega_reg": None}
    return CFExpansion(tuple(terms), beta, prov)


def drude_lorentz_expansion(lam: float, gamma: float, beta: float, k_max: int,
                            omega_reg: float | None = None) -> CFExpansion:
    sd = DrudeLorentz(lam, gamma)
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError("Matsubara expansion requires finite positive beta")
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    vks = [2 * math.pi * k / beta for k in range(1, k_max + 1)]
    for k, vk in enumerate(vks, 1):
        if abs(vk - gamma) < 1e-12 * max(1.0, gamma):
            raise ValueError(f"Matsubara pole collision: beta*gamma = 2*pi*{k}")
    if omega_reg is None:
        omega_reg = 50.0 * max([gamma] + vks)
    if omega_reg <= gamma:
        raise ValueError("omega_reg must exceed gamma")
    a0 = lam * gamma * (1 / math.tan(beta * gamma / 2) - 1j)
    terms = [CFTerm(a0, gamma), CFTerm(np.conj(a0), omega_reg)]
    for vk in vks:
        terms.append(CFTerm(4 * lam * gamma * vk / (beta * (vk**2 - gamma**2)), vk))
    prov = {**sd.describe(), "beta": beta, "k_max": k_max, "omega_reg": float(omega_reg)}
    return CFExpansion(tuple(terms), beta, prov)


def regularization_perturbation(expansion: CFExpansion, t) -> np.ndarray:
    """Contribution of the regularization term to C(t) (zero if absent)."""
    om = expansion.omega_reg
    t = np.asarray(t, dtype=float)
    if om is None:
        return np.zeros(t.shape, complex)
    out = np.zeros(t.shape, complex)
    for term in expansion.terms:
        if abs(term.exponent - om) < 1e-12 * om:
            out += term.amplitude * np.exp(-om * t)
    return out


def _xcoth(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + x**2 / 3, safe / np.tanh(safe))


def cf_quadrature(kind, beta: float, t: float, atol: float = 1e-10, limit: int = 2000) -> complex:
    """C(t) = int_0^inf dw/pi G(w) [coth(beta w / 2) cos(w t) - i sin(w t)].

    The body [0, w_cut] is integrated adaptively with the oscillatory weight;
    the tail beyond w_cut uses the Fourier-integral routine when t > 0.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if isinstance(kind, ZeroDensity):
        return 0.0j
    if beta <= 0:
        raise ValueError("beta must be positive")

    def thermal(w):
        # G(w) coth(beta w/2), finite at w = 0
        if math.isinf(beta):
            return kind.density(w)
        return kind.density_over_w(w) * (2.0 / beta) * _xcoth(beta * np.asarray(w) / 2)

    # cut where the thermal integrand has dropped to 1e-14 of its peak
    grid = np.linspace(0, 20 * kind.scale + (0 if math.isinf(beta) else 20 / beta), 4001)
    peak = float(np.max(np.abs(thermal(grid))))
    p = kind.tail_decay()
    w_cut = grid[-1]
    if peak > 0:
        big = np.abs(thermal(w_cut))
        if big > 1e-14 * peak:
            w_cut = w_cut * (big / (1e-14 * peak)) ** (1.0 / p)
        w_cut = min(w_cut, 1e7 * kind.scale)
    w_body = min(w_cut, 200 * kind.scale + (0 if math.isinf(beta) else 200 / beta))

    errs = []

    def q(f, a, b, weight=None, wvar=None):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                if weight is None:
                    val, err = integrate.quad(f, a, b, limit=limit, epsabs=atol / 4, epsrel=1e-12)
                else:
                    val, err = integrate.quad(f, a, b, weight=weight, wvar=wvar, limit=limit,
                                              epsabs=atol / 4, epsrel=1e-12)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"quadrature did not converge on [{a}, {b}]: {exc}") from exc
        errs.append(err)
        return val

    s = kind.scale
    marks = [0.0, 0.5 * s, 0.9 * s, s, 1.1 * s, 2 * s, 5 * s, 20 * s, w_body]
    marks = sorted(set(m for m in marks if m <= w_body))
    re = im = 0.0
    if t == 0:
        if p <= 1:
            raise QuadratureError("C(0) diverges for a spectral density decaying like 1/w")
        for a, b in zip(marks[:-1], marks[1:]):
            re += q(thermal, a, b)
        if w_cut > w_body:
            re += q(thermal, w_body, w_cut)
    else:
        for a, b in zip(marks[:-1], marks[1:]):
            re += q(thermal, a, b, "cos", t)
            im -= q(kind.density, a, b, "sin", t)
        re += q(thermal, w_body, np.inf, "cos", t)
        im -= q(kind.density, w_body, np.inf, "sin", t)
    total_err = sum(errs) / math.pi
    if total_err > 10 * atol:
        raise QuadratureError(f"quadrature achieved error {total_err:.2e} > requested {atol:.1e}")
    return complex(re, im) / math.pi

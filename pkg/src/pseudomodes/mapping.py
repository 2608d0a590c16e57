"""Dictionary from correlation-function terms to pseudomode parameter sets.

A pseudomode with parameters (Omega, Gamma, N, lambda_sq) contributes
lambda_sq * adv(t) to the advanced and lambda_sq * ret(t) to the retarded
correlation function, with

    adv(t) = N exp(i Omega t - Gamma t / 2) + (N + 1) exp(-i Omega t - Gamma t / 2)
    ret(t) = N exp(-i Omega t - Gamma t / 2) + (N + 1) exp(i Omega t - Gamma t / 2).

A set of modes reproduces a bath when the summed adv equals C(t) and the
summed ret equals C(t)*.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baths import CFExpansion, CFTerm, evaluate_cf

PAIR_TOL = 1e-10


class MappingError(ValueError):
    pass


class Row(str, enum.Enum):
    """Kinds of correlation-function terms with a known pseudomode image."""

    REAL = "real"                      # a e^{-nu t}, a real
    CONJ_AMPLITUDES = "conj_amplitudes"  # a e^{-nu1 t} + a* e^{-nu2 t}
    DIFFERENCE = "difference"          # a e^{-nu1 t} - a e^{-nu2 t}
    CONJ_EXPONENTS = "conj_exponents"  # a1 e^{-nu t} + a2 e^{-nu* t}, a1 + a2 real, |Re a1| > |Re a2|
    COMPLEX = "complex"                # a e^{-nu t}, a not real; needs a regularization partner


@dataclass(frozen=True)
class PseudomodeParams:
    Omega: complex
    Gamma: complex
    N: complex
    lambda_sq: complex
    cutoff: int = 2

    def __post_init__(self):
        for name in ("Omega", "Gamma", "N", "lambda_sq"):
            object.__setattr__(self, name, complex(getattr(self, name)))
        if not self.N.real > -0.5:
            raise ValueError(f"Re N must exceed -1/2, got N = {self.N}")
        if int(self.cutoff) < 2:
            raise ValueError("cutoff must be >= 2")
        object.__setattr__(self, "cutoff", int(self.cutoff))

    @property
    def lam(self) -> complex:
        """Coupling constant: principal square root of lambda_sq."""
        return complex(np.sqrt(self.lambda_sq))

    def with_cutoff(self, cutoff: int) -> "PseudomodeParams":
        return PseudomodeParams(self.Omega, self.Gamma, self.N, self.lambda_sq, cutoff)

    def to_json(self) -> dict:
        return {
            "re_omega": self.Omega.real, "im_omega": self.Omega.imag,
            "re_gamma": self.Gamma.real, "im_gamma": self.Gamma.imag,
            "re_n": self.N.real, "im_n": self.N.imag,
            "re_lambda_sq": self.lambda_sq.real, "im_lambda_sq": self.lambda_sq.imag,
            "cutoff": self.cutoff,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PseudomodeParams":
        keys = {"re_omega", "im_omega", "re_gamma", "im_gamma", "re_n", "im_n",
                "re_lambda_sq", "im_lambda_sq", "cutoff"}
        extra = set(d) - keys
        if extra:
            raise KeyError(f"unknown pseudomode fields: {sorted(extra)}")
        return cls(complex(d["re_omega"], d["im_omega"]), complex(d["re_gamma"], d["im_gamma"]),
                   complex(d["re_n"], d["im_n"]), complex(d["re_lambda_sq"], d["im_lambda_sq"]),
                   int(d["cutoff"]))


@dataclass
class MappingReport:
    max_adv_error: float
    max_ret_error: float
    grid: np.ndarray
    assignments: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.max_adv_error, self.max_ret_error)


def _is_real(a: complex, tol: float = PAIR_TOL) -> bool:
    return abs(a.imag) <= tol * max(1.0, abs(a))


def _close(x: complex, y: complex, tol: float = PAIR_TOL) -> bool:
    return abs(x - y) <= tol * max(1.0, abs(x), abs(y))


def map_term(row: Row | str, *, a=None, nu=None, a1=None, a2=None, nu1=None, nu2=None,
             omega_reg=None, cutoff: int = 2) -> list[PseudomodeParams]:
    """Pseudomodes reproducing one correlation-function term (or pair of terms)."""
    row = Row(row)
    c = cutoff
    if row is Row.REAL:
        a, nu = complex(a), complex(nu)
        if not _is_real(a):
            raise MappingError(f"row 'real' requires a real amplitude, got a = {a}")
        return [PseudomodeParams(nu.imag, 2 * nu.real, 0, a.real, c)]
    if row is Row.CONJ_AMPLITUDES:
        a, nu1, nu2 = complex(a), complex(nu1), complex(nu2)
        return [
            PseudomodeParams((nu1 - nu2.conjugate()) / 2j, nu1 + nu2.conjugate(), 0, a, c),
            PseudomodeParams((nu2 - nu1.conjugate()) / 2j, nu2 + nu1.conjugate(), 0, a.conjugate(), c),
        ]
    if row is Row.DIFFERENCE:
        a, nu1, nu2 = complex(a), complex(nu1), complex(nu2)
        return [
            PseudomodeParams(nu1.imag, 2 * nu1.real, 0, a.conjugate(), c),
            PseudomodeParams(nu2.imag, 2 * nu2.real, 0, -a, c),
            PseudomodeParams((nu1 - nu2.conjugate()) / 2j, nu1 + nu2.conjugate(), 0, a - a.conjugate(), c),
        ]
    if row is Row.CONJ_EXPONENTS:
        a1, a2, nu = complex(a1), complex(a2), complex(nu)
        if not _is_real(a1 + a2):
            raise MappingError(f"row 'conj_exponents' requires a1 + a2 real, got {a1 + a2}")
        if not abs(a1.real) > abs(a2.real):
            raise MappingError(
                f"row 'conj_exponents' requires |Re a1| > |Re a2|, got {abs(a1.real)} <= {abs(a2.real)}")
        lam_sq = a1 - a2.conjugate()
        return [
            PseudomodeParams(nu.imag, 2 * nu.real, a2 / lam_sq, lam_sq, c),
            PseudomodeParams(0, 2 * nu, 0, a1 - a1.conjugate(), c),
        ]
    if row is Row.COMPLEX:
        a, nu = complex(a), complex(nu)
        if _is_real(a):
            raise MappingError("row 'complex' is meant for non-real amplitudes; use row 'real'")
        if omega_reg is None or not omega_reg > 0:
            raise MappingError("row 'complex' needs a positive regularization exponent omega_reg")
        return map_term(Row.CONJ_AMPLITUDES, a=a, nu1=nu, nu2=complex(omega_reg), cutoff=c)
    raise MappingError(f"unknown row {row}")


def map_expansion(expansion: CFExpansion, cutoffs: Sequence[int] | int | None = None) -> list[PseudomodeParams]:
    """Classify expansion terms and map them to pseudomodes.

    Preference order: real amplitude, conjugate exponents, conjugate
    amplitudes, difference pairs, and finally regularized lone terms.
    Modes are returned in the order of the first expansion term they cover.
    """
    terms = list(expansion.terms)
    c0 = sum((t.amplitude for t in terms), 0j)
    if terms and not _is_real(c0):
        raise MappingError(f"C(0) must be real to be mapped, got {c0}")
    groups: list[tuple[int, Row, dict]] = []
    left: list[tuple[int, CFTerm]] = []
    for i, t in enumerate(terms):
        if _is_real(t.amplitude):
            groups.append((i, Row.REAL, {"a": t.amplitude.real, "nu": t.exponent}))
        else:
            left.append((i, t))

    def pair_off(pred, build):
        i = 0
        while i < len(left):
            for j in range(len(left)):
                if j == i:
                    continue
                if pred(left[i][1], left[j][1]):
                    groups.append((min(left[i][0], left[j][0]),) + build(left[i][1], left[j][1]))
                    for k in sorted((i, j), reverse=True):
                        left.pop(k)
                    i = -1
                    break
            i += 1

    def conj_exp(p: CFTerm, q: CFTerm):
        return (_close(q.exponent, p.exponent.conjugate()) and abs(p.exponent.imag) > 0
                and _is_real(p.amplitude + q.amplitude) and abs(p.amplitude.real) > abs(q.amplitude.real))

    pair_off(conj_exp, lambda p, q: (Row.CONJ_EXPONENTS, {"a1": p.amplitude, "a2": q.amplitude, "nu": p.exponent}))
    pair_off(lambda p, q: _close(q.amplitude, p.amplitude.conjugate()),
             lambda p, q: (Row.CONJ_AMPLITUDES, {"a": p.amplitude, "nu1": p.exponent, "nu2": q.exponent}))
    pair_off(lambda p, q: _close(q.amplitude, -p.amplitude),
             lambda p, q: (Row.DIFFERENCE, {"a": p.amplitude, "nu1": p.exponent, "nu2": q.exponent}))
    if left:
        if expansion.omega_reg is None:
            raise MappingError(f"{len(left)} complex term(s) left unmapped and no omega_reg available")
        for i, t in left:
            groups.append((i, Row.COMPLEX, {"a": t.amplitude, "nu": t.exponent, "omega_reg": expansion.omega_reg}))

    pms: list[PseudomodeParams] = []
    for _, row, kw in sorted(groups, key=lambda g: g[0]):
        pms.extend(map_term(row, **kw))
    return assign_cutoffs(pms, cutoffs)


def assign_cutoffs(pms: Sequence[PseudomodeParams], cutoffs) -> list[PseudomodeParams]:
    if cutoffs is None:
        return list(pms)
    if isinstance(cutoffs, int):
        cutoffs = [cutoffs] * len(pms)
    if len(cutoffs) != len(pms):
        raise MappingError(f"got {len(cutoffs)} cutoffs for {len(pms)} pseudomodes")
    return [pm.with_cutoff(c) for pm, c in zip(pms, cutoffs)]


def pm_correlation(pm: PseudomodeParams, t):
    """(adv, ret) single-mode correlations without the lambda_sq factor."""
    t = np.asarray(t, dtype=float)
    # combined exponents: a complex Omega makes exp(+-i Omega t) alone overflow
    ep = np.exp((1j * pm.Omega - pm.Gamma / 2) * t)
    em = np.exp((-1j * pm.Omega - pm.Gamma / 2) * t)
    adv = pm.N * ep + (pm.N + 1) * em
    ret = pm.N * em + (pm.N + 1) * ep
    return adv, ret


def pm_sum(pms: Sequence[PseudomodeParams], t):
    t = np.asarray(t, dtype=float)
    adv = np.zeros(t.shape, complex)
    ret = np.zeros(t.shape, complex)
    for pm in pms:
        a, r = pm_correlation(pm, t)
        adv += pm.lambda_sq * a
        ret += pm.lambda_sq * r
    return adv, ret


def verify_mapping(expansion: CFExpansion, pms: Sequence[PseudomodeParams], t_grid) -> MappingReport:
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or np.any(t < 0):
        raise ValueError("grid must be non-empty with t >= 0")
    c = evaluate_cf(expansion, t)
    adv, ret = pm_sum(pms, t)
    return MappingReport(float(np.max(np.abs(adv - c))), float(np.max(np.abs(ret - np.conj(c)))), t,
                         [pm.to_json() for pm in pms])


def stationary_state(pm: PseudomodeParams) -> np.ndarray:
    """Truncated state proportional to (N/(N+1))^k on the diagonal, unit trace."""
    if not pm.N.real > -0.5:
        raise ValueError("Re N must exceed -1/2")
    diag = np.zeros(pm.cutoff, complex)
    if pm.N == 0:
        diag[0] = 1.0
    else:
        diag = (pm.N / (pm.N + 1)) ** np.arange(pm.cutoff)
        diag = diag / diag.sum()
    return np.diag(diag)


def mode_operators(cutoff: int):
    b = np.diag(np.sqrt(np.arange(1, cutoff, dtype=float)), 1).astype(complex)
    return b, b.conj().T


def mode_generator_dense(pm: PseudomodeParams) -> np.ndarray:
    """Free single-mode generator as a (C^2 x C^2) matrix on row-major vec(rho)."""
    from .liouvillian import lindblad_superop
    b, bd = mode_operators(pm.cutoff)
    n = bd @ b
    H = pm.Omega * n
    chans = [(pm.Gamma * (pm.N + 1), b), (pm.Gamma * pm.N, bd)]
    return lindblad_superop(H, chans)

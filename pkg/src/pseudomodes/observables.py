"""Quantities extracted from joint system-pseudomode states."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .liouvillian import PseudoLindbladModel, Solution, integrate
from .mapping import mode_operators
from .tensor import (DEFAULT_COND_BOUND, HilbertLayout, OpSum, ProductOp, entropy, partial_trace,
                     partial_transpose, trace_norm)

HERMITIAN_TOL = 1e-3  # truncated pseudomode spaces leave O(1e-5) anti-Hermitian residue
IMAG_CURRENT_TOL = 1e-8


def reduced_state(rho: np.ndarray, layout: HilbertLayout) -> np.ndarray:
    return partial_trace(rho, layout, [0])


def expectation(op: np.ndarray, rho_s: np.ndarray) -> complex:
    return complex(np.trace(op @ rho_s))


def _left(op: ProductOp | OpSum, X: np.ndarray) -> np.ndarray:
    return op.apply(X)


def _right(X: np.ndarray, op: ProductOp) -> np.ndarray:
    """X @ op using the structured left action of op^T."""
    return op.transpose().apply(np.ascontiguousarray(X.T)).T


def _sys_op(model: PseudoLindbladModel, S: np.ndarray) -> ProductOp:
    return ProductOp(model.layout, {0: np.asarray(S, dtype=complex)})


def multi_time_correlation(model: PseudoLindbladModel, rho0: np.ndarray,
                           insertions: Sequence[tuple[np.ndarray, float]], rtol: float = 1e-10,
                           atol: float = 1e-12) -> complex:
    """tr[S_k U(t_k, t_{k-1}) ... S_1 U(t_1, 0) rho0] with the S_i acting from the left.

    Insertions are (operator on the system, time) with non-decreasing times."""
    times = [float(t) for _, t in insertions]
    if not insertions:
        return complex(np.trace(rho0))
    if any(b < a for a, b in zip(times[:-1], times[1:])) or times[0] < 0:
        raise ValueError("insertion times must be non-negative and non-decreasing")
    rho = np.array(rho0, dtype=complex)
    t = 0.0
    for S, ti in insertions[:-1]:
        if ti > t:
            rho = integrate(model, rho, [t, ti], rtol=rtol, atol=atol).states[-1]
            t = ti
        rho = _left(_sys_op(model, S), rho)
    S, ti = insertions[-1]
    if ti > t:
        rho = integrate(model, rho, [t, ti], rtol=rtol, atol=atol).states[-1]
    return complex(np.trace(_left(_sys_op(model, S), rho)))


def _coupling_terms(model: PseudoLindbladModel, env_index: int) -> list[ProductOp]:
    """lam_n Q X_n for every mode n of one environment."""
    env = model.environments[env_index]
    out = []
    for idx, (e, site, pm) in enumerate(model.mode_sites()):
        if e != env_index:
            continue
        b, bd = mode_operators(pm.cutoff)
        out.append(ProductOp(model.layout, {0: env.Q, site: b + bd}, model.coupling_lambda(idx)))
    return out


def _env_index(model: PseudoLindbladModel, label: str | int) -> int:
    if isinstance(label, int):
        if not 0 <= label < len(model.environments):
            raise KeyError(f"no environment with index {label}")
        return label
    for i, env in enumerate(model.environments):
        if env.label == label:
            return i
    raise KeyError(f"no environment labelled {label!r}")


def interaction_expectation(model: PseudoLindbladModel, rho: np.ndarray, S: np.ndarray,
                            bath_string: Sequence[str | int] = ()) -> complex:
    """tr[(S x 1) prod_j (sum_n lam_n X_n^{mu_j}) rho] where the bath factors are
    the environments' pseudomode position operators (without Q)."""
    lay = model.layout
    factors = []
    for label in bath_string:
        e = _env_index(model, label)
        op = OpSum(lay)
        for idx, (ei, site, pm) in enumerate(model.mode_sites()):
            if ei == e:
                b, bd = mode_operators(pm.cutoff)
                op.add(ProductOp(lay, {site: b + bd}, model.coupling_lambda(idx)))
        factors.append(op)
    Y = np.array(rho, dtype=complex)
    for op in reversed(factors):
        Y = op.apply(Y)
    return complex(np.trace(_left(_sys_op(model, S), Y)))


def mode_generator_apply(model: PseudoLindbladModel, mode_index: int, rho: np.ndarray) -> np.ndarray:
    """Free generator of one pseudomode (frequency term and both dissipators) on the joint state."""
    _, site, pm = model.mode_sites()[mode_index]
    lay = model.layout
    b, bd = mode_operators(pm.cutoff)
    n_op = ProductOp(lay, {site: bd @ b})
    out = -1j * pm.Omega * (_left(n_op, rho) - _right(rho, n_op))
    for rate, L in ((pm.Gamma * (pm.N + 1), b), (pm.Gamma * pm.N, bd)):
        if rate == 0:
            continue
        Lop = ProductOp(lay, {site: L})
        Ld = Lop.adjoint()
        M = Ld @ Lop
        out += rate * (_right(_left(Lop, rho), Ld) - 0.5 * (_left(M, rho) + _right(rho, M)))
    return out


@dataclass
class HeatCurrentBreakdown:
    t: float
    per_mode: np.ndarray        # complex, one entry per pseudomode
    per_environment: np.ndarray  # complex sums over each environment's modes

    @property
    def total(self) -> complex:
        return complex(self.per_mode.sum())


def heat_currents(model: PseudoLindbladModel, rho: np.ndarray, t: float = 0.0) -> HeatCurrentBreakdown:
    """q_n = -tr[lam_n Q X_n (L_n rho)] for every pseudomode n (heat into the bath)."""
    if model.has_terminator:
        raise ValueError("heat currents are not decomposed for models with a terminator")
    q = []
    env_of = []
    for idx, (e, site, pm) in enumerate(model.mode_sites()):
        env = model.environments[e]
        b, bd = mode_operators(pm.cutoff)
        Hi = ProductOp(model.layout, {0: env.Q, site: b + bd}, model.coupling_lambda(idx))
        q.append(-np.trace(Hi.apply(mode_generator_apply(model, idx, rho))))
        env_of.append(e)
    q = np.array(q, dtype=complex)
    per_env = np.array([q[np.array(env_of) == e].sum() for e in range(len(model.environments))], complex)
    return HeatCurrentBreakdown(t, q, per_env)


def heat_current_commutator_form(model: PseudoLindbladModel, rho: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Per-mode currents from i<[H_s, H_n]> - d/dt<H_n> + i sum_m <[H_m, H_n]>.

    d/dt<H_n> is taken from the full generator, so this route shares no code
    with ``heat_currents`` beyond the generator itself."""
    from .liouvillian import Generator
    gen = Generator(model)
    drho = gen.apply(rho, t)
    Hs = _sys_op(model, model.h_sys.at(t))
    terms = []
    for e in range(len(model.environments)):
        terms.extend(_coupling_terms(model, e))
    out = []
    for Hn in terms:
        comm_s = np.trace(_left(Hs, _left(Hn, rho)) - _left(Hn, _left(Hs, rho)))
        cross = sum(np.trace(_left(Hm, _left(Hn, rho)) - _left(Hn, _left(Hm, rho))) for Hm in terms)
        out.append(1j * comm_s - np.trace(_left(Hn, drho)) + 1j * cross)
    return np.array(out, dtype=complex)


# --------------------------------------------------------------------------
# thermodynamics


def vn_entropy(rho_s: np.ndarray, tol: float = HERMITIAN_TOL) -> float:
    """Von Neumann entropy of a (numerically) Hermitian state."""
    dev = np.max(np.abs(rho_s - rho_s.conj().T))
    if dev > tol:
        raise ValueError(f"reduced state is not Hermitian (deviation {dev:.2e}); entropy undefined")
    w = np.linalg.eigvalsh(0.5 * (rho_s + rho_s.conj().T))
    w = w[w > 1e-15]
    return float(-np.sum(w * np.log(w)))


@dataclass
class ThermoRecord:
    t: float
    U: float
    power: float
    vn_entropy_sys: float
    second_law_lhs: float
    imag_residue: float  # largest |Im| discarded from U and power
    antihermitian: float  # max |rho_s - rho_s^+|, a truncation diagnostic


def thermo_record(model: PseudoLindbladModel, rho_t: np.ndarray, rho_0: np.ndarray,
                  integrated_currents: Sequence[float], t: float = 0.0) -> ThermoRecord:
    """U, power and the integrated second-law expression at one time.

    ``integrated_currents`` holds int_0^t Re q^mu per environment."""
    lay = model.layout
    rs = reduced_state(rho_t, lay)
    r0 = reduced_state(rho_0, lay)
    U = expectation(model.h_sys.at(t), rs)
    edges = model.h_sys.breakpoints(t - 1e-9, t + 1e-9)
    P = complex("nan") if edges else expectation(model.h_sys.derivative(t), rs)
    s_t, s_0 = vn_entropy(rs), vn_entropy(r0)
    sigma = s_t - s_0
    for env, q in zip(model.environments, integrated_currents):
        if env.beta is None:
            raise ValueError(f"environment {env.label!r} has no inverse temperature")
        sigma += env.beta * q
    resid = max(abs(U.imag), 0.0 if math.isnan(P.real) else abs(P.imag))
    anti = float(np.max(np.abs(rs - rs.conj().T)))
    return ThermoRecord(t, U.real, P.real, s_t, sigma, resid, anti)


@dataclass
class ThermoSeries:
    times: np.ndarray
    currents: np.ndarray      # (n_times, n_modes) complex
    records: list[ThermoRecord]

    @property
    def total_current(self) -> np.ndarray:
        return self.currents.sum(axis=1)

    @property
    def second_law(self) -> np.ndarray:
        return np.array([r.second_law_lhs for r in self.records])


def thermo_series(model: PseudoLindbladModel, solution: Solution) -> ThermoSeries:
    """Heat currents and thermodynamic records along a deterministic solution."""
    times = np.asarray(solution.times, float)
    currents = np.array([heat_currents(model, r, t).per_mode for r, t in zip(solution.states, times)])
    env_of = np.array([e for e, _, _ in model.mode_sites()], int)
    per_env = np.stack([currents[:, env_of == e].sum(axis=1).real for e in range(len(model.environments))], 1)
    integ = cumulative_trapezoid(per_env, times, axis=0, initial=0.0)
    rho0 = solution.states[0]
    recs = [thermo_record(model, r, rho0, integ[k], t) for k, (r, t) in enumerate(zip(solution.states, times))]
    return ThermoSeries(times, currents, recs)


# --------------------------------------------------------------------------
# correlations between system and pseudomodes


def negativity(rho: np.ndarray, layout: HilbertLayout) -> float:
    """(||rho^{T_s}||_1 - 1) / 2 with the partial transpose on the system factor."""
    return 0.5 * (trace_norm(partial_transpose(rho, layout, 0)) - 1.0)


def mutual_information(rho: np.ndarray, layout: HilbertLayout,
                       cond_bound: float = DEFAULT_COND_BOUND) -> complex:
    """S(rho_s) + S(rho_pm) - S(rho) with S(A) = -tr A log A on principal branches."""
    rest = list(range(1, len(layout)))
    rho_s = partial_trace(rho, layout, [0])
    rho_pm = partial_trace(rho, layout, rest)
    return entropy(rho_s, cond_bound) + entropy(rho_pm, cond_bound) - entropy(rho, cond_bound)


def pseudomode_occupations(model: PseudoLindbladModel, rho: np.ndarray) -> np.ndarray:
    """tr[b_n^+ b_n rho] per mode.  Unphysical diagnostic: pseudomode
    populations have no direct meaning as bath occupations."""
    out = []
    for _, site, pm in model.mode_sites():
        b, bd = mode_operators(pm.cutoff)
        out.append(np.trace(ProductOp(model.layout, {site: bd @ b}).apply(rho)))
    return np.array(out, complex)

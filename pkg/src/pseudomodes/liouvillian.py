"""Pseudo-Lindblad generator for a system coupled to pseudomodes.

The generator acts as

    L rho = -i [H, rho] + sum_a g_a (L_a rho L_a^+ - {L_a^+ L_a, rho} / 2) + K rho

with H = H_s(t) + sum_n lam_n Q X_n + sum_n Omega_n b_n^+ b_n (not Hermitian
in general), channels (b_n, Gamma_n (N_n + 1)) and (b_n^+, Gamma_n N_n), and
an optional terminator K per environment.  It is stored in the form

    L rho = G rho + rho G' + sum_k c_k A_k rho B_k

with G = -iH - sum g M / 2 and G' = iH - sum g M / 2, and applied through
Kronecker-structured operators, never as a dense superoperator (except on
request for small models).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .mapping import PseudomodeParams, mode_operators, stationary_state
from .rk import DiagExponential, IntegrationError, Stats, integrate_etd, integrate_if
from .tensor import HilbertLayout, OpSum, ProductOp, kron

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # maps the sigma_z = +1 state to the -1 state
SIGMA_PLUS = SIGMA_MINUS.T.copy()


# --------------------------------------------------------------------------
# schedules


class Schedule:
    """Piecewise-constant scalar drive f(t)."""

    def value(self, t: float) -> float:
        raise NotImplementedError

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return []

    def derivative(self, t: float) -> float:
        return 0.0

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Schedule):
    amplitude: float = 1.0

    def value(self, t):
        return self.amplitude

    def to_json(self):
        return {"kind": "constant", "amplitude": self.amplitude}


@dataclass(frozen=True)
class PulseSchedule(Schedule):
    """f(t) = V on [n tau - tau_p, n tau] for integers n >= 1, zero elsewhere."""

    V: float
    tau: float
    tau_p: float

    def __post_init__(self):
        if self.tau <= self.tau_p:
            raise ValueError("pulse period tau must exceed the pulse width tau_p")
        if self.tau_p <= 0:
            raise ValueError("pulse width must be positive")

    @classmethod
    def pi_pulses(cls, V: float, gap: float) -> "PulseSchedule":
        tau_p = math.pi / (2 * V)
        return cls(V, tau_p + gap, tau_p)

    def value(self, t):
        n = math.ceil(t / self.tau - 1e-13)
        if n < 1:
            return 0.0
        return self.V if n * self.tau - self.tau_p - 1e-12 <= t <= n * self.tau + 1e-12 else 0.0

    def breakpoints(self, t0, t1):
        out = []
        n = max(1, int(math.floor(t0 / self.tau)))
        while (n - 1) * self.tau <= t1:
            for e in (n * self.tau - self.tau_p, n * self.tau):
                if t0 < e < t1:
                    out.append(e)
            n += 1
        return sorted(out)

    def to_json(self):
        return {"kind": "pulses", "V": self.V, "tau": self.tau, "tau_p": self.tau_p}


@dataclass(frozen=True)
class HamiltonianSchedule:
    """H_s(t) = H0 + sum_k f_k(t) H_k on the system factor."""

    H0: np.ndarray
    terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "H0", np.asarray(self.H0, dtype=complex))
        object.__setattr__(self, "terms", tuple((np.asarray(op, dtype=complex), s) for op, s in self.terms))

    @property
    def dim(self) -> int:
        return self.H0.shape[0]

    @property
    def is_static(self) -> bool:
        return all(isinstance(s, Constant) for _, s in self.terms)

    def at(self, t: float) -> np.ndarray:
        H = self.H0.copy()
        for op, s in self.terms:
            H = H + s.value(t) * op
        return H

    def derivative(self, t: float) -> np.ndarray:
        D = np.zeros_like(self.H0)
        for op, s in self.terms:
            D = D + s.derivative(t) * op
        return D

    def drive_values(self, t: float) -> tuple:
        return tuple(s.value(t) for _, s in self.terms)

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        pts = set()
        for _, s in self.terms:
            pts.update(s.breakpoints(t0, t1))
        return sorted(pts)


@dataclass(frozen=True)
class Environment:
    Q: np.ndarray
    pms: tuple[PseudomodeParams, ...]
    terminator: tuple[complex, complex] | None = None
    beta: float | None = None
    label: str = "bath"

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=complex))
        object.__setattr__(self, "pms", tuple(self.pms))
        if self.terminator is not None:
            object.__setattr__(self, "terminator", (complex(self.terminator[0]), complex(self.terminator[1])))


@dataclass(frozen=True)
class PseudoLindbladModel:
    h_sys: HamiltonianSchedule
    environments: tuple[Environment, ...] = ()
    system_channels: tuple = ()  # extra (rate, operator on the system) channels
    lam_sign: tuple | None = None  # optional +-1 per mode, flips lam_n -> -lam_n

    def __post_init__(self):
        object.__setattr__(self, "environments", tuple(self.environments))
        object.__setattr__(self, "system_channels",
                           tuple((complex(g), np.asarray(L, dtype=complex)) for g, L in self.system_channels))
        d = self.h_sys.dim
        for env in self.environments:
            if env.Q.shape != (d, d):
                raise ValueError("coupling operator does not match system dimension")
        for g, L in self.system_channels:
            if L.shape != (d, d):
                raise ValueError("system channel operator does not match system dimension")

    @property
    def pms(self) -> list[PseudomodeParams]:
        return [pm for env in self.environments for pm in env.pms]

    @property
    def layout(self) -> HilbertLayout:
        return HilbertLayout((self.h_sys.dim,) + tuple(pm.cutoff for pm in self.pms))

    @property
    def has_terminator(self) -> bool:
        return any(env.terminator is not None for env in self.environments)

    def mode_sites(self) -> list[tuple[int, int, PseudomodeParams]]:
        """(environment index, site index, params) per pseudomode."""
        out, site = [], 1
        for e, env in enumerate(self.environments):
            for pm in env.pms:
                out.append((e, site, pm))
                site += 1
        return out

    def coupling_lambda(self, mode_index: int) -> complex:
        lam = self.pms[mode_index].lam
        if self.lam_sign is not None:
            lam *= self.lam_sign[mode_index]
        return lam

    def initial_state(self, rho_sys: np.ndarray) -> np.ndarray:
        """rho_s tensor the stationary states of all pseudomodes."""
        return kron([np.asarray(rho_sys, dtype=complex)] + [stationary_state(pm) for pm in self.pms])

    def with_pms(self, pms: Sequence[PseudomodeParams]) -> "PseudoLindbladModel":
        pms = list(pms)
        envs = []
        for env in self.environments:
            k = len(env.pms)
            envs.append(Environment(env.Q, tuple(pms[:k]), env.terminator, env.beta, env.label))
            pms = pms[k:]
        return PseudoLindbladModel(self.h_sys, tuple(envs), self.system_channels, self.lam_sign)

    def with_hamiltonian(self, h_sys: HamiltonianSchedule) -> "PseudoLindbladModel":
        return PseudoLindbladModel(h_sys, self.environments, self.system_channels, self.lam_sign)


# --------------------------------------------------------------------------
# channel form


@dataclass
class Channel:
    rate: complex
    op: ProductOp
    label: str = ""

    @cached_property
    def op_dag_op(self) -> ProductOp:
        return self.op.adjoint() @ self.op


@dataclass
class ChannelSet:
    layout: HilbertLayout
    H_static: OpSum
    H_drives: list  # (ProductOp on the full space, Schedule)
    channels: list[Channel]
    terminators: list  # (Gamma_adv, Gamma_ret, ProductOp Q)

    def hamiltonian(self, t: float) -> OpSum:
        H = self.H_static.copy()
        for op, s in self.H_drives:
            v = s.value(t)
            if v != 0:
                H.add(op.scaled(v))
        return H


def build_channels(model: PseudoLindbladModel, free_modes: bool = True) -> ChannelSet:
    """Channel form of the generator.  ``free_modes=False`` leaves out every
    pseudomode's own frequency term and dissipators (the part that is
    propagated exactly in the mode eigenbasis)."""
    lay = model.layout
    H = OpSum(lay)
    H.add(ProductOp(lay, {0: model.h_sys.H0}))
    drives = [(ProductOp(lay, {0: op}), s) for op, s in model.h_sys.terms]
    chans: list[Channel] = []
    terms = []
    for idx, (e, site, pm) in enumerate(model.mode_sites()):
        env = model.environments[e]
        b, bd = mode_operators(pm.cutoff)
        lam = model.coupling_lambda(idx)
        H.add(ProductOp(lay, {0: env.Q, site: b + bd}, lam))
        if not free_modes:
            continue
        H.add(ProductOp(lay, {site: bd @ b}, pm.Omega))
        down, up = pm.Gamma * (pm.N + 1), pm.Gamma * pm.N
        if down != 0:
            chans.append(Channel(down, ProductOp(lay, {site: b}), f"b{idx + 1}"))
        if up != 0:
            chans.append(Channel(up, ProductOp(lay, {site: bd}), f"b{idx + 1}+"))
    for g, L in model.system_channels:
        if g != 0:
            chans.append(Channel(g, ProductOp(lay, {0: L}), f"sys{len(chans)}"))
    for env in model.environments:
        if env.terminator is not None:
            terms.append((env.terminator[0], env.terminator[1], ProductOp(lay, {0: env.Q})))
    return ChannelSet(lay, H, drives, chans, terms)


# --------------------------------------------------------------------------
# generator


@dataclass
class SegmentOps:
    G: OpSum        # left factor
    GpT: OpSum      # transpose of the right factor
    sandwiches: list  # (c, A, B^T) with term c A rho B

    @property
    def diag_left(self):
        return self.G.diag

    @property
    def diag_right(self):
        return self.GpT.diag


class Generator:
    """Applies the pseudo-Lindblad generator of a model to dense states."""

    def __init__(self, model: PseudoLindbladModel, free_modes: bool = True):
        self.model = model
        self.cs = build_channels(model, free_modes)
        self.layout = self.cs.layout
        self._cache: dict[tuple, SegmentOps] = {}

    def segment_ops(self, drives: tuple) -> SegmentOps:
        ops = self._cache.get(drives)
        if ops is not None:
            return ops
        lay = self.layout
        H = self.cs.H_static.copy()
        for (op, _), v in zip(self.cs.H_drives, drives):
            if v != 0:
                H.add(op.scaled(v))
        diss = OpSum(lay)
        for ch in self.cs.channels:
            diss.add(ch.op_dag_op.scaled(-0.5 * ch.rate))
        G = H.scaled(-1j) + diss
        Gp = H.scaled(1j) + diss
        sandwiches = [(ch.rate, ch.op, ch.op.adjoint().transpose()) for ch in self.cs.channels]
        for g_adv, g_ret, Q in self.cs.terminators:
            Q2 = Q @ Q
            G.add(Q2.scaled(-g_adv))
            Gp.add(Q2.scaled(-g_ret))
            sandwiches.append((g_adv + g_ret, Q, Q.transpose()))
        ops = SegmentOps(G, Gp.transpose(), sandwiches)
        self._cache[drives] = ops
        return ops

    def ops_at(self, t: float) -> SegmentOps:
        return self.segment_ops(self.model.h_sys.drive_values(t))

    def apply(self, rho: np.ndarray, t: float = 0.0, ops: SegmentOps | None = None,
              skip_diag: bool = False) -> np.ndarray:
        ops = ops if ops is not None else self.ops_at(t)
        if skip_diag:
            left = ops.G.apply_offdiag(rho)
        else:
            left = ops.G.apply(rho)
        rT = np.ascontiguousarray(rho.T)
        rightT = ops.GpT.apply_offdiag(rT) if skip_diag else ops.GpT.apply(rT)
        for c, Aop, BT in ops.sandwiches:
            X = Aop.apply(rho)
            rightT += c * BT.apply(np.ascontiguousarray(X.T))
        return left + rightT.T

    def superoperator(self, t: float = 0.0) -> np.ndarray:
        """Dense matrix acting on row-major vec(rho).  Only for small models."""
        ops = self.ops_at(t)
        D = self.layout.total
        if D > 80:
            raise MemoryError(f"dense superoperator of dimension {D * D} refused")
        I = np.eye(D)
        S = np.kron(ops.G.dense(), I) + np.kron(I, ops.GpT.dense())
        for c, Aop, BT in ops.sandwiches:
            S += c * np.kron(Aop.dense(), BT.dense())
        return S


def lindblad_superop(H: np.ndarray, channels, sandwiches=()) -> np.ndarray:
    """Dense generator on row-major vec(rho) for explicit small matrices."""
    H = np.asarray(H, dtype=complex)
    d = H.shape[0]
    I = np.eye(d)
    S = -1j * (np.kron(H, I) - np.kron(I, H.T))
    for g, L in channels:
        if g == 0:
            continue
        L = np.asarray(L, dtype=complex)
        M = L.conj().T @ L
        S += g * (np.kron(L, L.conj()) - 0.5 * np.kron(M, I) - 0.5 * np.kron(I, M.T))
    for c, A, Bm in sandwiches:
        S += c * np.kron(A, np.asarray(Bm).T)
    return S


# --------------------------------------------------------------------------
# integration


@dataclass
class Solution:
    times: np.ndarray
    states: list
    stats: Stats


STIFF_RATE = 20.0   # local mode rates above this switch integration to the mode eigenbasis
EIGBASIS_COND = 1e6  # refuse ill-conditioned local eigenbases


class ModeEigenbasis:
    """Coordinates in which every pseudomode's free generator is diagonal.

    The state rho (D x D) is mapped to y with shape (d_s, d_s, C_1^2, ...,
    C_K^2): the system indices are kept, and each mode's index pair (i_n, j_n)
    is replaced by the coefficient on the eigenvectors of that mode's local
    generator.  The sum of free generators is then elementwise
    multiplication by sum_n w_n[k_n], which exponential time differencing
    treats exactly."""

    def __init__(self, model: PseudoLindbladModel):
        from .mapping import mode_generator_dense
        self.dims = model.layout.dims
        self.V, self.Vinv, rates = [], [], []
        self.cond = 1.0
        for pm in model.pms:
            w, V = np.linalg.eig(mode_generator_dense(pm))
            self.cond = max(self.cond, float(np.linalg.cond(V)))
            self.V.append(V)
            self.Vinv.append(np.linalg.inv(V))
            rates.append(w)
        K = len(rates)
        total = np.zeros((1, 1) + tuple(len(w) for w in rates), complex)
        for n, w in enumerate(rates):
            shape = [1] * (K + 2)
            shape[n + 2] = len(w)
            total = total + w.reshape(shape)
        self.rates = total
        self.max_rate = max((float(np.abs(w).max()) for w in rates), default=0.0)

    @classmethod
    def worthwhile(cls, model: PseudoLindbladModel) -> "ModeEigenbasis | None":
        if not model.pms:
            return None
        basis = cls(model)
        if basis.max_rate < STIFF_RATE or basis.cond > EIGBASIS_COND:
            return None
        return basis

    @staticmethod
    def _local(y: np.ndarray, axis: int, M: np.ndarray) -> np.ndarray:
        return np.moveaxis(np.tensordot(M, y, axes=([1], [axis])), 0, axis)

    def to_eig(self, rho: np.ndarray) -> np.ndarray:
        K = len(self.dims) - 1
        x = rho.reshape(self.dims + self.dims)
        order = [a for n in range(K + 1) for a in (n, K + 1 + n)]
        x = x.transpose(order).reshape((self.dims[0], self.dims[0]) + tuple(d * d for d in self.dims[1:]))
        for n in range(K):
            x = self._local(x, n + 2, self.Vinv[n])
        return np.ascontiguousarray(x)

    def from_eig(self, y: np.ndarray) -> np.ndarray:
        K = len(self.dims) - 1
        for n in range(K):
            y = self._local(y, n + 2, self.V[n])
        pairs = []
        for d in self.dims:
            pairs += [d, d]
        x = y.reshape(pairs)
        order = [2 * n for n in range(K + 1)] + [2 * n + 1 for n in range(K + 1)]
        D = int(np.prod(self.dims))
        return np.ascontiguousarray(x.transpose(order).reshape(D, D))


def _segments(model: PseudoLindbladModel, t0: float, t1: float) -> list[tuple[float, float]]:
    pts = [t0] + model.h_sys.breakpoints(t0, t1) + [t1]
    return [(a, b) for a, b in zip(pts[:-1], pts[1:]) if b > a]


def integrate(model: PseudoLindbladModel, rho0: np.ndarray, t_grid, rtol: float = 1e-8,
              atol: float = 1e-10, generator: Generator | None = None, callback=None,
              mode_basis: str = "auto") -> Solution:
    """Integrate the master equation and return the states on ``t_grid``.

    The diagonal part of G and G' is propagated exactly (integrating factor),
    the remainder by the embedded DP5(4) tableau.  With stiff pseudomodes
    (``mode_basis="auto"``) or ``mode_basis="eigen"`` every mode's full free
    generator is diagonalized instead and the coupling and system terms are
    integrated by exponential time differencing (ETDRK4).  Pulse edges split the
    time axis so the piecewise-constant drive is never smoothed.  If given,
    ``callback(t, rho)`` is called at every grid time instead of storing
    states (``states`` is then empty).
    """
    gen = generator if generator is not None else Generator(model)
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("time grid must be a non-empty 1-d array")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    if t_grid[0] < 0:
        raise ValueError("time grid must start at t >= 0")
    D = gen.layout.total
    rho = np.array(rho0, dtype=complex)
    if rho.shape != (D, D):
        raise ValueError(f"initial state has shape {rho.shape}, layout needs {(D, D)}")
    stats = Stats()
    states = []

    def emit(t, r):
        if callback is not None:
            callback(t, r)
        else:
            states.append(r)

    t_start = float(t_grid[0])
    emit(t_start, rho.copy())
    h = None
    if mode_basis not in ("auto", "diagonal", "eigen"):
        raise ValueError("mode_basis must be 'auto', 'diagonal' or 'eigen'")
    if mode_basis == "eigen":
        basis = ModeEigenbasis(model)
    elif mode_basis == "auto" and generator is None:
        basis = ModeEigenbasis.worthwhile(model)
    else:
        basis = None
    if basis is not None:
        # stiff pseudomodes: free mode dynamics exact, coupling and system terms explicit
        rem = Generator(model, free_modes=False)
        y = basis.to_eig(rho)
        for a, b in _segments(model, t_start, float(t_grid[-1])):
            ops = rem.ops_at(0.5 * (a + b))
            outs = [t for t in t_grid if a < t <= b]

            def rhs(y, ops=ops):
                return basis.to_eig(rem.apply(basis.from_eig(y), ops=ops))

            _, y, h = integrate_etd(rhs, y, basis.rates, a, b, outs, rtol, atol, h, stats=stats,
                                    emit=lambda t, v: emit(t, basis.from_eig(v)))
            if not np.all(np.isfinite(y)):
                raise IntegrationError(f"non-finite state reached at t={b}")
        return Solution(t_grid, states, stats)
    for a, b in _segments(model, t_start, float(t_grid[-1])):
        ops = gen.ops_at(0.5 * (a + b))
        ex = DiagExponential(ops.diag_left, ops.diag_right)
        outs = [t for t in t_grid if a < t <= b]

        def rhs(t, y, ops=ops):
            return gen.apply(y, ops=ops, skip_diag=True)

        _, rho, h = integrate_if(rhs, rho, a, b, outs, None if ex.trivial else ex, rtol, atol, h, stats=stats,
                                 emit=emit)
        if not np.all(np.isfinite(rho)):
            raise IntegrationError(f"non-finite state reached at t={b}")
    return Solution(t_grid, states, stats)


def _null_vector(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    # the kernel must be one dimensional: one tiny singular value, the next well separated
    _, s, vh = np.linalg.svd(S)
    if s[-1] > tol * s[0]:
        raise np.linalg.LinAlgError(f"generator has no kernel (smallest singular value {s[-1]:.2e})")
    if len(s) > 1 and s[-2] <= tol * s[0]:
        raise np.linalg.LinAlgError(f"generator kernel is degenerate (singular values {s[-1]:.2e}, {s[-2]:.2e})")
    return vh[-1].conj()


def steady_state(model: PseudoLindbladModel, generator: Generator | None = None) -> np.ndarray:
    if not model.h_sys.is_static:
        raise ValueError("steady state requires a static Hamiltonian")
    gen = generator if generator is not None else Generator(model)
    S = gen.superoperator()
    D = gen.layout.total
    v = _null_vector(S)
    rho = v.reshape(D, D)
    tr = np.trace(rho)
    if abs(tr) < 1e-12:
        raise np.linalg.LinAlgError("kernel vector has vanishing trace")
    return rho / tr


def spectral_gap(model: PseudoLindbladModel, generator: Generator | None = None) -> float:
    """Smallest nonzero |Re| among generator eigenvalues."""
    gen = generator if generator is not None else Generator(model)
    w = np.linalg.eigvals(gen.superoperator())
    re = np.sort(np.abs(w.real))
    return float(re[re > 1e-9][0])

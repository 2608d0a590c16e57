"""Quantum-jump unraveling of pseudo-Lindblad equations on the doubled Hilbert space.

A trajectory carries a pair of kets (psi1, psi2) representing the rank-one
operator |psi1><psi2|.  Between jumps

    d psi1 = [-iH   - 1/2 sum (gamma  L^+L - r)] psi1 dt
    d psi2 = [-iH^+ - 1/2 sum (gamma* L^+L - r)] psi2 dt

and a jump in channel a maps psi1 -> sqrt(gamma/r) L psi1 and
psi2 -> conj(sqrt(gamma/r)) L psi2.  The positive rates r are set by a
``RateStrategy``.  The martingale variant keeps tr(psi2^+ psi1) = 1 and moves
the weight into a scalar mu.

Many trajectories are advanced together as columns of one array, each with
its own adaptive step size and time.  Results depend only on the master seed
and the trajectory index, never on batching or worker count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import linalg

from .liouvillian import PseudoLindbladModel, Schedule, build_channels
from .rk import A as RK_A, E as RK_E, MAX_FACTOR, MIN_FACTOR, ORDER, SAFETY
from .rk import IntegrationError, dense_weights

TRACE_FLOOR = 1e-12
NORMALITY_TOL = 1e-10


# --------------------------------------------------------------------------
# compiled system


class TrajectorySystem:
    """Dense operators needed to propagate double kets.

    ``channels`` is a sequence of (gamma, L) on the full space; ``drives`` are
    (operator, Schedule) pairs added to ``H`` with the schedule's value.
    """

    def __init__(self, H: np.ndarray, channels: Sequence[tuple[complex, np.ndarray]],
                 drives: Sequence[tuple[np.ndarray, Schedule]] = (), labels: Sequence[str] | None = None,
                 sys_dim: int | None = None):
        self.H = np.asarray(H, dtype=complex)
        self.dim = self.H.shape[0]
        self.drives = [(np.asarray(op, dtype=complex), s) for op, s in drives]
        self.gamma = np.array([complex(g) for g, _ in channels], dtype=complex)
        self.L = [np.asarray(L, dtype=complex) for _, L in channels]
        self.labels = list(labels) if labels is not None else [f"c{i}" for i in range(len(self.L))]
        self.sys_dim = sys_dim if sys_dim is not None else self.dim
        M = [L.conj().T @ L for L in self.L]
        self._diag_idx = [i for i, m in enumerate(M) if np.count_nonzero(m - np.diag(np.diag(m))) == 0]
        self._dense_idx = [i for i in range(len(M)) if i not in self._diag_idx]
        self._M_diag = np.array([np.diag(M[i]) for i in self._diag_idx]).reshape(len(self._diag_idx), self.dim)
        self._M_dense = (np.concatenate([M[i] for i in self._dense_idx]) if self._dense_idx
                         else np.zeros((0, self.dim), complex))
        self._S = sum((g * m for g, m in zip(self.gamma, M)), np.zeros((self.dim, self.dim), complex))
        self._Sc = sum((np.conj(g) * m for g, m in zip(self.gamma, M)), np.zeros((self.dim, self.dim), complex))
        self._seg_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    @classmethod
    def from_model(cls, model: PseudoLindbladModel) -> "TrajectorySystem":
        if model.has_terminator:
            raise ValueError("models with a terminator have no canonical channel form; "
                             "use deterministic integration")
        cs = build_channels(model)
        chans = [(ch.rate, ch.op.dense()) for ch in cs.channels]
        drives = [(op.dense(), s) for op, s in cs.H_drives]
        return cls(cs.H_static.dense(), chans, drives, [ch.label for ch in cs.channels],
                   sys_dim=model.h_sys.dim)

    @property
    def n_channels(self) -> int:
        return len(self.L)

    def drive_values(self, t: float) -> tuple:
        return tuple(s.value(t) for _, s in self.drives)

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        pts = set()
        for _, s in self.drives:
            pts.update(p for p in s.breakpoints(t0, t1) if t0 < p < t1)
        return sorted(pts)

    def segment(self, drives: tuple) -> tuple[np.ndarray, np.ndarray]:
        """No-jump generators (G1, G2) for psi1 and psi2 at fixed drive values."""
        g = self._seg_cache.get(drives)
        if g is None:
            H = self.H.copy()
            for (op, _), v in zip(self.drives, drives):
                H = H + v * op
            G1 = -1j * H - 0.5 * self._S
            G2 = -1j * H.conj().T - 0.5 * self._Sc
            g = (G1, G2)
            self._seg_cache[drives] = g
        return g

    def expectations(self, Y1: np.ndarray, Y2: np.ndarray) -> "Expect":
        return Expect(self, Y1, Y2)

    def embed_observable(self, op: np.ndarray) -> np.ndarray:
        op = np.asarray(op, dtype=complex)
        if op.shape == (self.dim, self.dim):
            return op
        if op.shape == (self.sys_dim, self.sys_dim):
            return np.kron(op, np.eye(self.dim // self.sys_dim))
        raise ValueError(f"observable of shape {op.shape} fits neither system nor full space")


class Expect:
    """Channel expectation values for a batch of double kets (columns)."""

    def __init__(self, system: TrajectorySystem, Y1: np.ndarray, Y2: np.ndarray):
        self.sys = system
        self.Y1, self.Y2 = Y1, Y2
        self.tr = np.einsum("dm,dm->m", Y2.conj(), Y1)
        self.e12 = self._pair(Y2, Y1)
        self._norms = None

    def _pair(self, Yl, Yr) -> np.ndarray:
        s = self.sys
        out = np.empty((s.n_channels, Yr.shape[1]), complex)
        if s._diag_idx:
            out[s._diag_idx] = s._M_diag @ (Yl.conj() * Yr)
        if s._dense_idx:
            MY = (s._M_dense @ Yr).reshape(len(s._dense_idx), s.dim, -1)
            out[s._dense_idx] = np.einsum("dm,adm->am", Yl.conj(), MY)
        return out

    def norm_terms(self):
        """(<M>_1, <M>_2, |psi1|^2, |psi2|^2) with <M>_i unnormalized."""
        if self._norms is None:
            n1 = np.einsum("dm,dm->m", self.Y1.conj(), self.Y1).real
            n2 = np.einsum("dm,dm->m", self.Y2.conj(), self.Y2).real
            self._norms = (self._pair(self.Y1, self.Y1).real, self._pair(self.Y2, self.Y2).real, n1, n2)
        return self._norms


# --------------------------------------------------------------------------
# rate strategies


class RateStrategy:
    name = "base"

    def rates(self, gamma: np.ndarray, ex: Expect) -> tuple[np.ndarray, np.ndarray]:
        """Rates of shape (channels, columns) and a per-column fallback flag."""
        raise NotImplementedError


class BKP(RateStrategy):
    name = "bkp"

    def rates(self, gamma, ex):
        m1, m2, n1, n2 = ex.norm_terms()
        r = np.abs(gamma)[:, None] * (m1 + m2) / (n1 + n2)
        return r, np.zeros(r.shape[1], bool)


class Optimal(RateStrategy):
    """|gamma <L^+L>_Psi / tr rho_Psi|, with BKP where the trace is below the floor
    relative to |psi1| |psi2|."""

    name = "optimal"

    def __init__(self, floor: float = TRACE_FLOOR):
        self.floor = floor

    def rates(self, gamma, ex):
        n1 = np.einsum("dm,dm->m", ex.Y1.conj(), ex.Y1).real
        n2 = np.einsum("dm,dm->m", ex.Y2.conj(), ex.Y2).real
        low = np.abs(ex.tr) <= self.floor * np.sqrt(n1 * n2)
        safe_tr = np.where(low, 1.0, ex.tr)
        r = np.abs(gamma[:, None] * ex.e12 / safe_tr)
        if np.any(low):
            r_bkp, _ = BKP().rates(gamma, ex)
            r[:, low] = r_bkp[:, low]
        return r, low


class NormProduct(RateStrategy):
    name = "norm_product"

    def rates(self, gamma, ex):
        m1, m2, n1, n2 = ex.norm_terms()
        r = np.abs(gamma)[:, None] * np.sqrt(np.maximum(m1 / n1, 0) * np.maximum(m2 / n2, 0))
        return r, np.zeros(r.shape[1], bool)


class UserSupplied(RateStrategy):
    """``callback(psi1, psi2, channel) -> rate`` evaluated per trajectory."""

    name = "user"

    def __init__(self, callback: Callable[[np.ndarray, np.ndarray, int], float]):
        self.callback = callback

    def rates(self, gamma, ex):
        n_ch, m = ex.e12.shape
        r = np.empty((n_ch, m))
        for j in range(m):
            for a in range(n_ch):
                v = float(self.callback(ex.Y1[:, j], ex.Y2[:, j], a))
                if not (v >= 0 and math.isfinite(v)):
                    raise ValueError(f"user rate must be finite and nonnegative, got {v}")
                r[a, j] = v
        return r, np.zeros(m, bool)


STRATEGIES = {"optimal": Optimal, "bkp": BKP, "norm_product": NormProduct}


def make_strategy(spec: str | RateStrategy) -> RateStrategy:
    if isinstance(spec, RateStrategy):
        return spec
    try:
        return STRATEGIES[spec]()
    except KeyError:
        raise ValueError(f"unknown rate strategy {spec!r}; choose from {sorted(STRATEGIES)}") from None


# --------------------------------------------------------------------------
# single double kets


@dataclass
class DoubleKet:
    psi1: np.ndarray
    psi2: np.ndarray
    mu: complex = 1.0

    def __post_init__(self):
        self.psi1 = np.asarray(self.psi1, dtype=complex)
        self.psi2 = np.asarray(self.psi2, dtype=complex)
        self.mu = complex(self.mu)

    @classmethod
    def from_ket(cls, ket) -> "DoubleKet":
        ket = np.asarray(ket, dtype=complex)
        return cls(ket.copy(), ket.copy())

    @property
    def trace(self) -> complex:
        return complex(np.vdot(self.psi2, self.psi1))

    def rho(self) -> np.ndarray:
        return self.mu * np.outer(self.psi1, self.psi2.conj())

    def expect(self, op: np.ndarray) -> complex:
        return complex(self.mu * np.vdot(self.psi2, op @ self.psi1))


def _pack(kets: np.ndarray) -> np.ndarray:
    D, m = kets.shape
    Z = np.zeros((2 * D + 2, m), complex)
    Z[:D] = kets
    Z[D:2 * D] = kets
    Z[2 * D + 1] = 1.0
    return Z


def _pack_double(psi: DoubleKet) -> np.ndarray:
    D = psi.psi1.size
    Z = np.zeros((2 * D + 2, 1), complex)
    Z[:D, 0] = psi.psi1
    Z[D:2 * D, 0] = psi.psi2
    Z[2 * D + 1, 0] = psi.mu
    return Z


def _unpack_double(Z: np.ndarray, D: int) -> DoubleKet:
    return DoubleKet(Z[:D, 0].copy(), Z[D:2 * D, 0].copy(), Z[2 * D + 1, 0])


def _drift(system: TrajectorySystem, Z: np.ndarray, G1, G2, strategy: RateStrategy, martingale: bool):
    """Right-hand side of the no-jump flow for packed columns.

    Rows: psi1, psi2, integrated total rate, martingale scalar mu."""
    D = system.dim
    Y1, Y2 = Z[:D], Z[D:2 * D]
    ex = system.expectations(Y1, Y2)
    r, low = strategy.rates(system.gamma, ex)
    R = r.sum(axis=0)
    dZ = np.empty_like(Z)
    if martingale:
        f = (system.gamma[:, None] * ex.e12).sum(axis=0) / np.where(ex.tr == 0, 1.0, ex.tr)
        dZ[:D] = G1 @ Y1 + 0.5 * f * Y1
        dZ[D:2 * D] = G2 @ Y2 + 0.5 * np.conj(f) * Y2
        dZ[2 * D + 1] = Z[2 * D + 1] * (R - f)
    else:
        dZ[:D] = G1 @ Y1 + 0.5 * R * Y1
        dZ[D:2 * D] = G2 @ Y2 + 0.5 * R * Y2
        dZ[2 * D + 1] = 0.0
    dZ[2 * D] = R
    return dZ, r, ex, low


def _jump_columns(system: TrajectorySystem, Z: np.ndarray, cols, channels, r: np.ndarray, ex: Expect,
                  martingale: bool):
    """Apply channel ``channels[k]`` to column ``cols[k]`` in place; r and ex are
    evaluated on Z[:, cols]."""
    D = system.dim
    for k, (j, a) in enumerate(zip(cols, channels)):
        g, ra = system.gamma[a], r[a, k]
        if ra <= 0:
            raise ValueError(f"jump in channel {a} with zero rate")
        La = system.L[a]
        if martingale:
            tr, e = ex.tr[k], ex.e12[a, k]
            if e == 0:
                raise ValueError("martingale jump into a channel with <L^+L>_Psi = 0")
            s = np.sqrt(tr / e)
            Z[2 * D + 1, j] *= g * e / (tr * ra)
        else:
            s = np.sqrt(g / ra)
        Z[:D, j] = s * (La @ Z[:D, j])
        Z[D:2 * D, j] = np.conj(s) * (La @ Z[D:2 * D, j])


def jump_rate(system: TrajectorySystem, strategy: RateStrategy | str, psi: DoubleKet, channel: int) -> float:
    strategy = make_strategy(strategy)
    ex = system.expectations(psi.psi1[:, None], psi.psi2[:, None])
    r, _ = strategy.rates(system.gamma, ex)
    return float(r[channel, 0])


def apply_jump(system: TrajectorySystem, psi: DoubleKet, channel: int, strategy: RateStrategy | str,
               martingale: bool = False) -> DoubleKet:
    strategy = make_strategy(strategy)
    Z = _pack_double(psi)
    D = system.dim
    ex = system.expectations(Z[:D], Z[D:2 * D])
    r, _ = strategy.rates(system.gamma, ex)
    _jump_columns(system, Z, [0], [channel], r, ex, martingale)
    return _unpack_double(Z, D)


def drift_step(system: TrajectorySystem, psi: DoubleKet, strategy: RateStrategy | str, dt: float,
               t: float = 0.0, martingale: bool = False, rtol: float = 1e-10, atol: float = 1e-12) -> DoubleKet:
    """Advance the no-jump flow by dt (no events)."""
    strategy = make_strategy(strategy)
    Z = _pack_double(psi)
    Z[2 * psi.psi1.size] = 0
    opts = EngineOptions(rtol=rtol, atol=atol)
    _advance(system, Z, np.array([t]), t + dt, strategy, martingale, opts, None, None)
    return _unpack_double(Z, system.dim)


# --------------------------------------------------------------------------
# engine


@dataclass
class EngineOptions:
    rtol: float = 1e-6
    atol: float = 1e-9
    h0: float = 1e-2
    max_jumps: int = 1_000_000
    min_step: float = 1e-13
    max_steps: int = 50_000_000
    event_iters: int = 60


@dataclass
class JumpRecord:
    times: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    terminal: bool = False

    def __len__(self) -> int:
        return len(self.times)


class _EventState:
    """Per-column bookkeeping for the Gillespie sampler."""

    def __init__(self, rngs, records, max_jumps):
        self.rngs = rngs
        self.records = records
        self.target = np.array([self.draw(rng) for rng in rngs])
        self.max_jumps = max_jumps

    @staticmethod
    def draw(rng) -> float:
        return -math.log(1.0 - rng.random())


def _advance(system, Z, t, t_end, strategy, martingale, opts: EngineOptions, events: _EventState | None,
             h_state: np.ndarray | None, fallback: np.ndarray | None = None):
    """Advance every column of Z from its time t[j] to t_end (no drive changes inside).

    Columns whose integrated rate reaches their target jump at the located event time."""
    D = system.dim
    iL = 2 * D
    m = Z.shape[1]
    h = h_state if h_state is not None else np.full(m, opts.h0)
    G1, G2 = system.segment(system.drive_values(0.5 * (float(np.min(t)) + t_end)))
    fsal = np.zeros_like(Z)
    fsal_ok = np.zeros(m, bool)
    span_tol = 1e-13 * max(1.0, abs(t_end))
    steps = 0
    while True:
        act = np.flatnonzero(t < t_end - span_tol)
        if act.size == 0:
            break
        steps += 1
        if steps > opts.max_steps:
            raise IntegrationError("maximum number of steps exceeded")
        Za = Z[:, act]
        remaining = t_end - t[act]
        ha = np.minimum(h[act], remaining)
        landing = h[act] >= remaining - span_tol
        ha = np.where(landing, remaining, ha)
        if np.any(ha < opts.min_step):
            j = act[np.argmin(ha)]
            raise IntegrationError(f"step size underflow at t={t[j]:.6g}; max |psi| reached "
                                   f"{np.max(np.abs(Z[:iL, j])):.3e}")
        K = np.empty((7,) + Za.shape, complex)
        need = ~fsal_ok[act]
        K[0] = fsal[:, act]
        if np.any(need):
            K0, _, _, low = _drift(system, Za[:, need], G1, G2, strategy, martingale)
            K[0][:, need] = K0
            if fallback is not None:
                fallback[act[need]] += low
        for i in range(1, 7):
            acc = Za.copy()
            for jx, a in enumerate(RK_A[i]):
                if a:
                    acc += (a * ha) * K[jx]
            if i == 6:
                Z_new = acc
            K[i], _, _, low = _drift(system, acc, G1, G2, strategy, martingale)
        err = ha * np.tensordot(RK_E, K, axes=(0, 0))
        scale_abs = opts.atol * np.max(np.abs(Za[:iL]), axis=0, initial=0.0)
        sc = scale_abs + opts.rtol * np.maximum(np.abs(Za), np.abs(Z_new))
        sc = np.where(sc == 0, 1.0, sc)
        en = np.sqrt(np.mean((np.abs(err) / sc) ** 2, axis=0))
        finite = np.isfinite(en) & np.all(np.isfinite(Z_new), axis=0)
        if not np.all(finite):
            bad = act[~finite]
            if np.any(ha[~finite] < 10 * opts.min_step):
                j = bad[0]
                raise IntegrationError(f"non-finite state at t={t[j]:.6g}; max |psi| reached "
                                       f"{np.max(np.abs(Z[:iL, j])):.3e}")
            en = np.where(finite, en, np.inf)
        ok = en <= 1.0
        with np.errstate(divide="ignore"):
            grow = np.where(en == 0, MAX_FACTOR, np.minimum(MAX_FACTOR, SAFETY * en ** (-1 / ORDER)))
            shrink = np.where(np.isfinite(en), np.maximum(MIN_FACTOR, SAFETY * en ** (-1 / ORDER)), MIN_FACTOR)
        # rejected columns
        rej = act[~ok]
        h[rej] = ha[~ok] * shrink[~ok]
        fsal_ok[rej] = fsal_ok[rej]  # unchanged
        if not np.any(ok):
            continue
        acc_idx = np.flatnonzero(ok)
        cols = act[acc_idx]
        h[cols] = np.where(landing[acc_idx], np.maximum(h[cols], ha[acc_idx] * grow[acc_idx]),
                           ha[acc_idx] * grow[acc_idx])
        hit = np.zeros(acc_idx.size, bool)
        if events is not None:
            hit = Z_new[iL, acc_idx].real >= events.target[cols]
        plain = acc_idx[~hit]
        pc = act[plain]
        Z[:, pc] = Z_new[:, plain]
        t[pc] = np.where(landing[plain], t_end, t[pc] + ha[plain])
        fsal[:, pc] = K[6][:, plain]
        fsal_ok[pc] = True
        if np.any(hit):
            _handle_events(system, Z, t, Za, K, ha, act, acc_idx[hit], strategy, martingale, opts, events,
                           t_end, landing)
            fsal_ok[act[acc_idx[hit]]] = False


def _handle_events(system, Z, t, Za, K, ha, act, idx, strategy, martingale, opts, events, t_end, landing):
    D = system.dim
    iL = 2 * D
    cols = act[idx]
    y0 = Za[iL, idx].real
    kL = K[:, iL, idx].real  # (7, n)
    target = events.target[cols]
    lo = np.zeros(idx.size)
    hi = np.ones(idx.size)
    for _ in range(opts.event_iters):
        mid = 0.5 * (lo + hi)
        val = y0 + ha[idx] * np.einsum("in,in->n", dense_weights(mid), kL)
        above = val >= target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    theta = hi
    w = dense_weights(theta)  # (7, n)
    Ze = Za[:, idx] + ha[idx] * np.einsum("in,ijn->jn", w, K[:, :, idx])
    te = t[cols] + theta * ha[idx]
    te = np.where(landing[idx] & (theta >= 1.0), t_end, te)
    Ze_sub = np.ascontiguousarray(Ze)
    ex = system.expectations(Ze_sub[:D], Ze_sub[D:2 * D])
    r, _ = strategy.rates(system.gamma, ex)
    jump_cols, chans = [], []
    for k, j in enumerate(cols):
        rng = events.rngs[j]
        R = r[:, k].sum()
        u = rng.random()
        if R > 0:
            a = int(np.searchsorted(np.cumsum(r[:, k]) / R, u, side="right"))
            a = min(a, r.shape[0] - 1)
            while r[a, k] == 0:  # guard against round-off at the top of the cumsum
                a -= 1
            jump_cols.append(k)
            chans.append(a)
            rec = events.records[j]
            rec.times.append(float(te[k]))
            rec.channels.append(a)
            if len(rec.times) > events.max_jumps:
                raise IntegrationError(f"jump count exceeded {events.max_jumps}")
        events.target[j] = events.draw(rng)
    if jump_cols:
        sub_r = r[:, jump_cols]
        sub_ex = system.expectations(Ze_sub[:D, jump_cols], Ze_sub[D:2 * D, jump_cols])
        _jump_columns(system, Ze_sub, jump_cols, chans, sub_r, sub_ex, martingale)
    Ze_sub[iL] = 0.0
    Z[:, cols] = Ze_sub
    t[cols] = te


def _grid_segments(system: TrajectorySystem, t_grid: np.ndarray):
    """Sub-intervals between consecutive grid times split at drive breakpoints."""
    segs = []
    for k in range(1, len(t_grid)):
        a, b = float(t_grid[k - 1]), float(t_grid[k])
        pts = [a] + system.breakpoints(a, b) + [b]
        segs.append(list(zip(pts[:-1], pts[1:])))
    return segs


def _observe(system: TrajectorySystem, Z: np.ndarray, obs: list[np.ndarray], weights: np.ndarray,
             martingale: bool) -> np.ndarray:
    D = system.dim
    Y1, Y2 = Z[:D], Z[D:2 * D]
    scale = weights * (Z[2 * D + 1] if martingale else 1.0)
    out = np.empty((len(obs) + 1, Z.shape[1]), complex)
    out[0] = np.einsum("dm,dm->m", Y2.conj(), Y1)
    for i, O in enumerate(obs):
        out[i + 1] = np.einsum("dm,dm->m", Y2.conj(), O @ Y1)
    return out * scale


@dataclass
class ChunkResult:
    values: np.ndarray          # (n_obs + 1, n_times, m): row 0 is the trace estimator
    records: list[JumpRecord]
    fallback: np.ndarray        # per trajectory count of trace-floor fallbacks

    @property
    def jump_counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.records])

    @property
    def first_jump_times(self) -> np.ndarray:
        return np.array([r.times[0] if r.times else np.nan for r in self.records])


def simulate_batch(system: TrajectorySystem, kets: np.ndarray, weights: np.ndarray, rngs: list,
                   t_grid, strategy: RateStrategy | str = "optimal", method: str = "gillespie",
                   observables: Sequence[np.ndarray] = (), dt: float | None = None,
                   options: EngineOptions | None = None, initial: np.ndarray | None = None) -> ChunkResult:
    """Run one trajectory per column of ``kets`` (or of the packed ``initial``)."""
    strategy = make_strategy(strategy)
    opts = options or EngineOptions()
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    Z = _pack(np.asarray(kets, dtype=complex)) if initial is None else np.array(initial, dtype=complex)
    m = Z.shape[1]
    if len(rngs) != m:
        raise ValueError("one random stream per trajectory is required")
    weights = np.asarray(weights, dtype=complex)
    obs = [system.embed_observable(O) for O in observables]
    martingale = method == "martingale"
    records = [JumpRecord() for _ in range(m)]
    fallback = np.zeros(m, int)
    values = np.empty((len(obs) + 1, t_grid.size, m), complex)
    values[:, 0] = _observe(system, Z, obs, weights, martingale)
    if method in ("gillespie", "martingale"):
        t = np.full(m, t_grid[0])
        h = np.full(m, opts.h0)
        events = _EventState(rngs, records, opts.max_jumps)
        for k, segs in enumerate(_grid_segments(system, t_grid), start=1):
            for a, b in segs:
                _advance(system, Z, t, b, strategy, martingale, opts, events, h, fallback)
                t[:] = b
            values[:, k] = _observe(system, Z, obs, weights, martingale)
    elif method == "euler":
        if dt is None or dt <= 0:
            raise ValueError("euler sampling needs a positive dt")
        _run_euler_batch(system, Z, t_grid, dt, strategy, rngs, records, fallback, values, obs, weights, opts)
    else:
        raise ValueError(f"unknown method {method!r}")
    for rec in records:
        rec.terminal = True
    return ChunkResult(values, records, fallback)


def _run_euler_batch(system, Z, t_grid, dt, strategy, rngs, records, fallback, values, obs, weights, opts):
    D = system.dim
    warned = False
    t = float(t_grid[0])
    for k in range(1, t_grid.size):
        span = t_grid[k] - t_grid[k - 1]
        n = int(round(span / dt))
        if n < 1 or abs(n * dt - span) > 1e-9 * max(1.0, span):
            raise ValueError("grid spacing must be an integer multiple of dt")
        U = np.stack([rng.random(n) for rng in rngs], axis=1)  # (n, m)
        for s in range(n):
            G1, G2 = system.segment(system.drive_values(t))
            dZ, r, ex, low = _drift(system, Z, G1, G2, strategy, False)
            fallback += low
            p = r * dt
            P = p.sum(axis=0)
            pmax = float(np.max(P, initial=0.0))
            if pmax > 0.5:
                raise ValueError(f"dt too large: jump probability {pmax:.3f} > 0.5 in one step")
            if pmax > 0.05 and not warned:
                warnings.warn(f"dt * total rate reached {pmax:.3f}; Euler sampling may be biased",
                              RuntimeWarning, stacklevel=3)
                warned = True
            u = U[s]
            jump = u < P
            if np.any(jump):
                jc = np.flatnonzero(jump)
                cum = np.cumsum(p[:, jc], axis=0)
                chans = [int(np.argmax(u[j] < cum[:, i])) for i, j in enumerate(jc)]
                for j, a in zip(jc, chans):
                    records[j].times.append(t + 0.5 * dt)
                    records[j].channels.append(a)
                sub_ex = system.expectations(Z[:D, jc], Z[D:2 * D, jc])
                drift_cols = np.flatnonzero(~jump)
                Z[:, drift_cols] += dt * dZ[:, drift_cols]
                _jump_columns(system, Z, jc, chans, r[:, jc], sub_ex, False)
            else:
                Z += dt * dZ
            t = t_grid[k - 1] + (s + 1) * dt
        t = float(t_grid[k])
        values[:, k] = _observe(system, Z, obs, weights, False)


# --------------------------------------------------------------------------
# single-trajectory entry points


@dataclass
class TrajectoryResult:
    times: np.ndarray
    values: np.ndarray   # (n_obs + 1, n_times); row 0 is weight * mu * tr rho_Psi
    record: JumpRecord


def _single(system, psi0: DoubleKet, weight, t_grid, strategy, rng, method, observables, dt, options):
    init = _pack_double(psi0)
    res = simulate_batch(system, None, np.array([weight]), [rng], t_grid, strategy, method, observables, dt,
                         options, initial=init)
    return TrajectoryResult(np.asarray(t_grid, float), res.values[:, :, 0], res.records[0])


def run_gillespie(system, psi0: DoubleKet, weight, t_grid, strategy, rng, observables=(), options=None):
    return _single(system, psi0, weight, t_grid, strategy, rng, "gillespie", observables, None, options)


def run_martingale(system, psi0: DoubleKet, weight, t_grid, strategy, rng, observables=(), options=None):
    return _single(system, psi0, weight, t_grid, strategy, rng, "martingale", observables, None, options)


def run_euler(system, psi0: DoubleKet, weight, t_grid, strategy, dt, rng, observables=(), options=None):
    return _single(system, psi0, weight, t_grid, strategy, rng, "euler", observables, dt, options)


# --------------------------------------------------------------------------
# initial states and ensembles


@dataclass
class WeightedInitialState:
    weights: np.ndarray      # c_i, complex in general
    kets: np.ndarray         # (D, K), orthonormal columns
    counts: np.ndarray       # trajectories per ket
    order: np.ndarray        # ket index of each trajectory

    @property
    def n_traj(self) -> int:
        return int(self.counts.sum())

    def trajectory_weights(self) -> np.ndarray:
        """Estimator weight c_i / (n_i / n) for every trajectory."""
        per_ket = self.weights * self.n_traj / np.where(self.counts == 0, 1, self.counts)
        return per_ket[self.order]


def decompose_initial(rho0: np.ndarray, n_traj: int, drop_tol: float = 1e-15) -> WeightedInitialState:
    rho0 = np.asarray(rho0, dtype=complex)
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    comm = rho0 @ rho0.conj().T - rho0.conj().T @ rho0
    if np.linalg.norm(comm) >= NORMALITY_TOL:
        raise ValueError("initial state is not normal; no orthonormal ket decomposition exists")
    if abs(np.trace(rho0) - 1) > 1e-10:
        raise ValueError("initial state must have unit trace")
    T, V = linalg.schur(rho0, output="complex")
    c = np.diag(T).copy()
    keep = np.abs(c) > drop_tol * np.max(np.abs(c))
    c, V = c[keep], V[:, keep]
    p = np.abs(c) / np.abs(c).sum()
    raw = p * n_traj
    counts = np.floor(raw).astype(int)
    rest = n_traj - counts.sum()
    if rest:
        frac_order = np.argsort(-(raw - counts), kind="stable")
        counts[frac_order[:rest]] += 1
    if n_traj >= counts.size:
        # a ket without trajectories would drop its weight from every estimate
        for i in np.flatnonzero(counts == 0):
            counts[np.argmax(counts)] -= 1
            counts[i] = 1
    # interleave kets evenly so every contiguous block sees the same mixture
    pos, idx = [], []
    for i, n_i in enumerate(counts):
        pos.extend((np.arange(n_i) + 0.5) / n_i)
        idx.extend([i] * n_i)
    order = np.array(idx, int)[np.argsort(np.array(pos), kind="stable")] if idx else np.zeros(0, int)
    return WeightedInitialState(c, V, counts, order)


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for trajectory ``index`` of a run with master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


@dataclass
class EnsembleEstimate:
    times: np.ndarray
    names: list[str]            # observable names; "trace" comes first
    mean: np.ndarray            # (n_obs + 1, n_times) complex
    stderr_re: np.ndarray
    stderr_im: np.ndarray
    n_traj: int
    seed: int
    block_size: int
    block_means: np.ndarray     # (n_blocks, n_obs + 1, n_times)
    jump_counts: np.ndarray
    first_jump_times: np.ndarray
    fallback_counts: np.ndarray
    samples: np.ndarray | None = None

    @property
    def stderr(self) -> np.ndarray:
        return np.hypot(self.stderr_re, self.stderr_im)

    def series(self, name: str):
        i = self.names.index(name)
        return self.mean[i], self.stderr_re[i], self.stderr_im[i]

    def bunch_means(self, name: str, bunch: int) -> np.ndarray:
        """Means over consecutive bunches of ``bunch`` trajectories (multiple of block_size)."""
        if bunch % self.block_size:
            raise ValueError("bunch size must be a multiple of the block size")
        k = bunch // self.block_size
        n = self.block_means.shape[0] // k
        if n == 0:
            raise ValueError("not enough trajectories for one bunch")
        i = self.names.index(name)
        b = self.block_means[: n * k, i].reshape(n, k, -1)
        return b.mean(axis=1)


def convergence_fraction(estimate: EnsembleEstimate, name: str, reference: np.ndarray, delta: float,
                         bunch: int, window: tuple[float, float] | None = None) -> float:
    """Average over bunches of ``bunch`` trajectories of the fraction of grid
    points where the bunch's real estimate lies within delta of ``reference``."""
    means = estimate.bunch_means(name, bunch).real
    t = estimate.times
    mask = np.ones(t.shape, bool) if window is None else (t >= window[0]) & (t <= window[1])
    inside = np.abs(means[:, mask] - np.real(np.asarray(reference))[mask]) < delta
    return float(inside.mean(axis=1).mean())


@dataclass
class _Moments:
    n: int
    mean: np.ndarray
    m2_re: np.ndarray
    m2_im: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray) -> "_Moments":
        mu = x.mean(axis=-1)
        d = x - mu[..., None]
        return cls(x.shape[-1], mu, (d.real**2).sum(-1), (d.imag**2).sum(-1))

    def merge(self, o: "_Moments") -> "_Moments":
        n = self.n + o.n
        delta = o.mean - self.mean
        mean = self.mean + delta * (o.n / n)
        f = self.n * o.n / n
        return _Moments(n, mean, self.m2_re + o.m2_re + delta.real**2 * f,
                        self.m2_im + o.m2_im + delta.imag**2 * f)


def _chunk_task(args):
    (system, kets, weights, idx, seed, t_grid, strategy, method, observables, dt, options) = args
    rngs = [trajectory_rng(seed, int(i)) for i in idx]
    return simulate_batch(system, kets, weights, rngs, t_grid, strategy, method, observables, dt, options)


def run_ensemble(system: TrajectorySystem | PseudoLindbladModel, rho0: np.ndarray, t_grid, n_traj: int,
                 seed: int, strategy: RateStrategy | str = "optimal", method: str = "gillespie",
                 observables: Mapping[str, np.ndarray] | None = None, dt: float | None = None,
                 workers: int = 1, chunk_size: int = 200, block_size: int = 100,
                 options: EngineOptions | None = None, keep_samples: bool = False,
                 progress: Callable[[int, int], None] | None = None) -> EnsembleEstimate:
    """Sample ``n_traj`` trajectories from rho0 and average the requested observables.

    ``rho0`` lives on the full space or on the system (then tensored with the
    pseudomode stationary states when ``system`` is a model)."""
    if isinstance(system, PseudoLindbladModel):
        model = system
        system = TrajectorySystem.from_model(model)
        rho0 = np.asarray(rho0, complex)
        if rho0.shape[0] == model.h_sys.dim and rho0.shape[0] != system.dim:
            rho0 = model.initial_state(rho0)
    if n_traj < 2:
        raise ValueError("an ensemble needs at least two trajectories")
    if chunk_size % block_size:
        raise ValueError("chunk_size must be a multiple of block_size")
    strategy = make_strategy(strategy)
    observables = dict(observables or {})
    names = ["trace"] + list(observables)
    obs = [system.embed_observable(O) for O in observables.values()]
    init = decompose_initial(rho0, n_traj)
    w_all = init.trajectory_weights()
    t_grid = np.asarray(t_grid, float)
    tasks = []
    for start in range(0, n_traj, chunk_size):
        idx = np.arange(start, min(start + chunk_size, n_traj))
        kets = init.kets[:, init.order[idx]]
        tasks.append((system, kets, w_all[idx], idx, seed, t_grid, strategy, method, obs, dt, options))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = []
            for i, res in enumerate(pool.map(_chunk_task, tasks)):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    else:
        results = []
        for i, task in enumerate(tasks):
            results.append(_chunk_task(task))
            if progress:
                progress(i + 1, len(tasks))
    return ensemble_average(results, t_grid, names, seed, block_size, keep_samples)


def ensemble_average(results: Sequence[ChunkResult], t_grid, names: list[str], seed: int = 0,
                     block_size: int = 100, keep_samples: bool = False) -> EnsembleEstimate:
    if not results:
        raise ValueError("no trajectory results")
    shape = results[0].values.shape[:2]
    if any(r.values.shape[:2] != shape for r in results):
        raise ValueError("inconsistent time grids across runs")
    mom = None
    blocks = []
    for r in results:
        cm = _Moments.of(r.values)
        mom = cm if mom is None else mom.merge(cm)
        v = r.values
        for s in range(0, v.shape[2] - block_size + 1, block_size):
            blocks.append(v[:, :, s:s + block_size].mean(axis=2))
    n = mom.n
    if n < 2:
        raise ValueError("an ensemble needs at least two trajectories")
    var_re = mom.m2_re / (n - 1)
    var_im = mom.m2_im / (n - 1)
    block_means = np.array(blocks) if blocks else np.zeros((0,) + shape, complex)
    return EnsembleEstimate(
        times=np.asarray(t_grid, float), names=list(names), mean=mom.mean,
        stderr_re=np.sqrt(var_re / n), stderr_im=np.sqrt(var_im / n), n_traj=n, seed=seed,
        block_size=block_size, block_means=block_means,
        jump_counts=np.concatenate([r.jump_counts for r in results]),
        first_jump_times=np.concatenate([r.first_jump_times for r in results]),
        fallback_counts=np.concatenate([r.fallback for r in results]),
        samples=np.concatenate([r.values for r in results], axis=2) if keep_samples else None,
    )


def one_step_samples(system: TrajectorySystem, psi: DoubleKet, strategy: RateStrategy | str, dt: float,
                     n: int, rng: np.random.Generator, martingale: bool = False) -> list[DoubleKet] | tuple:
    """Sample one step of length dt from psi: jump in channel a with probability
    r_a dt, drift otherwise.  Returns (drifted ket, jumped kets per channel,
    channel counts, number of drift outcomes) which is enough to form any
    one-step statistic without materializing every sample."""
    strategy = make_strategy(strategy)
    ex = system.expectations(psi.psi1[:, None], psi.psi2[:, None])
    r, _ = strategy.rates(system.gamma, ex)
    p = r[:, 0] * dt
    if p.sum() > 0.5:
        raise ValueError("dt too large for one-step sampling")
    probs = np.append(p, 1 - p.sum())
    counts = rng.multinomial(n, probs)
    drifted = drift_step(system, psi, strategy, dt, martingale=martingale)
    jumped = [apply_jump(system, psi, a, strategy, martingale) if r[a, 0] > 0 else None
              for a in range(system.n_channels)]
    return drifted, jumped, counts[:-1], counts[-1]

"""Embedded Dormand-Prince 5(4) Runge-Kutta machinery for complex arrays.

``integrate_if`` solves y' = D y + N(t, y) where D is applied exactly
through a caller-supplied exponential (integrating-factor, or Lawson, form)
and N is handled by the explicit tableau.  With D = 0 it is the ordinary
DP5(4) method.  Steps land exactly on requested output times and segment
ends, so discontinuities in N are never stepped across.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
B_HAT = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B - B_HAT
# continuous extension: y(t + theta h) = y + h sum_i K_i sum_j P[i, j] theta^(j+1)
P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])
ORDER = 5
SAFETY = 0.9
MIN_FACTOR, MAX_FACTOR = 0.2, 10.0


class IntegrationError(RuntimeError):
    pass


def dense_weights(theta) -> np.ndarray:
    """Stage weights b_i(theta) of the continuous extension, shape (7,) + theta.shape."""
    theta = np.asarray(theta, dtype=float)
    powers = np.stack([theta ** (j + 1) for j in range(4)])
    return np.tensordot(P, powers, axes=(1, 0))


def error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray, rtol: float, atol: float, axis=None):
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    r = np.abs(err) / scale
    return np.sqrt(np.mean(r * r, axis=axis))


@dataclass
class Stats:
    steps: int = 0
    rejected: int = 0
    rhs_calls: int = 0

    def merge(self, other: "Stats"):
        self.steps += other.steps
        self.rejected += other.rejected
        self.rhs_calls += other.rhs_calls


def initial_step(f0: np.ndarray, y0: np.ndarray, rtol: float, atol: float, span: float) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((np.abs(y0) / scale) ** 2))
    d1 = np.sqrt(np.mean((np.abs(f0) / scale) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    return float(min(h, span))


def integrate_if(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    t0: float,
    t1: float,
    t_out: Sequence[float] = (),
    expo: Callable[[float, np.ndarray], np.ndarray] | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    h0: float | None = None,
    max_steps: int = 10_000_000,
    min_step: float = 1e-14,
    stats: Stats | None = None,
    emit: Callable[[float, np.ndarray], None] | None = None,
):
    """Integrate y' = D y + rhs(t, y) over [t0, t1].

    ``expo(tau, x)`` must return exp(tau D) x for tau >= 0; ``None`` means
    D = 0.  Returns (states at t_out, final state, last accepted step size).
    With ``emit`` given, output states are passed to ``emit(t, y)`` instead
    of being collected.
    """
    stats = stats if stats is not None else Stats()
    outs = [t for t in t_out if t0 <= t <= t1]
    results = []

    def store(t, y):
        if emit is not None:
            emit(t, y.copy())
        else:
            results.append(y.copy())

    y = np.array(y0, dtype=complex, copy=True)
    t = float(t0)
    stop_points = sorted(set([float(t1)] + [float(s) for s in outs if s > t0]))
    for s in outs:
        if s == t0:
            store(s, y)
    if t1 <= t0:
        return results, y, h0
    ex = expo if expo is not None else (lambda tau, x: x)
    k1 = rhs(t, y)
    stats.rhs_calls += 1
    h = h0 if h0 is not None else initial_step(k1 if expo is None else k1 + (ex(1e-8, y) - y) / 1e-8,
                                               y, rtol, atol, t1 - t0)
    target_idx = 0
    steps = 0
    while target_idx < len(stop_points):
        target = stop_points[target_idx]
        h_try = min(h, target - t)
        landing = h_try >= target - t - 1e-14 * max(1.0, abs(target))
        if landing:
            h_try = target - t
        while True:
            if h_try < min_step:
                raise IntegrationError(f"step size underflow at t={t:.6g} (h={h_try:.3e})")
            y_new, k7, err = _lawson_step(rhs, ex, t, y, k1, h_try, expo is not None)
            stats.rhs_calls += 6
            en = float(error_norm(err, y, y_new, rtol, atol))
            if not np.isfinite(en) or not np.all(np.isfinite(y_new)):
                if h_try < min_step * 10:
                    raise IntegrationError(f"non-finite state at t={t:.6g}")
                h_try *= MIN_FACTOR
                landing = False
                stats.rejected += 1
                continue
            if en <= 1.0:
                factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** (-1 / ORDER))
                break
            stats.rejected += 1
            h_try *= max(MIN_FACTOR, SAFETY * en ** (-1 / ORDER))
            landing = False
        stats.steps += 1
        steps += 1
        if steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded")
        t = target if landing else t + h_try
        y, k1 = y_new, k7
        # a step shortened only to land on an output time keeps the previous proposal
        h = max(h, h_try * factor) if landing else h_try * factor
        if landing:
            if target in outs:
                store(target, y)
            target_idx += 1
    return results, y, h


def _lawson_step(rhs, ex, t, y, k1, h, has_expo):
    ks = [k1]
    # propagated[j][delta] caches exp(delta h D) K_j
    for i in range(1, 7):
        ci = C[i]
        acc = ex(ci * h, y) if has_expo else y.copy()
        for j, a in enumerate(A[i]):
            if a == 0:
                continue
            kj = ks[j]
            if has_expo:
                kj = ex((ci - C[j]) * h, kj)
            acc = acc + (h * a) * kj
        if i == 6:
            y_new = acc
        ks.append(rhs(t + ci * h, acc))
    err = np.zeros_like(y)
    for j in range(7):
        if E[j] == 0:
            continue
        kj = ks[j]
        if has_expo and C[j] != 1:
            kj = ex((1 - C[j]) * h, kj)
        err = err + (h * E[j]) * kj
    return y_new, ks[6], err


class DiagExponential:
    """exp(tau D) for D x = g_l[:, None] x + x g_r[None, :] (matrix states)
    or D x = g_l x (vector states), with a small per-step cache."""

    def __init__(self, g_left: np.ndarray, g_right: np.ndarray | None = None):
        self.gl = np.asarray(g_left, dtype=complex)
        self.gr = None if g_right is None else np.asarray(g_right, dtype=complex)
        self._cache: dict[float, np.ndarray] = {}

    @property
    def trivial(self) -> bool:
        return not np.any(self.gl) and (self.gr is None or not np.any(self.gr))

    def factor(self, tau: float) -> np.ndarray:
        f = self._cache.get(tau)
        if f is None:
            if len(self._cache) > 64:
                self._cache.clear()
            u = np.exp(tau * self.gl)
            f = u if self.gr is None else np.multiply.outer(u, np.exp(tau * self.gr))
            self._cache[tau] = f
        return f

    def __call__(self, tau: float, x: np.ndarray) -> np.ndarray:
        if tau == 0:
            return x
        f = self.factor(tau)
        if self.gr is None and x.ndim > 1:
            return x * f.reshape((-1,) + (1,) * (x.ndim - 1))
        return x * f


# --------------------------------------------------------------------------
# exponential time differencing for y' = w * y + N(y) with diagonal w


def phi_functions(z: np.ndarray, kmax: int = 3) -> list[np.ndarray]:
    """[phi_0(z), ..., phi_kmax(z)] elementwise, phi_0 = exp and
    phi_{k+1}(z) = (phi_k(z) - 1/k!) / z, with a Taylor series near z = 0."""
    z = np.asarray(z, dtype=complex)
    out = [np.exp(z)]
    small = np.abs(z) < 0.5
    zs = np.where(small, 0, z)
    fact = 1.0
    for k in range(1, kmax + 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            direct = (out[-1] - 1.0 / fact) / zs
        fact *= k
        # phi_k(z) = sum_j z^j / (j + k)!
        series = np.zeros_like(z)
        term = np.full_like(z, 1.0 / math.factorial(k))
        for j in range(18):
            series = series + term
            term = term * z / (j + k + 1)
        out.append(np.where(small, series, direct))
    return out


class ETDCoefficients:
    """phi_k(h w) and phi_k(h w / 2) for the diagonal linear part w, cached by h."""

    def __init__(self, rates: np.ndarray):
        self.rates = np.asarray(rates, dtype=complex)
        self._cache: dict[float, tuple] = {}

    def __call__(self, h: float):
        c = self._cache.get(h)
        if c is None:
            if len(self._cache) > 32:
                self._cache.clear()
            c = self._cache[h] = (phi_functions(h * self.rates, 3), phi_functions(0.5 * h * self.rates, 2))
        return c


def etdrk4_step(N, y: np.ndarray, Ny: np.ndarray, h: float, coef: ETDCoefficients) -> np.ndarray:
    """One Krogstad ETDRK4 step; ``Ny`` = N(y) is passed in so callers can share it."""
    (e, p1, p2, p3), (e2, q1, q2) = coef(h)
    base = e2 * y + (0.5 * h) * q1 * Ny
    a = base
    Na = N(a)
    b = base + h * q2 * (Na - Ny)
    Nb = N(b)
    c = e * y + h * p1 * Ny + (2 * h) * p2 * (Nb - Ny)
    Nc = N(c)
    return e * y + h * ((p1 - 3 * p2 + 4 * p3) * Ny + (2 * p2 - 4 * p3) * (Na + Nb) + (4 * p3 - p2) * Nc)


def integrate_etd(
    N: Callable[[np.ndarray], np.ndarray],
    y0: np.ndarray,
    rates: np.ndarray,
    t0: float,
    t1: float,
    t_out: Sequence[float] = (),
    rtol: float = 1e-8,
    atol: float = 1e-10,
    h0: float | None = None,
    max_steps: int = 10_000_000,
    min_step: float = 1e-14,
    stats: Stats | None = None,
    emit: Callable[[float, np.ndarray], None] | None = None,
):
    """Integrate the autonomous system y' = rates * y + N(y) over [t0, t1].

    Krogstad's ETDRK4 is exact for the stiff diagonal part and for forcing
    that is polynomial in time.  The local error comes from step doubling
    (one step of h against two of h/2) and the two-half-step result is
    Richardson-extrapolated.  Same return convention as ``integrate_if``."""
    stats = stats if stats is not None else Stats()
    coef = ETDCoefficients(rates)
    outs = [t for t in t_out if t0 <= t <= t1]
    results = []

    def store(t, y):
        if emit is not None:
            emit(t, y.copy())
        else:
            results.append(y.copy())

    y = np.array(y0, dtype=complex, copy=True)
    t = float(t0)
    stop_points = sorted(set([float(t1)] + [float(s) for s in outs if s > t0]))
    for s in outs:
        if s == t0:
            store(s, y)
    if t1 <= t0:
        return results, y, h0
    Ny = N(y)
    stats.rhs_calls += 1
    if h0 is None:
        scale = atol + rtol * np.abs(y)
        d1 = np.sqrt(np.mean((np.abs(Ny) / scale) ** 2))
        h0 = 0.1 if d1 < 1e-5 else float((1.0 / d1) ** 0.2)
    h = min(h0, t1 - t0)
    target_idx = 0
    steps = 0
    while target_idx < len(stop_points):
        target = stop_points[target_idx]
        h_try = min(h, target - t)
        landing = h_try >= target - t - 1e-14 * max(1.0, abs(target))
        if landing:
            h_try = target - t
        while True:
            if h_try < min_step:
                raise IntegrationError(f"step size underflow at t={t:.6g} (h={h_try:.3e})")
            full = etdrk4_step(N, y, Ny, h_try, coef)
            half = etdrk4_step(N, y, Ny, 0.5 * h_try, coef)
            Nh = N(half)
            two = etdrk4_step(N, half, Nh, 0.5 * h_try, coef)
            stats.rhs_calls += 10
            err = (two - full) / 15.0
            en = float(error_norm(err, y, two, rtol, atol))
            if np.isfinite(en) and en <= 1.0:
                factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** (-1 / ORDER))
                break
            stats.rejected += 1
            h_try *= MIN_FACTOR if not np.isfinite(en) else max(MIN_FACTOR, SAFETY * en ** (-1 / ORDER))
            landing = False
        stats.steps += 1
        steps += 1
        if steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded")
        t = target if landing else t + h_try
        y = two + err
        Ny = N(y)
        stats.rhs_calls += 1
        h = max(h, h_try * factor) if landing else h_try * factor
        if landing:
            if target in outs:
                store(target, y)
            target_idx += 1
    return results, y, h

"""Independent reference values used by several test modules."""

import numpy as np
from scipy import integrate

from pseudomodes.baths import CFExpansion, evaluate_cf


def double_integral_closed(expansion: CFExpansion, t):
    """int_0^t ds int_0^s ds' C(s - s') for C = sum a e^{-nu u}, term by term."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape, complex)
    for term in expansion.terms:
        a, nu = term.amplitude, term.exponent
        out += a * (t / nu - (1 - np.exp(-nu * t)) / nu**2)
    return out


def double_integral_quad(expansion: CFExpansion, t: float) -> complex:
    # inner integral over the lag u = s - s': int_0^t (t - u) C(u) du
    re = integrate.quad(lambda u: (t - u) * evaluate_cf(expansion, u).real, 0, t, limit=500, epsabs=1e-13)[0]
    im = integrate.quad(lambda u: (t - u) * evaluate_cf(expansion, u).imag, 0, t, limit=500, epsabs=1e-13)[0]
    return re + 1j * im


def dephasing_coherence(expansion: CFExpansion, t):
    """Coherence factor for Q = sigma_z with eigenvalues +-1; Im C cancels."""
    return np.exp(-4 * double_integral_closed(expansion, t).real)


def toy_closed_form(gamma: complex, t: float) -> np.ndarray:
    """Qubit with one (sigma_minus, gamma) channel started in the upper state."""
    e = np.exp(-gamma * t)
    return np.diag([e, 1 - e])


def dense_generator(H, channels, terminators=()):
    """Row-major superoperator built from explicit full-space matrices."""
    H = np.asarray(H, complex)
    d = H.shape[0]
    eye = np.eye(d)

    def lr(A, B):  # A rho B
        return np.kron(A, B.T)

    S = -1j * (lr(H, eye) - lr(eye, H))
    for g, L in channels:
        LdL = L.conj().T @ L
        S += g * (lr(L, L.conj().T) - 0.5 * lr(LdL, eye) - 0.5 * lr(eye, LdL))
    for g_adv, g_ret, Q in terminators:
        Q2 = Q @ Q
        S += -g_adv * lr(Q2, eye) - g_ret * lr(eye, Q2) + (g_adv + g_ret) * lr(Q, Q)
    return S

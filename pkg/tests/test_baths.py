import math

import numpy as np
import pytest
from scipy import integrate

from pseudomodes.baths import (CFExpansion, CFTerm, DrudeLorentz, Underdamped, ZeroDensity, cf_quadrature,
                               drude_lorentz_expansion, evaluate_cf, regularization_perturbation,
                               underdamped_expansion)

UD = dict(lam=0.2, gamma=0.025, omega0=1.0)


def test_underdamped_terms():
    e = underdamped_expansion(**UD, beta=1.0, k_max=0)
    nu = e.exponents
    assert len(nu) == 2
    assert np.allclose(nu, [0.025 + 1j * math.sqrt(1 - 0.025**2), 0.025 - 1j * math.sqrt(1 - 0.025**2)])
    assert abs(nu[0].imag - 0.999687) < 1e-6
    assert abs((e.amplitudes[0] + e.amplitudes[1]).imag) < 1e-12


def test_underdamped_matsubara_real_negative():
    e = underdamped_expansion(**UD, beta=1.0, k_max=5)
    ak = e.amplitudes[2:]
    assert len(ak) == 5
    assert np.all(np.abs(ak.imag) < 1e-15) and np.all(ak.real < 0)


@pytest.mark.parametrize("t", [0.0, 1.0, 5.0])
def test_underdamped_expansion_matches_quadrature(t):
    e = underdamped_expansion(**UD, beta=1.0, k_max=50)
    q = cf_quadrature(Underdamped(**UD), 1.0, t)
    assert abs(evaluate_cf(e, t) - q) < 1e-6


def test_drude_lorentz_regularized():
    e = drude_lorentz_expansion(1e-4, 1e-2, 10.0, 3, 50.0)
    assert len(e.terms) == 5
    a0 = 1e-4 * 1e-2 * (1 / math.tan(10 * 1e-2 / 2) - 1j)
    assert e.amplitudes[0] == pytest.approx(a0, rel=1e-14)
    assert e.amplitudes[1] == pytest.approx(np.conj(a0), rel=1e-14)
    assert e.amplitudes.sum().imag == 0.0
    assert evaluate_cf(e, 0.0).imag == 0.0
    assert e.omega_reg == 50.0
    reg = regularization_perturbation(e, np.array([0.0, 1.0]))
    assert reg[0] == pytest.approx(np.conj(a0))
    assert abs(reg[1]) < 1e-20


def test_drude_lorentz_matches_quadrature_away_from_origin():
    # regularization perturbs only t << 1/omega_reg
    lam, gam, beta = 0.1, 1.0, 1.0
    e = drude_lorentz_expansion(lam, gam, beta, 200, 500.0)
    for t in (0.5, 2.0):
        assert abs(evaluate_cf(e, t) - cf_quadrature(DrudeLorentz(lam, gam), beta, t)) < 1e-4


def test_expansion_errors():
    with pytest.raises(ValueError):
        underdamped_expansion(0.2, 1.0, 1.0, 1.0, 0)
    with pytest.raises(ValueError):
        underdamped_expansion(**UD, beta=-1.0, k_max=0)
    with pytest.raises(ValueError):
        underdamped_expansion(**UD, beta=math.inf, k_max=0)
    with pytest.raises(ValueError):
        drude_lorentz_expansion(1e-4, 1e-2, math.inf, 3, 50.0)
    with pytest.raises(ValueError):
        drude_lorentz_expansion(1e-4, 2 * math.pi, 1.0, 1, 50.0)  # pole collision
    with pytest.raises(ValueError):
        drude_lorentz_expansion(1e-4, 1e-2, 10.0, 3, 1e-3)
    with pytest.raises(ValueError):
        CFExpansion((CFTerm(1j, 1.0),), 1.0)
    with pytest.raises(ValueError):
        CFTerm(1.0, -1.0)


def test_evaluate_cf():
    e = CFExpansion((CFTerm(1.0, 1.0),), 1.0)
    assert evaluate_cf(e, 0.0) == 1.0
    assert abs(evaluate_cf(e, 50.0)) < 1e-20
    assert evaluate_cf(e, np.array([0.0, 1.0])).shape == (2,)
    with pytest.raises(ValueError):
        evaluate_cf(e, -1.0)
    assert CFExpansion.from_json(e.to_json()) == e


def test_spectral_density_heaviside():
    for sd in (Underdamped(**UD), DrudeLorentz(1.0, 1.0)):
        assert np.all(sd.density(np.array([-2.0, -0.1, 0.0])) == 0)
        assert sd.density(1.0) > 0


def test_quadrature_zero_density():
    assert cf_quadrature(ZeroDensity(), 1.0, 3.0) == 0
    with pytest.raises(ValueError):
        cf_quadrature(Underdamped(**UD), 1.0, -1.0)


def test_quadrature_zero_temperature_accepted():
    c_inf = cf_quadrature(Underdamped(**UD), math.inf, 1.0)
    c_big = cf_quadrature(Underdamped(**UD), 1000.0, 1.0)
    assert abs(c_inf - c_big) < 1e-8


def test_quadrature_hermiticity():
    # conj(C(t)) equals the integral of the conjugated integrand, done here by brute force
    sd = Underdamped(**UD)
    beta = 1.0
    rng = np.random.default_rng(3)
    for t in rng.uniform(0.1, 10, 4):
        # weighted oscillatory quadrature up to w = 3000; the neglected tail is below 1e-10
        kw = dict(limit=4000, epsabs=1e-13, wvar=t)
        re = integrate.quad(lambda w: sd.density(w) / np.tanh(beta * w / 2) / np.pi, 1e-12, 3000,
                            weight="cos", **kw)[0]
        im = integrate.quad(lambda w: sd.density(w) / np.pi, 0, 3000, weight="sin", **kw)[0]
        assert abs(np.conj(cf_quadrature(sd, beta, t)) - (re + 1j * im)) < 1e-9


def test_truncation_monotone():
    beta = 1.0
    t = np.linspace(0, 10 * beta, 2001)
    dist = []
    for k in (0, 5, 10):
        a = evaluate_cf(underdamped_expansion(**UD, beta=beta, k_max=k), t)
        b = evaluate_cf(underdamped_expansion(**UD, beta=beta, k_max=k + 5), t)
        dist.append(np.max(np.abs(a - b)))
    assert dist[0] > dist[1] > dist[2]

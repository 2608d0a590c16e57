import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from pseudomodes.baths import underdamped_expansion
from pseudomodes.config import load_example
from pseudomodes.liouvillian import (SIGMA_MINUS, SIGMA_X, SIGMA_Z, Constant, Environment, Generator,
                                     HamiltonianSchedule, ModeEigenbasis, PseudoLindbladModel, PulseSchedule,
                                     build_channels, integrate, spectral_gap, steady_state)
from pseudomodes.mapping import PseudomodeParams, map_expansion, stationary_state
from pseudomodes.observables import reduced_state
from pseudomodes.rk import ETDCoefficients, etdrk4_step, integrate_etd, phi_functions
from pseudomodes.tensor import destroy, kron

from conftest import random_density, random_matrix
from oracles import dense_generator, dephasing_coherence, toy_closed_form


def qubit_model(pms, H0=None, Q=SIGMA_Z, terminator=None, channels=(), drives=()):
    H0 = 0.5 * SIGMA_X if H0 is None else H0
    envs = (Environment(Q, tuple(pms), terminator),) if pms or terminator else ()
    return PseudoLindbladModel(HamiltonianSchedule(H0, tuple(drives)), envs, tuple(channels))


def full_space_oracle(model, t=0.0):
    """Dense superoperator from explicit embedded matrices."""
    dims = model.layout.dims
    eye = [np.eye(d) for d in dims]

    def emb(ops):
        return kron([ops.get(i, eye[i]) for i in range(len(dims))])

    H = emb({0: model.h_sys.at(t)})
    chans = [(g, emb({0: L})) for g, L in model.system_channels]
    term = []
    for idx, (e, site, pm) in enumerate(model.mode_sites()):
        b = destroy(pm.cutoff)
        Q = model.environments[e].Q
        H = H + model.coupling_lambda(idx) * emb({0: Q, site: b + b.T}) + pm.Omega * emb({site: b.T @ b})
        chans += [(pm.Gamma * (pm.N + 1), emb({site: b})), (pm.Gamma * pm.N, emb({site: b.T}))]
    for env in model.environments:
        if env.terminator is not None:
            term.append((env.terminator[0], env.terminator[1], emb({0: env.Q})))
    return dense_generator(H, chans, term)


PM_A = PseudomodeParams(0.9 + 0.1j, 0.4 - 0.3j, 0.2 + 0.1j, 0.05 + 0.02j, 3)
PM_B = PseudomodeParams(0.0, 0.6 + 0.2j, 0.0, -0.03j, 2)


def test_build_channels_examples():
    m = qubit_model([PseudomodeParams(1.0, 0.5, 0.0, 0.1, 4)])
    cs = build_channels(m)
    assert len(cs.channels) == 1 and cs.channels[0].rate == 0.5
    m = qubit_model([PseudomodeParams(1.0, 0.5, 0.3, 0.1, 4)])
    rates = sorted(abs(c.rate) for c in build_channels(m).channels)
    assert rates == pytest.approx([0.15, 0.65])


@pytest.mark.parametrize("terminator", [None, (0.2 + 0.1j, 0.3 - 0.4j)])
def test_apply_matches_dense_oracle(rng, terminator):
    m = qubit_model([PM_A, PM_B], terminator=terminator, channels=[(0.1 + 0.2j, SIGMA_MINUS)])
    S = full_space_oracle(m)
    gen = Generator(m)
    assert np.allclose(gen.superoperator(), S, atol=1e-13)
    rho = random_matrix(rng, m.layout.total)
    assert np.allclose(gen.apply(rho).ravel(), S @ rho.ravel(), atol=1e-12)


@pytest.mark.parametrize("terminator", [None, (0.2 + 0.1j, 0.3 - 0.4j)])
def test_trace_preservation(rng, terminator):
    m = qubit_model([PM_A, PM_B], terminator=terminator)
    gen = Generator(m)
    for _ in range(100):
        rho = random_matrix(rng, m.layout.total)
        assert abs(np.trace(gen.apply(rho))) < 1e-12 * max(1, np.abs(rho).max())


def test_maximally_mixed_traceless():
    m = qubit_model([])
    assert abs(np.trace(Generator(m).apply(np.eye(2) / 2))) < 1e-15


def test_free_mode_stationarity():
    pms = [PseudomodeParams(1.1, 0.7, 0.2, 0.0, 10), PseudomodeParams(0.3, 1.2 + 0.3j, 0.0, 0.0, 10)]
    H = np.array([[0.3, 0.2 - 0.1j], [0.2 + 0.1j, -0.4]])
    m = qubit_model(pms, H0=H)
    rs = random_density(np.random.default_rng(1), 2)
    rho = m.initial_state(rs)
    expected = kron([-1j * (H @ rs - rs @ H)] + [stationary_state(pm) for pm in pms])
    assert np.max(np.abs(Generator(m).apply(rho) - expected)) < 1e-6  # (N/(N+1))^C truncation


def test_zero_generator_constant(rng):
    m = qubit_model([], H0=np.zeros((2, 2)))
    rho = random_density(rng, 2)
    sol = integrate(m, rho, [0, 1, 5])
    for s in sol.states:
        assert np.array_equal(s, rho)


def test_toy_complex_decay_closed_form():
    g = 1 + 0.5j
    m = qubit_model([], H0=np.zeros((2, 2)), channels=[(g, SIGMA_MINUS)])
    t = np.linspace(0, 5, 26)
    sol = integrate(m, np.diag([1.0, 0.0]), t)
    err = max(np.max(np.abs(s - toy_closed_form(g, tt))) for s, tt in zip(sol.states, t))
    assert err < 1e-8
    rho_ss = steady_state(m)
    assert np.allclose(rho_ss, np.diag([0, 1]), atol=1e-12)


def test_dephasing_oracle_short():
    e = underdamped_expansion(0.2, 0.025, 1.0, 1.0, 0)
    m = qubit_model(map_expansion(e, [9, 3]), H0=np.zeros((2, 2)))
    t = np.linspace(0, 8, 41)
    plus = np.full((2, 2), 0.5)
    sol = integrate(m, m.initial_state(plus), t)
    coh = np.array([reduced_state(s, m.layout)[0, 1] for s in sol.states])
    ref = 0.5 * dephasing_coherence(e, t)
    assert np.max(np.abs(coh - ref) / np.abs(ref)) < 1e-3


def test_not_symmetrized():
    m = qubit_model([PM_A])
    sol = integrate(m, m.initial_state(np.diag([1.0, 0.0])), [0, 2.0])
    rho = sol.states[-1]
    assert np.max(np.abs(rho - rho.conj().T)) > 1e-4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_linearity(seed):
    rng = np.random.default_rng(seed)
    m = qubit_model([PM_A, PM_B])
    D = m.layout.total
    r1, r2 = random_matrix(rng, D), random_matrix(rng, D)
    a, b = complex(*rng.normal(size=2)), complex(*rng.normal(size=2))
    t = [0, 0.7, 1.5]
    s1, s2 = integrate(m, r1, t, rtol=1e-11, atol=1e-13), integrate(m, r2, t, rtol=1e-11, atol=1e-13)
    s12 = integrate(m, a * r1 + b * r2, t, rtol=1e-11, atol=1e-13)
    for x, y, z in zip(s1.states, s2.states, s12.states):
        assert np.max(np.abs(a * x + b * y - z)) < 1e-8 * max(1, np.abs(z).max())


def test_matches_matrix_exponential(rng):
    m = qubit_model([PM_A, PM_B], terminator=(0.05, 0.02j))
    S = full_space_oracle(m)
    rho0 = m.initial_state(random_density(rng, 2))
    sol = integrate(m, rho0, [0, 1.0, 3.0])
    for t, s in zip(sol.times, sol.states):
        ref = (expm(S * t) @ rho0.ravel()).reshape(rho0.shape)
        assert np.max(np.abs(s - ref)) < 1e-7
    tr0 = np.trace(rho0)
    assert all(abs(np.trace(s) - tr0) < 1e-7 for s in sol.states)


def test_pulse_schedule():
    p = PulseSchedule.pi_pulses(1.0, 10.0)
    assert p.tau_p == pytest.approx(math.pi / 2)
    assert p.tau == pytest.approx(10 + math.pi / 2)
    assert p.value(0.0) == 0 and p.value(5.0) == 0
    assert p.value(10.5) == 1.0 and p.value(p.tau + 1) == 0
    ts = np.linspace(0, p.tau, 200001)
    area = np.trapezoid([p.value(t) for t in ts], ts)
    assert area == pytest.approx(math.pi / 2, abs=1e-3)
    assert p.breakpoints(0, 2 * p.tau + 1) == pytest.approx([10, p.tau, p.tau + 10, 2 * p.tau])
    with pytest.raises(ValueError):
        PulseSchedule(1.0, 1.0, 1.5)
    # a pi pulse under sigma_x maps |0> to |1>
    m = qubit_model([], H0=np.zeros((2, 2)), drives=[(SIGMA_X, p)])
    sol = integrate(m, np.diag([1.0, 0.0]), [0, p.tau])
    assert abs(sol.states[-1][1, 1] - 1) < 1e-8


def test_constant_drive_equals_static():
    m1 = qubit_model([PM_A], H0=0.3 * SIGMA_Z, drives=[(SIGMA_X, Constant(0.5))])
    m2 = qubit_model([PM_A], H0=0.3 * SIGMA_Z + 0.5 * SIGMA_X)
    r = m1.initial_state(np.diag([1.0, 0]))
    a, b = integrate(m1, r, [0, 2]).states[-1], integrate(m2, r, [0, 2]).states[-1]
    assert np.max(np.abs(a - b)) < 1e-8


def test_lambda_sign_invariance():
    pms = [PM_A, PM_B]
    m = qubit_model(pms)
    flipped = PseudoLindbladModel(m.h_sys, m.environments, (), lam_sign=(-1, 1))
    r = m.initial_state(np.diag([0.3, 0.7]) + 0.2)
    t = [0, 1.0, 3.0]
    a = integrate(m, r, t).states
    b = integrate(flipped, r, t).states
    for x, y in zip(a, b):
        assert np.max(np.abs(reduced_state(x, m.layout) - reduced_state(y, m.layout))) < 1e-8
    assert np.max(np.abs(a[-1] - b[-1])) > 1e-4  # joint states differ


def test_steady_state_free_modes():
    pms = [PseudomodeParams(0.8, 0.5, 0.3, 0.0, 6), PseudomodeParams(0.0, 1.0, 0.1, 0.0, 4)]
    m = qubit_model(pms, H0=0.4 * SIGMA_Z, channels=[(0.3, SIGMA_MINUS)])
    rho = steady_state(m)
    expected = kron([np.diag([0.0, 1.0])] + [stationary_state(pm) for pm in pms])
    assert np.max(np.abs(rho - expected)) < 1e-4  # truncation of the thermal factors


def test_steady_state_errors():
    m = qubit_model([], H0=0.4 * SIGMA_Z)  # closed qubit: two-dimensional kernel
    with pytest.raises(np.linalg.LinAlgError):
        steady_state(m)
    m = qubit_model([], drives=[(SIGMA_X, PulseSchedule(1, 5, 1))])
    with pytest.raises(ValueError):
        steady_state(m)


@pytest.mark.slow
def test_long_integration_reaches_steady_state():
    cfg = load_example("ex1")
    m = cfg.model()
    gap = spectral_gap(m)
    rho_ss = steady_state(m)
    sol = integrate(m, cfg.initial_state(m), [0, 50 / gap])
    assert np.max(np.abs(sol.states[-1] - rho_ss)) < 1e-6


def test_integrate_input_errors():
    m = qubit_model([])
    with pytest.raises(ValueError):
        integrate(m, np.eye(2) / 2, [0, 1, 1])
    with pytest.raises(ValueError):
        integrate(m, np.eye(2) / 2, [-1, 1])
    with pytest.raises(ValueError):
        integrate(m, np.eye(3) / 3, [0, 1])
    with pytest.raises(ValueError):
        integrate(m, np.eye(2) / 2, [0, 1], mode_basis="nope")


def test_eigenbasis_and_diagonal_paths_agree():
    m = qubit_model([PM_A, PseudomodeParams(0, 60.0 + 10j, 0, 0.02, 3)])
    assert ModeEigenbasis.worthwhile(m) is not None
    r = m.initial_state(np.diag([0.6, 0.4]) + 0.1)
    t = [0, 0.5, 2.0]
    a = integrate(m, r, t, rtol=1e-10, atol=1e-12, mode_basis="eigen").states
    b = integrate(m, r, t, rtol=1e-10, atol=1e-12, mode_basis="diagonal").states
    for x, y in zip(a, b):
        assert np.max(np.abs(x - y)) < 1e-8
    basis = ModeEigenbasis(m)
    assert np.allclose(basis.from_eig(basis.to_eig(r)), r)


def test_phi_functions_against_augmented_expm():
    zs = np.array([0, 1e-3, 0.3 + 0.2j, -0.49, 0.7j, -5 + 1j, 2.0, -40.0])
    phis = phi_functions(zs, 3)
    for i, z in enumerate(zs):
        # expm of [[z, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1], [0, 0, 0, 0]] holds phi_1..phi_3 in row 0
        A = np.zeros((4, 4), complex)
        A[0, 0] = z
        A[0, 1] = A[1, 2] = A[2, 3] = 1
        E = expm(A)
        for k in range(1, 4):
            assert abs(phis[k][i] - E[0, k]) < 1e-13 * max(1, abs(E[0, k]))


def test_etdrk4_fourth_order():
    # y' = w y + sin(y) style nonlinearity on a diagonal system; error ~ h^4
    w = np.array([-50.0, -1.0 + 2j])

    def N(y):
        return 0.5 * np.sin(y) + 0.1 * y[::-1]

    def run(h, T=1.0):
        y = np.array([1.0 + 0j, 0.5 + 0j])
        coef = ETDCoefficients(w)
        for _ in range(int(round(T / h))):
            y = etdrk4_step(N, y, N(y), h, coef)
        return y

    sol = solve_ivp(lambda t, y: w * y + N(y), (0, 1), np.array([1.0 + 0j, 0.5 + 0j]), method="DOP853",
                    rtol=1e-13, atol=1e-15)
    ref = sol.y[:, -1]
    _, y_adaptive, _ = integrate_etd(N, np.array([1.0 + 0j, 0.5 + 0j]), w, 0.0, 1.0, [1.0], 1e-10, 1e-12)
    assert np.abs(y_adaptive - ref).max() < 1e-8
    e1 = np.abs(run(0.025) - ref).max()
    e2 = np.abs(run(0.0125) - ref).max()
    assert 2 ** 3.5 < e1 / e2 < 2 ** 4.7

"""Acceptance criteria 1-11; each test prints one PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy import stats

from pseudomodes.baths import drude_lorentz_expansion, underdamped_expansion
from pseudomodes.config import load_example
from pseudomodes.liouvillian import (SIGMA_MINUS, SIGMA_X, SIGMA_Z, Environment, HamiltonianSchedule,
                                     PseudoLindbladModel, integrate, steady_state)
from pseudomodes.mapping import PseudomodeParams, map_expansion, verify_mapping
from pseudomodes.observables import heat_currents, mutual_information, negativity, reduced_state
from pseudomodes.trajectories import (DoubleKet, TrajectorySystem, apply_jump, convergence_fraction, drift_step,
                                      jump_rate, one_step_samples, run_ensemble, simulate_batch, trajectory_rng)

from conftest import random_matrix, report
from oracles import double_integral_closed, double_integral_quad, dephasing_coherence, toy_closed_form

H_S = 0.5 * SIGMA_X
P_UP = np.diag([1.0, 0.0])


def system_series(model, rho0, t, ops, rtol=1e-8, atol=1e-10):
    out = {k: [] for k in ops}

    def cb(_, rho):
        rs = reduced_state(rho, model.layout)
        for k, op in ops.items():
            out[k].append(np.trace(op @ rs))

    integrate(model, rho0, t, rtol, atol, callback=cb)
    return {k: np.array(v) for k, v in out.items()}


# ---------------------------------------------------------------- criterion 1


def test_c01_mapping_fidelity():
    t0 = time.time()
    t = np.linspace(0, 50, 2001)
    errs = {}
    for k in (0, 3):
        e = underdamped_expansion(0.2, 0.025, 1.0, 1.0, k)
        errs[f"ex1 k_max={k}"] = verify_mapping(e, map_expansion(e), t).max_error
    e = drude_lorentz_expansion(1e-4, 1e-2, 10.0, 3, 50.0)
    errs["ex2"] = verify_mapping(e, map_expansion(e), t).max_error
    dt = time.time() - t0
    ok = max(errs.values()) < 1e-10 and dt < 1.0
    detail = ", ".join(f"{k}: {v:.1e}" for k, v in errs.items())
    assert report(1, ok, f"mapping max errors {detail}; {dt:.2f}s")


# ---------------------------------------------------------------- criterion 2


def test_c02_pure_dephasing_oracle():
    e = underdamped_expansion(0.2, 0.025, 1.0, 1.0, 0)
    # the closed-form double integral is itself checked against quadrature
    quad_err = max(abs(double_integral_closed(e, s) - double_integral_quad(e, s)) for s in (1.0, 7.0, 20.0))
    m = PseudoLindbladModel(HamiltonianSchedule(np.zeros((2, 2))),
                            (Environment(SIGMA_Z, tuple(map_expansion(e, [9, 3]))),))
    t = np.linspace(0, 20, 201)
    coh = system_series(m, m.initial_state(np.full((2, 2), 0.5)), t, {"c": np.array([[0, 0], [1, 0]])})["c"]
    ref = 0.5 * dephasing_coherence(e, t)
    rel = np.max(np.abs(coh - ref) / np.abs(ref))
    ok = rel < 1e-3 and quad_err < 1e-8
    assert report(2, ok, f"dephasing max relative error {rel:.2e}; closed vs quadrature {quad_err:.1e}")


# ---------------------------------------------------------------- criterion 3


def test_c03_toy_model():
    g = 1 + 0.5j
    sys_ = TrajectorySystem(np.zeros((2, 2)), [(g, SIGMA_MINUS)])
    model = PseudoLindbladModel(HamiltonianSchedule(np.zeros((2, 2))), (), ((g, SIGMA_MINUS),))
    t = np.linspace(0, 5, 51)
    sol = integrate(model, P_UP, t)
    det_err = max(np.max(np.abs(s - toy_closed_form(g, tt))) for s, tt in zip(sol.states, t))
    tm = np.array([0.0, 0.5, 1.0])
    est = run_ensemble(sys_, P_UP, tm, 10_000, seed=3, strategy="optimal", observables={"P_up": P_UP})
    mean, se_re, se_im = est.series("P_up")
    exact = np.exp(-g * tm)
    z_re = np.abs(mean.real - exact.real)[1:] / se_re[1:]
    z_im = np.abs(mean.imag - exact.imag)[1:] / se_im[1:]
    ok = det_err < 1e-8 and np.all(z_re < 3) and np.all(z_im < 3)
    assert report(3, ok, f"toy deterministic error {det_err:.1e}; MC |z| re {np.round(z_re, 2).tolist()} "
                         f"im {np.round(z_im, 2).tolist()}")


# ---------------------------------------------------------------- criterion 4


@pytest.mark.slow
def test_c04_cutoff_convergence():
    t = np.linspace(0, 75, 751)
    vals = []
    for cut in ([9, 3], [12, 5]):
        cfg = load_example("ex1").with_overrides(**{"pseudomodes.cutoffs": cut})
        m = cfg.model()
        vals.append(system_series(m, cfg.initial_state(m), t, {"H": H_S})["H"])
    diff = np.max(np.abs(vals[0] - vals[1]))
    assert report(4, diff < 1e-4, f"<H_s> (9,3) vs (12,5) max difference {diff:.2e}")


# ---------------------------------------------------------------- criteria 5 and 10


@pytest.fixture(scope="module")
def ex1_mc():
    cfg = load_example("ex1")
    m = cfg.model()
    rho0 = cfg.initial_state(m)
    t = np.linspace(0, 75, 751)
    ref = system_series(m, rho0, t, {"H": H_S})["H"]
    runs = {s: run_ensemble(m, rho0, t, 10_000, seed=7, strategy=s, observables={"H_s": H_S})
            for s in ("optimal", "bkp")}
    return t, ref, runs


@pytest.mark.slow
def test_c05_mc_matches_deterministic(ex1_mc):
    t, ref, runs = ex1_mc
    est = runs["optimal"]
    w = t <= 10 + 1e-12
    mean, se, _ = est.series("H_s")
    z_h = np.abs(mean.real - ref.real)[w][1:] / se[w][1:]
    tr, tse, _ = est.series("trace")
    z_t = np.abs(tr.real - 1)[w][1:] / tse[w][1:]
    ok = np.all(z_h < 3) and np.all(z_t < 3)
    assert report(5, ok, f"Example 1 MC on [0,10]: max |z| <H_s> {z_h.max():.2f}, trace {z_t.max():.2f}")


@pytest.mark.slow
def test_c10_convergence_fraction(ex1_mc):
    t, ref, runs = ex1_mc
    fr = {n: convergence_fraction(runs["optimal"], "H_s", ref.real, 0.05, n, (0.0, 75.0)) for n in (100, 1000, 10_000)}
    bkp = convergence_fraction(runs["bkp"], "H_s", ref.real, 0.05, 10_000, (0.0, 75.0))
    ok = fr[100] <= fr[1000] <= fr[10_000] and fr[10_000] >= bkp
    assert report(10, ok, f"Optimal fractions {[round(v, 4) for v in fr.values()]}, BKP at 1e4 {bkp:.4f}")


# ---------------------------------------------------------------- criterion 6


@pytest.mark.slow
def test_c06_heat_currents():
    cfg = load_example("ex1")
    ss_model = cfg.model()
    q_ss = heat_currents(ss_model, steady_state(ss_model)).total
    m = cfg.with_overrides(**{"pseudomodes.cutoffs": [22, 7]}).model()
    t = np.linspace(0, 75, 151)
    q = []
    integrate(m, m.initial_state(cfg.rho_sys), t, 1e-10, 1e-12,
              callback=lambda tt, rho: q.append(heat_currents(m, rho, tt).per_mode))
    q = np.array(q)
    im_total = np.max(np.abs(q.sum(axis=1).imag))
    re_q2 = np.max(np.abs(q[:, 1].real))
    ok = im_total < 1e-8 and re_q2 < 1e-8 and abs(q_ss.real) < 1e-8
    assert report(6, ok, f"max|Im sum q| {im_total:.1e} at (22,7); max|Re q2| {re_q2:.2e}; "
                         f"steady |Re sum q| {abs(q_ss.real):.1e}")


# ---------------------------------------------------------------- criteria 7 and 8


def ex2_sigma_x_at_4tau(**overrides):
    cfg = load_example("ex2").with_overrides(**overrides) if overrides else load_example("ex2")
    m = cfg.model()
    tau = cfg.drives[0][1].tau if cfg.drives else load_example("ex2").drives[0][1].tau
    return system_series(m, cfg.initial_state(m), [0.0, 4 * tau], {"x": SIGMA_X})["x"][-1]


@pytest.mark.slow
def test_c07_dynamical_decoupling():
    driven = ex2_sigma_x_at_4tau()
    free = ex2_sigma_x_at_4tau(**{"model.hamiltonian.drives": []})
    fam = {w: (driven if w == 50 else ex2_sigma_x_at_4tau(**{"bath.omega_reg": w})).real for w in (2, 10, 50, 100)}
    dist = [abs(fam[w] - fam[100]) for w in (2, 10, 50)]
    ok = driven.real > 0.9 and driven.real - free.real >= 0.02 and dist[0] > dist[1] > dist[2]
    assert report(7, ok, f"<sigma_x>(4 tau) driven {driven.real:.6f}, undriven {free.real:.6f}; "
                         f"distance to Omega_reg=100: {['%.1e' % d for d in dist]}")


@pytest.mark.slow
def test_c08_correlation_dynamics():
    cfg = load_example("ex2")
    m = cfg.model()
    pulse = cfg.drives[0][1]
    t_pre = pulse.tau - pulse.tau_p
    after = pulse.tau + np.linspace(0, pulse.tau, 201)
    t = np.concatenate([[0.0, t_pre], after])
    neg, mi = [], []

    def cb(_, rho):
        neg.append(negativity(rho, m.layout))
        mi.append(abs(mutual_information(rho, m.layout)))

    integrate(m, cfg.initial_state(m), t, callback=cb)
    neg, mi = np.array(neg), np.array(mi)
    below = np.flatnonzero(neg[2:] < 0.3 * neg[1])
    k = 2 + below[0] if below.size else len(t) - 1
    ok = neg[0] < 1e-6 and neg[1] > 1e-4 and below.size > 0 and mi[0] < mi[k] < mi[1]
    assert report(8, ok, f"negativity t=0 {neg[0]:.1e}, pre-pulse {neg[1]:.2e}, t={t[k]:.3f} {neg[k]:.2e}; "
                         f"|MI| {mi[0]:.1e}, {mi[1]:.2e}, {mi[k]:.2e}")


# ---------------------------------------------------------------- criterion 9


@pytest.mark.slow
def test_c09_sampler_equivalence():
    pm = PseudomodeParams(1.0, 0.6 + 0.3j, 0.1 + 0.05j, 0.04 - 0.02j, 3)
    m = PseudoLindbladModel(HamiltonianSchedule(H_S), (Environment(SIGMA_Z, (pm,)),))
    sys_ = TrajectorySystem.from_model(m)
    n, t = 10_000, [0.0, 5.0]
    ket0 = np.kron(np.array([1, 0]), np.eye(sys_.dim // 2)[:, 0]).astype(complex)
    kets = np.tile(ket0[:, None], (1, n))
    out = {}
    for method, seed in (("gillespie", 1), ("euler", 2)):
        rngs = [trajectory_rng(seed, i) for i in range(n)]
        out[method] = simulate_batch(sys_, kets, np.ones(n), rngs, t, "optimal", method, dt=1e-3)
    cg, ce = out["gillespie"].jump_counts, out["euler"].jump_counts
    z = abs(cg.mean() - ce.mean()) / np.sqrt(cg.var(ddof=1) / n + ce.var(ddof=1) / n)
    fg, fe = out["gillespie"].first_jump_times, out["euler"].first_jump_times
    p = stats.ks_2samp(fg[~np.isnan(fg)], fe[~np.isnan(fe)]).pvalue
    ok = z < 3 and p > 0.01
    assert report(9, ok, f"mean jumps {cg.mean():.4f} vs {ce.mean():.4f} (|z| {z:.2f}); KS p {p:.3f}")


# ---------------------------------------------------------------- criterion 11


def trace_sq_increment(sys_, psi, strategy, dt, n, rng):
    drifted, jumped, counts, n_drift = one_step_samples(sys_, psi, strategy, dt, n, rng)
    base = abs(psi.trace) ** 2
    vals = np.array([abs(drifted.trace) ** 2] + [abs(j.trace) ** 2 for j in jumped]) - base
    w = np.array([n_drift] + list(counts), float)
    mean = (w * vals).sum() / n
    se = np.sqrt((w * (vals - mean) ** 2).sum() / (n - 1) / n)
    return mean, se


def trace_sq_closed_form(sys_, psi, strategy, dt):
    tr = psi.trace
    total = 0.0
    for a in range(sys_.n_channels):
        L = sys_.L[a]
        r = jump_rate(sys_, strategy, psi, a)
        ev = np.vdot(psi.psi2, L.conj().T @ L @ psi.psi1)
        total += abs(tr) ** 2 / r * abs(r - sys_.gamma[a] * ev / tr) ** 2
    return total * dt


def exact_one_step(sys_, psi, strategy, dt):
    """E{d|tr rho_Psi|^2} from the exact one-step outcome probabilities."""
    drift = drift_step(sys_, psi, strategy, dt, rtol=1e-12, atol=1e-14)
    rates = [jump_rate(sys_, strategy, psi, a) for a in range(sys_.n_channels)]
    base = abs(psi.trace) ** 2
    out = (1 - sum(rates) * dt) * (abs(drift.trace) ** 2 - base)
    for a, r in enumerate(rates):
        out += r * dt * (abs(apply_jump(sys_, psi, a, strategy).trace) ** 2 - base)
    return out


def test_c11_one_step_trace_statistics():
    rng = np.random.default_rng(2024)
    dt, n = 1e-3, 100_000
    zs, orders = [], []
    for d in (2, 3, 4):
        H = random_matrix(rng, d, hermitian=True) * 0.5
        chans = [(complex(rng.normal(), rng.normal()), random_matrix(rng, d) * 0.5) for _ in range(2)]
        sys_ = TrajectorySystem(H, chans)
        v1 = rng.normal(size=d) + 1j * rng.normal(size=d)
        v2 = rng.normal(size=d) + 1j * rng.normal(size=d)
        psi = DoubleKet(v1 / np.linalg.norm(v1), v2 / np.linalg.norm(v2))
        for strategy in ("bkp", "norm_product"):
            mean, se = trace_sq_increment(sys_, psi, strategy, dt, n, rng)
            zs.append(abs(mean - trace_sq_closed_form(sys_, psi, strategy, dt)) / se)
        # optimal rates leave |tr| unchanged at jumps, so the sampled increment is
        # nearly deterministic; check the closed form is the exact first-order term
        rem = [abs(exact_one_step(sys_, psi, "optimal", h) - trace_sq_closed_form(sys_, psi, "optimal", h))
               for h in (1e-3, 1e-4)]
        orders.append(np.log10(rem[0] / rem[1]))
    ok = all(z < 3 for z in zs) and all(o > 1.8 for o in orders)
    assert report(11, ok, f"E d|tr|^2 vs closed form, |z| (bkp, norm_product per model) "
                          f"{[round(float(z), 2) for z in zs]}; optimal remainder order {np.round(orders, 2).tolist()}")

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from cybersir.firmmodel import (NONE, PRIMARY, SECONDARY, Firm, InfectionRecord, ZipfSpec, approx_claim_moments,
                                approx_total_claim, conditional_expected_claim, infection_times, instantaneous_claim,
                                marginal_cdf_tau, marginal_density_tau, period_claim, sample_firm_sizes,
                                simulate_infection_times, subunit_revenue)
from cybersir.stochproc import RngStream, TimeGrid

GRID = TimeGrid(0.0, 100.0, 1.0)
U = GRID.points
PI_STAR = 50 / 60


def _firm(k, z0=1.0, mu=0.0, vol=1e-3, rho=0.0):
    return Firm("f", "s", np.full(k, z0), np.full(k, mu), np.full(k, vol), rho)


def _varying_force():
    return 0.02 + 0.015 * np.sin(U / 9.0) ** 2


def _many(size, n, force, a, gamma, seed=0):
    g = np.zeros((GRID.n_points, size))
    g[:, size - 1] = gamma
    gen = RngStream(seed).generator()
    return infection_times(np.full(n, size), force, a, g, GRID, gen)


def test_firm_validation():
    with pytest.raises(ValueError):
        Firm("x", "s", [1.0, -1.0], [0, 0], [0.1, 0.1])
    with pytest.raises(ValueError):
        Firm("x", "s", [1.0], [0], [0.0])
    with pytest.raises(ValueError):
        Firm("x", "s", [1.0, 1.0, 1.0], [0, 0, 0], [0.1] * 3, rho=-0.5)
    with pytest.raises(ValueError):
        Firm("x", "s", [1.0, 1.0], [0], [0.1, 0.1])
    f = _firm(3)
    assert f.size == 3 and len(f.subunits) == 3


def test_no_force_no_infection():
    rec = simulate_infection_times(_firm(4), np.zeros(101), np.full(101, 0.5), np.full(101, 0.3), GRID, RngStream(0))
    assert np.all(rec.tau == GRID.sentinel)
    assert np.all(rec.source == NONE) and not rec.infected.any()


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        simulate_infection_times(_firm(2), np.zeros(50), np.zeros(101), np.full(101, 0.3), GRID, RngStream(0))


def test_record_invariants():
    tau, delta, sev, src = _many(5, 20_000, np.full(101, 0.01), np.full(101, 0.4), 0.2)
    inf = tau <= GRID.end
    assert np.all(delta[inf] > 0)
    assert np.all((sev >= 0) & (sev <= 1))
    firms = tau.reshape(-1, 5)
    s = src.reshape(-1, 5)
    for row, srow in zip(firms[:2000], s[:2000]):
        if np.any(srow == SECONDARY):
            ft = row[srow == PRIMARY].min()
            assert np.all(row[srow == SECONDARY] == ft)
    assert np.all(np.isclose(delta[inf], 5.0))  # 1/gamma with gamma = 0.2


def test_size_one_matches_exponential_law():
    y = _varying_force()
    tau, *_ = _many(1, 100_000, y, np.full(101, 0.5), 0.3, seed=1)
    lam = np.concatenate(([0], np.cumsum(y[:-1])))
    emp = np.array([np.mean(tau <= u) for u in U])
    assert np.max(np.abs(emp - (1 - np.exp(-lam)))) < 0.02


@pytest.mark.parametrize("size", [2, 3, 5])
@pytest.mark.parametrize("varying", [False, True])
def test_marginal_cdf_matches_simulation(size, varying):
    y = _varying_force() if varying else np.full(101, 0.02)
    a = 0.3 + 0.4 * (U / 100) if varying else np.full(101, 0.45)
    n = 100_000 // size
    tau, *_ = _many(size, n, y, a, 0.3, seed=size)
    emp = np.array([np.mean(tau <= u) for u in U])
    assert np.max(np.abs(emp - marginal_cdf_tau(size, y, a, U))) < 0.02


def test_marginal_cdf_closed_form_k2():
    lam, alpha = 0.013, 0.37
    u = np.linspace(0, 100, 57)
    f = marginal_cdf_tau(2, np.full(101, lam), np.full(101, alpha), u)
    ref = 1 - np.exp(-2 * lam * u) - np.exp(-lam * u) * (1 - alpha) * (1 - np.exp(-lam * u))
    assert np.max(np.abs(f - ref)) < 1e-8


def test_marginal_cdf_against_quadrature_of_formula():
    y, a = _varying_force(), 0.3 + 0.4 * (U / 100)
    K = 4
    yf = lambda s: y[min(int(s), 99)]
    af = lambda s: a[min(int(s), 99)]
    Lam = lambda s: float(np.sum(y[: int(s)]) + yf(s) * (s - int(s)))
    for u in (3.5, 17.0, 64.2, 100.0):
        corr = integrate.quad(lambda s: yf(s) * np.exp(-(K - 1) * Lam(s)) * (1 - af(s)), 0, u,
                              points=list(range(1, int(u) + 1)), limit=400)[0]
        ref = 1 - np.exp(-K * Lam(u)) - (K - 1) * np.exp(-Lam(u)) * corr
        assert abs(marginal_cdf_tau(K, y, a, u) - ref) < 1e-8


def test_marginal_cdf_basic_properties():
    y, a = _varying_force(), np.full(101, 0.5)
    assert marginal_cdf_tau(3, y, a, 0.0) == 0.0
    assert np.all(marginal_cdf_tau(3, np.zeros(101), a, U) == 0)
    f = marginal_cdf_tau(3, y, a, np.linspace(0, 100, 1001))
    assert np.all(np.diff(f) >= -1e-15) and np.all((f >= 0) & (f <= 1))
    lam = np.concatenate(([0], np.cumsum(y[:-1])))
    assert np.allclose(marginal_cdf_tau(1, y, a, U), 1 - np.exp(-lam))


def test_marginal_density_integrates_to_cdf():
    y, a = _varying_force(), 0.3 + 0.4 * (U / 100)
    for u in (10.0, 55.5, 100.0):
        val = integrate.quad(lambda s: marginal_density_tau(5, y, a, s), 0, u, points=list(range(1, 100)),
                             limit=400)[0]
        assert abs(val - marginal_cdf_tau(5, y, a, u)) < 1e-8


def test_firm_level_vulnerability_monotone_in_size():
    y = np.full(101, 0.01)
    lam = 0.01 * U
    prev = -1.0
    for k in (1, 2, 4, 8):
        tau, *_ = _many(k, 40_000, y, np.full(101, 0.5), 0.3, seed=k)
        first = tau.reshape(-1, k).min(axis=1)
        emp = np.array([np.mean(first <= u) for u in U])
        assert np.max(np.abs(emp - (1 - np.exp(-k * lam)))) < 0.015
        assert emp[50] >= prev
        prev = emp[50]


def test_secondary_fraction_equals_attack_probability():
    a = np.full(101, 0.37)
    size, n = 4, 50_000
    g = np.zeros((101, size))
    g[:, -1] = 0.3
    gen = RngStream(3).generator()
    tau, _, _, src = infection_times(np.full(n, size), np.full(101, 0.004), a, g, GRID, gen)
    tau, src = tau.reshape(n, size), src.reshape(n, size)
    ft = tau.min(axis=1)
    hit = ft <= GRID.end
    # sisters still uninfected at the firm's first time are the exposed ones
    exposed = (src[hit] == SECONDARY) | (tau[hit] > ft[hit, None])
    frac = np.sum(src[hit] == SECONDARY) / exposed.sum()
    se = np.sqrt(0.37 * 0.63 / exposed.sum())
    assert abs(frac - 0.37) < 3 * se


def test_severity_independent_of_infection_time():
    tau, _, sev, _ = _many(3, 60_000, np.full(101, 0.01), np.full(101, 0.5), 0.3, seed=9)
    inf = tau <= GRID.end
    assert abs(np.corrcoef(sev[inf], tau[inf])[0, 1]) < 0.01 + 3 / np.sqrt(inf.sum())


def test_recovery_uses_rate_at_infection_cell():
    g = np.where(U < 50, 0.5, 0.1)
    rec = simulate_infection_times(_firm(1), np.full(101, 0.05), np.full(101, 0.5), g, GRID, RngStream(2))
    if rec.infected[0]:
        cell = int(np.floor(rec.tau[0]))
        assert rec.delta[0] == pytest.approx(1 / g[cell])


def _record(tau, delta, sev):
    tau = np.asarray(tau, dtype=float)
    return InfectionRecord(tau, np.asarray(delta, float), np.asarray(sev, float), np.where(tau <= 100, 1, 0), 100.0)


def test_subunit_revenue_branches():
    path = np.linspace(10, 20, 101)
    assert np.array_equal(subunit_revenue(path, _record([101], [0], [0.5]), 0, GRID), path)
    r = subunit_revenue(path, _record([10], [5], [0.5]), 0, GRID)
    assert r[12] == 0.5 * path[12] and r[16] == path[16] and r[15] == path[15] and r[10] == 0.5 * path[10]
    r1 = subunit_revenue(path, _record([10], [5], [1.0]), 0, GRID)
    assert np.all(r1[10:15] == 0)


def test_instantaneous_claim_examples():
    f = _firm(2)
    paths = np.full((2, 101), 100.0)
    assert instantaneous_claim(f, paths, _record([101, 101], [0, 0], [0.8, 0.8]), 20, GRID) == 0
    assert instantaneous_claim(f, paths, _record([5, 101], [10, 0], [0.8, 0.5]), 7, GRID) == pytest.approx(80.0)
    with pytest.raises(ValueError):
        instantaneous_claim(f, paths, _record([5, 101], [10, 0], [0.8, 0.5]), 7.5, GRID)


def test_instantaneous_claim_equals_revenue_gap():
    rng = np.random.default_rng(0)
    f = _firm(3)
    paths = rng.uniform(1, 5, (3, 101))
    rec = _record([4.3, 4.3, 20.0], [6.0, 6.0, 2.5], [0.7, 0.9, 0.2])
    for t in range(101):
        gap = sum(paths[j, t] - subunit_revenue(paths[j], rec, j, GRID)[t] for j in range(3))
        c = instantaneous_claim(f, paths, rec, t, GRID)
        assert abs(c - gap) < 1e-12
        assert 0 <= c <= paths[:, t].sum()


def test_period_claim_examples():
    f = _firm(1)
    flat = np.full((1, 101), 3.0)
    assert period_claim(f, flat, _record([101], [0], [0.5]), 0, 100, GRID) == 0
    assert period_claim(f, flat, _record([0], [50], [1.0]), 4, 5, GRID) == pytest.approx(3.0, abs=1e-15)
    with pytest.raises(ValueError):
        period_claim(f, flat, _record([0], [50], [1.0]), 5, 4, GRID)
    # linear claim on [0, 1] from 0 to c: exponential path degenerates on one cell,
    # so use tau at 0 and a path whose value at 0 is tiny
    lin = np.full((1, 101), 2.0)
    lin[0, 0] = 1e-300
    v = period_claim(f, lin, _record([0], [50], [1.0]), 0, 1, GRID)
    assert v == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 99), st.floats(0.1, 30), st.integers(1, 99))
def test_period_claim_additive(tau, delta, split):
    rng = np.random.default_rng(int(tau * 1000))
    f = _firm(2)
    paths = rng.uniform(1, 5, (2, 101))
    rec = _record([tau, min(tau + 3, 101)], [delta, delta], [0.6, 0.8])
    whole = period_claim(f, paths, rec, 0, 100, GRID)
    parts = period_claim(f, paths, rec, 0, split, GRID) + period_claim(f, paths, rec, split, 100, GRID)
    daily = sum(period_claim(f, paths, rec, u, u + 1, GRID) for u in range(100))
    assert abs(whole - parts) < 1e-12 * max(1, whole)
    assert abs(whole - daily) < 1e-9 * max(1, whole)
    assert whole >= 0


def test_conditional_expected_claim_trivial():
    f = _firm(3)
    a = np.full(101, 0.5)
    assert conditional_expected_claim(f, np.zeros(101), a, np.full(101, 0.3), 50, PI_STAR) == 0
    assert conditional_expected_claim(f, np.full(101, 0.05), a, np.full(101, 1e12), 50, PI_STAR) < 1e-9


@pytest.mark.parametrize("t", [10, 37, 80])
def test_conditional_expected_claim_monte_carlo(t):
    size, n = 3, 100_000
    y, a = _varying_force(), 0.3 + 0.4 * (U / 100)
    gamma = 0.12 + 0.05 * np.cos(U / 13)
    f = _firm(size, z0=2.0, mu=0.004)
    g = np.zeros((101, size))
    g[:, -1] = gamma
    tau, delta, sev, _ = infection_times(np.full(n, size), y, a, g, GRID, RngStream(t).generator())
    active = (tau <= t) & (t < tau + delta)
    claims = (sev * active * 2.0 * np.exp(0.004 * t)).reshape(n, size).sum(axis=1)
    se = claims.std(ddof=1) / np.sqrt(n)
    exact = conditional_expected_claim(f, y, a, gamma, t, PI_STAR)
    assert abs(claims.mean() - exact) < 3 * se


def test_approx_claim_mu_zero_limit():
    lam, gamma, alpha = 0.01, 0.2, 0.4
    y, a, g = np.full(101, lam), np.full(101, alpha), np.full(101, gamma)
    f = _firm(2, z0=3.0, mu=0.0)
    val = approx_total_claim(f, y, a, g, PI_STAR)
    dens = lambda u: marginal_density_tau(2, y, a, u)
    ref = integrate.quad(lambda u: min(100 - u, 1 / gamma) * dens(u), 0, 100, points=[95.0], limit=200)[0]
    assert abs(val - PI_STAR * 3.0 * 2 * ref) < 1e-6


def test_approx_claim_nonzero_drift_and_moments():
    y, a = _varying_force(), np.full(101, 0.5)
    g = 0.1 + 0.05 * np.sin(U / 7)
    mu = np.array([0.002, -0.001, 0.0005])
    f = Firm("f", "s", [1.0, 2.0, 0.5], mu, [0.01] * 3)
    val = approx_total_claim(f, y, a, g, PI_STAR)
    dens = lambda u: marginal_density_tau(3, y, a, u)
    gf = lambda u: g[min(int(u), 99)]
    ref = sum(z * integrate.quad(lambda u: (np.exp(m * min(100, u + 1 / gf(u))) - np.exp(m * u)) / m * dens(u), 0, 100,
                                 points=list(range(1, 100)), limit=800)[0] for z, m in zip(f.z0, mu))
    assert abs(val - PI_STAR * ref) < 1e-6 * max(1, ref)
    m = approx_claim_moments(3, y, a, g, GRID, 12)
    via_moments = PI_STAR * sum(z * np.sum(mm ** np.arange(12) * m) for z, mm in zip(f.z0, mu))
    assert abs(val - via_moments) < 1e-9 * val
    assert approx_total_claim(f, np.zeros(101), a, g, PI_STAR) == 0


def test_zipf_sampling():
    assert np.all(sample_firm_sizes(ZipfSpec(1.5, 1.0, 1), 100, RngStream(0)) == 1)
    spec = ZipfSpec(1.759, 0.784, 12)
    s = sample_firm_sizes(spec, 100_000, RngStream(1))
    freq = np.bincount(s, minlength=13)[1:] / s.size
    assert abs(freq[0] - spec.pmf()[0]) < 0.01
    assert np.all(np.diff(freq[:6]) <= 0)
    assert np.all(spec.density() >= 0)
    assert np.isclose(spec.pmf().sum(), 1.0)

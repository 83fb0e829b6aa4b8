import warnings

import numpy as np
import pytest

from cybersir.calibration import (CalibrationConfig, InfectionPanel, ThetaSpec, allocate_initial_infected,
                                  allocate_populations, build_firm_proxy, calibrate, estimate_bs, fit_zipf,
                                  fit_zipf_counts, infection_proxy, largest_remainder, objective_j2, proxy_size,
                                  scale_rates, simulate_contagion)
from cybersir.firmmodel import ZipfSpec, sample_firm_sizes
from cybersir.sir import SirState
from cybersir.stochproc import RngStream, TimeGrid
from cybersir.synth import REFERENCE_SIZE_COUNTS, SECTOR_SHARES, SyntheticSpec, synthetic_panel

TABLE5 = [11144, 1646, 538, 244, 132, 80, 52, 36, 26, 20, 15, 12]


def test_theta_validation():
    with pytest.raises(ValueError):
        ThetaSpec(h_star=0)
    th = ThetaSpec()
    assert th.feller_margin() > 0
    assert ThetaSpec.from_vector(th.as_vector()) == th
    with pytest.raises(ValueError):
        ThetaSpec(kappa_a=0.01, sigma_a=0.5).cir_specs()


def test_zipf_fit_reference_histogram():
    z = fit_zipf_counts(REFERENCE_SIZE_COUNTS)
    assert abs(z.exponent - 1.759) < 0.02
    assert abs(z.scale - 0.784) < 0.005


def test_zipf_fit_synthetic_sample():
    sizes = sample_firm_sizes(ZipfSpec(1.76, 0.78, 12), 100_000, RngStream(3))
    for method in ("nls", "loglog", "mle"):
        assert abs(fit_zipf(sizes, 12, method).exponent - 1.76) < 0.05


def test_zipf_fit_noiseless_inversion():
    spec = ZipfSpec(1.76, 0.78, 12)
    # histogram proportional to the fitted frequency curve
    z = fit_zipf_counts(1e6 * spec.pmf())
    assert abs(z.exponent - 1.76) < 1e-6
    assert abs(z.scale - spec.pmf()[0]) < 1e-6
    ll = fit_zipf_counts(1e6 * spec.pmf(), "loglog")
    assert abs(ll.exponent - 1.76) < 1e-6


def test_zipf_fit_errors():
    with pytest.raises(ValueError):
        fit_zipf([3, 3, 3], 12)
    with pytest.raises(ValueError):
        fit_zipf([0, 1], 12)
    with pytest.raises(ValueError):
        fit_zipf_counts([5, 1, 1], "median")


def test_allocate_populations_reference_table():
    z = fit_zipf_counts(REFERENCE_SIZE_COUNTS)
    assert allocate_populations(14210, z).tolist() == TABLE5


def test_allocate_populations_properties():
    z = ZipfSpec(1.759, 0.784, 12)
    h = allocate_populations(14210, z, "normalized")
    assert np.all(np.diff(h) <= 0) and h.dtype.kind == "i"
    h10 = allocate_populations(142100, z, "normalized")
    assert np.all(np.abs(h10 - 10 * h) <= 10)
    assert allocate_populations(500, ZipfSpec(1.759, 1.0, 1), "normalized").tolist() == [500]
    assert allocate_populations(500, ZipfSpec(1.759, 1.0, 1)).tolist() == [500]
    with pytest.raises(ValueError):
        allocate_populations(0.5, z)


def test_scale_rates():
    g, b = scale_rates(0.6782, 0.5471, 12)
    assert g[0] == 0.6782 and np.isclose(g[1], 0.6782 / 1.5)
    assert np.all(np.diff(g) < 0)
    assert np.allclose(b / g, 0.5471 / 0.6782)
    with pytest.raises(ValueError):
        scale_rates(0.0, 0.5, 3)


def test_firm_proxy_sizes_and_split():
    assert proxy_size(10.0, 10.0) == 1
    assert proxy_size(25.0, 10.0) == 3
    rev = {"a": [10.0, 11.0, 12.1, 13.0], "b": [30.0, 33.0, 36.0, 38.0], "c": [20.0, 21.0, 22.0, 25.0]}
    firms = {f.id: f for f in build_firm_proxy(rev, {"a": "Retail"}, rho=0.2)}
    assert firms["a"].size == 1 and firms["b"].size == 2 and firms["c"].size == 1
    assert firms["a"].sector == "Retail" and firms["b"].rho == 0.2 and firms["a"].rho == 0.0
    mu_b, sig_b = estimate_bs(np.array(rev["b"]) / 2)
    assert np.allclose(firms["b"].z0, 38.0 / 2 / 365)
    assert np.allclose(firms["b"].drift, mu_b) and np.allclose(firms["b"].vol, sig_b)
    with pytest.raises(ValueError):
        build_firm_proxy({"x": [1.0, -1.0, 2.0]})


def test_estimate_bs_geometric_series():
    z = 5.0 * 1.07 ** np.arange(6)
    with pytest.warns(RuntimeWarning):
        mu, sig = estimate_bs(z)
    assert sig == 1e-8
    assert mu == pytest.approx(np.log(1.07) / 365, rel=1e-12)


def test_estimate_bs_alternating_series():
    z = np.array([1, np.e, 1, np.e, 1], dtype=float)
    mu, sig = estimate_bs(z)
    r = np.array([1, -1, 1, -1.0])
    sy = np.std(r, ddof=1)
    assert sig == pytest.approx(sy / np.sqrt(365))
    assert mu == pytest.approx((0 + sy**2 / 2) / 365)
    with pytest.raises(ValueError):
        estimate_bs([1.0, 2.0])
    with pytest.raises(ValueError):
        estimate_bs([1.0, 0.0, 2.0])


def test_estimate_bs_consistency_on_gbm():
    rng = np.random.default_rng(0)
    mu_y, sig_y, n = 0.05, 0.2, 10_000
    steps = (mu_y - sig_y**2 / 2) + sig_y * rng.standard_normal((n, 9))
    paths = np.exp(np.concatenate((np.zeros((n, 1)), np.cumsum(steps, axis=1)), axis=1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        est = np.array([estimate_bs(p) for p in paths]) * [365, np.sqrt(365)]
    assert abs(est[:, 0].mean() - mu_y) < 0.1 * sig_y**2 + 3 * est[:, 0].std() / np.sqrt(n)
    assert abs(est[:, 1].mean() - sig_y) < 0.01


def test_infection_proxy():
    assert infection_proxy({"A": 1.0}, 7, {"A": [5]}).tolist() == [[7]]
    table = {s: REFERENCE_SIZE_COUNTS * (i + 1) for i, s in enumerate(SECTOR_SHARES)}
    out = infection_proxy(SECTOR_SHARES, 1000, table)
    assert out.sum() == round(1000 * sum(SECTOR_SHARES.values()))
    for row, rate in zip(out, SECTOR_SHARES.values()):
        assert abs(row.sum() - rate * 1000) <= 12
    dbl = infection_proxy(SECTOR_SHARES, 2000, table)
    assert np.all(np.abs(dbl - 2 * out) <= 2)
    with pytest.raises(ValueError):
        infection_proxy({}, 10, {})
    with pytest.raises(ValueError):
        infection_proxy({"A": 0.7, "B": 0.6}, 10, {"A": [1], "B": [1]})


def test_largest_remainder_total():
    t = np.array([1.4, 2.3, 0.3])
    out = largest_remainder(t)
    assert out.sum() == 4 and out.tolist() == [2, 2, 0]


def test_panel_validation_and_conversion():
    with pytest.raises(ValueError):
        InfectionPanel(np.array([[1, -1]]))
    with pytest.raises(ValueError):
        InfectionPanel(np.array([[1.5, 1]]))
    new = np.zeros((6, 2))
    new[1, 0] = 3
    new[2, 1] = 1
    p = InfectionPanel.from_new_infections(new, [2, 1.2])
    assert p.counts[:, 0].tolist() == [0, 3, 3, 0, 0, 0]
    assert p.counts[:, 1].tolist() == [0, 0, 1, 1, 0, 0]


def test_initial_infected_allocation():
    pops = np.array(TABLE5, dtype=float)
    firms = allocate_initial_infected(49, pops)
    k = np.arange(1, 13)
    assert np.isclose(np.sum(k * firms), 49)
    assert np.allclose(k * firms / 49, k * pops / np.sum(k * pops))


def _short_panel(days=40):
    return synthetic_panel(SyntheticSpec(horizon_days=days), RngStream(5))


def test_j2_zero_panel_is_zero():
    panel = InfectionPanel(np.zeros((31, 12)))
    z = ZipfSpec(1.759, 0.784)
    assert objective_j2(ThetaSpec(), panel, z, 3, RngStream(0)) == 0
    assert objective_j2(ThetaSpec(beta1_0=2.0), panel, z, 3, RngStream(0)) == 0


def test_j2_deterministic_and_defined():
    panel = _short_panel()
    z = SyntheticSpec().zipf
    a = objective_j2(ThetaSpec(), panel, z, 4, RngStream(1))
    assert a == objective_j2(ThetaSpec(), panel, z, 4, RngStream(1))
    one = objective_j2(ThetaSpec(), panel, z, 1, RngStream(1))
    two = objective_j2(ThetaSpec(), panel, z, 2, RngStream(1))
    assert np.isfinite(one) and np.isfinite(two) and one >= 0 and two >= 0 and one != two
    with pytest.raises(ValueError):
        objective_j2(ThetaSpec(kappa_a=0.01, sigma_a=0.5), panel, z, 1, RngStream(1))
    with pytest.raises(ValueError):
        objective_j2(ThetaSpec(), panel, z, 0, RngStream(1))


def test_j2_prefers_true_theta_over_inflated_beta():
    z = SyntheticSpec().zipf
    wins = 0
    for seed in range(20):
        panel = synthetic_panel(SyntheticSpec(horizon_days=60), RngStream(100 + seed))
        th = ThetaSpec()
        bad = ThetaSpec(beta1_0=1.5 * th.beta1_0)
        wins += objective_j2(th, panel, z, 20, RngStream(seed), 14210) < \
            objective_j2(bad, panel, z, 20, RngStream(seed), 14210)
    assert wins >= 19


def test_contagion_scenarios_independent_of_range():
    pops = np.array(TABLE5, dtype=float)
    st0 = SirState.from_counts(pops, allocate_initial_infected(49, pops))
    grid = TimeGrid(0, 20, 1)
    whole = simulate_contagion(ThetaSpec(), st0, grid, RngStream(3), 0, 100)
    part = simulate_contagion(ThetaSpec(), st0, grid, RngStream(3), 70, 75)
    assert np.array_equal(whole.sir.i[70:75], part.sir.i)
    assert np.array_equal(whole.gamma1[70:75], part.gamma1)


def test_calibrate_budget_exhaustion_flags_nonconvergence():
    panel = _short_panel(30)
    cfg = CalibrationConfig(n_scenarios=4, n_starts=2, max_evals=25)
    res = calibrate(panel, SyntheticSpec().zipf, cfg, RngStream(2))
    assert not res.converged
    v = res.theta.as_vector()
    assert np.all(v >= np.array(cfg.lower) * (1 - 1e-9)) and np.all(v <= np.array(cfg.upper) * (1 + 1e-9))
    assert res.theta.feller_margin() >= 0
    assert res.n_evals <= 2 * 25 + 2 and len(res.starts) == 2
    d = res.to_dict()
    assert set(d["theta"]) == {"kappa_a", "sigma_a", "a0", "gamma1_0", "beta1_0", "h_star"}


def test_calibrate_zero_panel_unidentifiable():
    panel = InfectionPanel(np.zeros((21, 12)))
    cfg = CalibrationConfig(n_scenarios=2, n_starts=1, max_evals=30)
    res = calibrate(panel, ZipfSpec(1.759, 0.784), cfg, RngStream(0))
    assert res.unidentifiable and res.j2 == 0

"""Synthetic stand-ins for firm and incident data.

The reference profile holds size-wise averages of annual subunit revenue
(EUR million), daily volatility and daily drift for sizes 1..12, and the
reference histogram the number of firms per size in the insured book.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import (DAYS_PER_YEAR, InfectionPanel, ThetaSpec, allocate_initial_infected,
                          allocate_populations, fit_zipf_counts, simulate_contagion)
from .firmmodel import Firm, ZipfSpec, sample_firm_sizes
from .sir import SirState
from .stochproc import RngStream, TimeGrid

REFERENCE_Z0_ANNUAL = np.array([4.70, 5.99, 6.99, 6.69, 7.30, 8.98, 7.49, 5.40, 6.70, 6.61, 10.03, 9.82])
REFERENCE_SIGMA_DAILY = 1e-3 * np.array([12.69, 12.30, 10.91, 9.70, 16.16, 8.16, 19.03, 26.31, 8.64, 12.71, 4.92, 4.79])
REFERENCE_MU_DAILY = 1e-3 * np.array([0.19, 0.37, 0.28, 0.26, 0.56, 0.24, 1.12, 1.45, 0.36, 0.28, 0.33, 0.27])
REFERENCE_SIZE_COUNTS = np.array([2263, 312, 138, 61, 38, 20, 13, 13, 11, 7, 4, 4])
REFERENCE_ZIPF = fit_zipf_counts(REFERENCE_SIZE_COUNTS)
REFERENCE_INITIAL_SUBUNITS = 49
SECTOR_SHARES = {
    "Manufacturing": 0.2068, "Technology": 0.1322, "Retail": 0.1136, "Healthcare": 0.1102,
    "Consulting": 0.0932, "Construction": 0.0797, "Education": 0.0695, "Legal": 0.0678,
    "Government": 0.0644, "Banking": 0.0627,
}


@dataclass
class SyntheticSpec:
    """Settings for synthetic panels.

    Attributes:
        n_firms: Number of firms in the revenue panel.
        zipf: Firm-size law.
        years: Length of the annual revenue panel.
        revenue_dispersion: Lognormal spread of firm revenue around the size mean.
        theta: Contagion coefficients used for the infection panel.
        horizon_days: Length of the infection panel minus one.
        initial_subunits: Infected subunits on day 0.
    """

    n_firms: int = 3000
    zipf: ZipfSpec = field(default_factory=lambda: REFERENCE_ZIPF)
    years: int = 5
    revenue_dispersion: float = 0.3
    theta: ThetaSpec = field(default_factory=ThetaSpec)
    horizon_days: int = 100
    initial_subunits: float = REFERENCE_INITIAL_SUBUNITS
    rho: float = 0.5

    def __post_init__(self):
        if self.n_firms < 1 or self.years < 3 or self.horizon_days < 1:
            raise ValueError("n_firms >= 1, years >= 3 and horizon_days >= 1 required")
        if self.revenue_dispersion < 0:
            raise ValueError("revenue_dispersion must be nonnegative")


def _profile(k):
    i = np.minimum(np.asarray(k) - 1, REFERENCE_Z0_ANNUAL.size - 1)
    return REFERENCE_Z0_ANNUAL[i], REFERENCE_MU_DAILY[i], REFERENCE_SIGMA_DAILY[i]


def reference_portfolio(counts: Sequence[int] = None, rng=RngStream(0, 7), dispersion: float = 0.0,
                        rho: float = 0.5, min_size: int = 2) -> list[Firm]:
    """Firms whose size-wise mean coefficients match the reference profile.

    With ``dispersion > 0`` each firm's revenue is scaled by a mean-one
    lognormal factor. Sizes below ``min_size`` are left out.
    """
    counts = REFERENCE_SIZE_COUNTS if counts is None else np.asarray(counts)
    gen = rng.generator()
    firms = []
    sectors = list(SECTOR_SHARES)
    for k, n in enumerate(counts, start=1):
        if k < min_size:
            continue
        z, mu, sig = _profile(k)
        for i in range(int(n)):
            f = np.exp(dispersion * gen.standard_normal() - 0.5 * dispersion**2) if dispersion else 1.0
            firms.append(Firm(f"S{k:02d}-{i:04d}", sectors[(k + i) % len(sectors)], np.full(k, z * f / DAYS_PER_YEAR),
                              np.full(k, mu), np.full(k, sig), rho if k > 1 else 0.0))
    return firms


def synthetic_revenues(spec: SyntheticSpec, rng: RngStream):
    """Annual revenue panel ``{firm_id: series}`` and sectors.

    Firm size is drawn from ``spec.zipf``; revenue follows annual GBM with the
    size profile's coefficients converted from days to years.
    """
    gen = rng.generator()
    sizes = sample_firm_sizes(spec.zipf, spec.n_firms, gen)
    sectors = list(SECTOR_SHARES)
    p = np.array(list(SECTOR_SHARES.values()))
    sec = gen.choice(len(sectors), size=spec.n_firms, p=p / p.sum())
    panel, labels = {}, {}
    for i, k in enumerate(sizes):
        z, mu, sig = _profile(k)
        level = k * z * np.exp(spec.revenue_dispersion * gen.standard_normal() - 0.5 * spec.revenue_dispersion**2)
        mu_y, sig_y = mu * DAYS_PER_YEAR, sig * np.sqrt(DAYS_PER_YEAR)
        steps = (mu_y - 0.5 * sig_y**2) + sig_y * gen.standard_normal(spec.years - 1)
        series = level * np.exp(np.concatenate(([0.0], np.cumsum(steps))))
        fid = f"F{i:06d}"
        panel[fid] = series
        labels[fid] = sectors[sec[i]]
    return panel, labels, sizes


def synthetic_panel(spec: SyntheticSpec, rng: RngStream, scenario: int = 0) -> InfectionPanel:
    """Currently-infected firm counts from one simulated contagion scenario."""
    h = allocate_populations(spec.theta.h_star, spec.zipf).astype(float)
    inf0 = allocate_initial_infected(spec.initial_subunits, h, integer=True)
    state = SirState.from_counts(h, inf0)
    grid = TimeGrid(0.0, float(spec.horizon_days), 1.0)
    cb = simulate_contagion(spec.theta, state, grid, rng, scenario, scenario + 1, total_firms=h.sum())
    counts = np.rint(cb.sir.i[0] * h.sum())
    counts[0] = inf0
    return InfectionPanel(counts)

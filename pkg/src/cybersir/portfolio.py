"""Portfolio losses: scenario engine, loss distributions and exceedance curves."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .calibration import ThetaSpec, simulate_contagion
from .firmmodel import Firm, approx_claim_moments, infection_times
from .sir import SirState, infected_subunits
from .stochproc import SCENARIO_BLOCK, RngStream, TimeGrid, _gen

FIRM_STREAM = 2
AEP_STREAM = 3


@dataclass
class LossDistribution:
    """Empirical distribution of aggregate losses (currency)."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.sort(np.asarray(self.samples, dtype=float).ravel(), kind="stable")
        if s.size and s[0] < 0:
            raise ValueError("losses must be nonnegative")
        self.samples = s

    def __len__(self) -> int:
        return self.samples.size

    def cdf(self, x):
        return empirical_cdf(self, x)

    def quantile(self, p):
        return np.quantile(self.samples, p)

    @property
    def mean(self) -> float:
        return float(self.samples.mean())


def empirical_cdf(dist: LossDistribution, x):
    """Right-continuous empirical CDF: share of samples <= x."""
    out = np.searchsorted(dist.samples, np.asarray(x, dtype=float), side="right") / dist.samples.size
    return out if np.ndim(out) else float(out)


def episode_loss(period_claims) -> float:
    """Total portfolio loss of one episode from per-firm (or per-piece) claims."""
    c = np.asarray(period_claims, dtype=float)
    if np.any(c < 0):
        raise ValueError("claims must be nonnegative")
    return float(c.sum())


def distribution_summary(dist: LossDistribution) -> dict:
    """Mean, histogram mode and support bounds.

    The mode is the median of the samples in the fullest Freedman-Diaconis
    bin, which is exact for point masses.
    """
    s = dist.samples
    if s.size == 0:
        raise ValueError("empty distribution")
    lo, hi = float(s[0]), float(s[-1])
    q75, q25 = np.percentile(s, [75, 25])
    width = 2.0 * (q75 - q25) / s.size ** (1.0 / 3.0)
    if hi == lo:
        mode = lo
    else:
        if width <= 0:
            width = (hi - lo) / max(1.0, math.sqrt(s.size))
        nbins = max(1, int(math.ceil((hi - lo) / width)))
        counts, edges = np.histogram(s, bins=nbins, range=(lo, hi))
        b = int(np.argmax(counts))
        inside = s[(s >= edges[b]) & ((s < edges[b + 1]) if b < nbins - 1 else (s <= edges[b + 1]))]
        mode = float(np.median(inside))
    return {"mean": float(s.mean()), "mode": mode, "min": lo, "max": hi, "n": int(s.size)}


# ---------------------------------------------------------------------------
# exceedance curves


@dataclass
class AepConfig:
    """Outer compound-Poisson loop settings.

    Attributes:
        upsilon: Mean number of episodes per horizon.
        n_outer: Monte Carlo replications of the horizon.
        thresholds: Loss levels where the curve is evaluated.
        forced_count: If set, every replication has exactly this many episodes.
        bootstrap: Resample a fixed loss pool instead of resimulating episodes.
    """

    upsilon: float = 0.105
    n_outer: int = 10_000
    thresholds: Sequence[float] = field(default_factory=lambda: np.linspace(0.0, 150.0, 301))
    forced_count: Optional[int] = None
    bootstrap: bool = False

    def __post_init__(self):
        if self.upsilon < 0:
            raise ValueError("upsilon must be nonnegative")
        if self.n_outer < 1:
            raise ValueError("n_outer must be at least 1")


@dataclass
class AepResult:
    thresholds: np.ndarray
    probability: np.ndarray
    counts: np.ndarray  # episodes per replication
    totals: np.ndarray  # aggregate loss per replication

    def count_frequencies(self, upto: int = 3) -> np.ndarray:
        return np.array([np.mean(self.counts == n) for n in range(upto + 1)])


LossSource = Union[LossDistribution, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def episode_counts(cfg: AepConfig, rng) -> np.ndarray:
    """Episodes per replication: Poisson(upsilon) or the forced count."""
    if cfg.forced_count is not None:
        return np.full(cfg.n_outer, int(cfg.forced_count))
    gen = rng.child(AEP_STREAM).generator() if isinstance(rng, RngStream) else _gen(rng)
    return gen.poisson(cfg.upsilon, cfg.n_outer)


def _compound(losses: LossSource, cfg: AepConfig, rng) -> AepResult:
    counts = episode_counts(cfg, rng)
    n = int(counts.sum())
    if n == 0:
        ep = np.zeros(0)
    elif callable(losses):
        ep = np.asarray(losses(np.arange(n)), dtype=float)
    else:
        pool = losses.samples if isinstance(losses, LossDistribution) else np.asarray(losses, dtype=float)
        if pool.size == 0:
            raise ValueError("empty loss pool")
        gen = rng.child(AEP_STREAM, 1).generator() if isinstance(rng, RngStream) else _gen(rng)
        ep = pool[gen.integers(0, pool.size, n)]
    owner = np.repeat(np.arange(cfg.n_outer), counts)
    totals = np.bincount(owner, weights=ep, minlength=cfg.n_outer) if n else np.zeros(cfg.n_outer)
    x = np.asarray(cfg.thresholds, dtype=float)
    st = np.sort(totals)
    prob = 1.0 - np.searchsorted(st, x, side="right") / cfg.n_outer
    return AepResult(x, prob, counts, totals)


def aep_exact(episode_losses: LossSource, cfg: AepConfig, rng) -> AepResult:
    """AEP(x) = share of replications whose summed episode losses exceed x.

    ``episode_losses`` is either a callback mapping episode indices to freshly
    simulated losses (resimulation) or a loss pool that is resampled with
    replacement (bootstrap).
    """
    return _compound(episode_losses, cfg, rng)


def aep_approx(firms: Sequence[Firm], contagion, cfg: AepConfig, rng, severity_mean: float,
               grid: TimeGrid) -> AepResult:
    """AEP of the idiosyncratic-risk-free loss.

    Args:
        firms: Portfolio.
        contagion: Callback mapping episode indices to approximate losses, or
            a tuple ``(force, a, gamma1)`` of ``(M, n_points)`` arrays from
            which episodes are drawn in order (cycling if needed).
    """
    if callable(contagion):
        return _compound(contagion, cfg, rng)
    force, a, gamma1 = (np.atleast_2d(np.asarray(v, dtype=float)) for v in contagion)
    book = PortfolioBook(firms)
    vals = np.array([book.approx_loss(force[m], a[m], gamma1[m], grid, severity_mean) for m in range(force.shape[0])])
    return _compound(lambda idx: vals[idx % vals.size], cfg, rng)


# ---------------------------------------------------------------------------
# scenario engine


class PortfolioBook:
    """Flat subunit arrays for a list of firms."""

    def __init__(self, firms: Sequence[Firm]):
        self.firms = list(firms)
        self.sizes = np.array([f.size for f in self.firms], dtype=int)
        self.z0 = np.concatenate([f.z0 for f in self.firms]) if self.firms else np.zeros(0)
        self.drift = np.concatenate([f.drift for f in self.firms]) if self.firms else np.zeros(0)
        self.vol = np.concatenate([f.vol for f in self.firms]) if self.firms else np.zeros(0)
        self.rho = np.array([f.rho for f in self.firms], dtype=float)
        self.firm_of = np.repeat(np.arange(self.sizes.size), self.sizes)
        self.starts = np.concatenate(([0], np.cumsum(self.sizes)[:-1])).astype(int)
        self.K = int(self.sizes.max()) if self.sizes.size else 1

    @property
    def n_subunits(self) -> int:
        return int(self.sizes.sum())

    def undisturbed_revenue(self, grid: TimeGrid) -> np.ndarray:
        """Expected no-attack revenue rate of the portfolio per grid point."""
        t = grid.points - grid.t0
        return np.exp(np.outer(t, self.drift)) @ self.z0

    def approx_loss(self, force, a, gamma1, grid: TimeGrid, severity_mean: float) -> float:
        """Sum of idiosyncratic-risk-free claims over all firms for one environment."""
        x = float(np.max(np.abs(self.drift)) * grid.horizon) if self.drift.size else 0.0
        n_terms = int(min(200, max(4, math.ceil(2.0 * math.e * x + 30))))
        total = 0.0
        powers = self.drift[:, None] ** np.arange(n_terms)[None, :]
        for k in np.unique(self.sizes):
            m = approx_claim_moments(int(k), force, a, gamma1 / _harm(int(k)), grid, n_terms)
            sel = self.sizes[self.firm_of] == k
            total += float(np.sum(self.z0[sel] * (powers[sel] @ m)))
        return severity_mean * total

    def paths(self, sub: np.ndarray, grid: TimeGrid, gen: np.random.Generator) -> np.ndarray:
        """No-attack revenue paths for the subunits of the firms containing ``sub``.

        Shocks are drawn firm by firm with the firm's equicorrelation.
        Returns paths for the requested subunits only, shape ``(len(sub), n_points)``.
        """
        firms = np.unique(self.firm_of[sub])
        sz = self.sizes[firms]
        idx = np.concatenate([np.arange(self.starts[f], self.starts[f] + self.sizes[f]) for f in firms])
        eps = gen.standard_normal((idx.size, grid.n_steps))
        grp = np.repeat(np.arange(firms.size), sz)
        gstart = np.concatenate(([0], np.cumsum(sz)[:-1]))
        mean = np.add.reduceat(eps, gstart, axis=0) / sz[:, None]
        rho = self.rho[firms]
        a = np.sqrt(np.maximum(1.0 - rho, 0.0))[grp, None]
        b = np.sqrt(np.maximum(1.0 + (sz - 1) * rho, 0.0))[grp, None]
        m = mean[grp]
        shocks = a * (eps - m) + b * m
        b_path = np.zeros((idx.size, grid.n_points))
        np.cumsum(shocks * math.sqrt(grid.step), axis=1, out=b_path[:, 1:])
        t = grid.points - grid.t0
        mu, sig, z0 = self.drift[idx, None], self.vol[idx, None], self.z0[idx, None]
        full = z0 * np.exp((mu - 0.5 * sig**2) * t + sig * b_path)
        pos = np.searchsorted(idx, sub)
        return full[pos]


def _harm(k: int) -> float:
    return float(np.sum(1.0 / np.arange(1, k + 1)))


def daily_claims(tau, delta, severity, paths, grid: TimeGrid) -> np.ndarray:
    """Per-subunit claims on each grid cell by the trapezoid rule.

    Each cell integral covers ``[max(t_u, tau), min(t_{u+1}, tau + delta, T)]``;
    the no-attack path is interpolated log-linearly at window endpoints.

    Returns:
        Array ``(n_infected, n_steps)``.
    """
    n = tau.size
    out = np.zeros((n, grid.n_steps))
    if n == 0:
        return out
    end = np.minimum(tau + delta, grid.end)
    first = np.clip(np.floor((tau - grid.t0) / grid.step).astype(int), 0, grid.n_steps - 1)
    span = int(np.max(np.ceil((end - tau) / grid.step))) + 1
    logp = np.log(paths)
    rows = np.arange(n)
    for d in range(span):
        c = first + d
        ok = c < grid.n_steps
        cc = np.minimum(c, grid.n_steps - 1)
        left = grid.t0 + cc * grid.step
        lo = np.maximum(left, tau)
        hi = np.minimum(left + grid.step, end)
        ok &= hi > lo
        if not np.any(ok):
            continue
        l0, l1 = logp[rows, cc], logp[rows, cc + 1]
        wl = (lo - left) / grid.step
        wh = (hi - left) / grid.step
        zl = np.exp((1 - wl) * l0 + wl * l1)
        zh = np.exp((1 - wh) * l0 + wh * l1)
        val = severity * 0.5 * (hi - lo) * (zl + zh)
        out[rows[ok], cc[ok]] = val[ok]
    return out


@dataclass
class EpisodeBatch:
    """Aggregated outputs of many simulated episodes.

    Attributes:
        daily_losses: Portfolio claim per scenario and grid cell, ``(M, n_steps)``.
        approx_losses: Idiosyncratic-risk-free total loss per scenario (optional).
        firm_survival: Count of firms never infected per size, summed over scenarios.
        firm_counts: Number of firms per size in the portfolio.
        infected_subunits: Total infected subunits per scenario and day.
        expected_loss_rate: Scenario mean of sum pi z0 e^{mu t} 1{active} per day.
        undisturbed: Expected no-attack revenue per day.
    """

    grid: TimeGrid
    daily_losses: np.ndarray
    approx_losses: Optional[np.ndarray]
    firm_survival: np.ndarray
    firm_counts: np.ndarray
    infected_subunits: np.ndarray
    expected_loss_rate: np.ndarray
    undisturbed: np.ndarray
    mean_s: np.ndarray
    mean_i: np.ndarray
    mean_r: np.ndarray
    mean_force: np.ndarray

    @property
    def n_scenarios(self) -> int:
        return self.daily_losses.shape[0]

    @property
    def total_losses(self) -> np.ndarray:
        return self.daily_losses.sum(axis=1)

    def loss_distribution(self, t_from: Optional[float] = None, t_to: Optional[float] = None) -> LossDistribution:
        g = self.grid
        a = 0 if t_from is None else int(round((t_from - g.t0) / g.step))
        b = g.n_steps if t_to is None else int(round((t_to - g.t0) / g.step))
        return LossDistribution(self.daily_losses[:, a:b].sum(axis=1))

    def no_infection_probability(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.firm_survival / (self.firm_counts * self.n_scenarios)

    def expected_output(self) -> np.ndarray:
        return self.undisturbed - self.expected_loss_rate


def simulate_episodes(firms: Sequence[Firm], theta: ThetaSpec, initial: SirState, grid: TimeGrid, rng: RngStream,
                      n_scenarios: int, severity=(50.0, 10.0), substeps: int = 1, total_firms: Optional[float] = None,
                      with_approx: bool = False, start: int = 0) -> EpisodeBatch:
    """Simulate episodes ``start .. start + n_scenarios - 1``.

    Scenario m uses contagion block ``m // SCENARIO_BLOCK`` and its own firm
    stream, so its outcome is the same whatever range it is simulated in.
    """
    book = PortfolioBook(firms)
    K = initial.K
    if book.sizes.size and book.K > K:
        raise ValueError("portfolio has firms larger than the SIR size groups")
    h = theta.h_star if total_firms is None else total_firms
    M = int(n_scenarios)
    daily = np.zeros((M, grid.n_steps))
    approx = np.zeros(M) if with_approx else None
    surv = np.zeros(K)
    counts = np.bincount(book.sizes, minlength=K + 1)[1:].astype(float)
    j_sub = np.zeros((M, grid.n_points))
    sum_s, sum_i, sum_r = (np.zeros((grid.n_points, K)) for _ in range(3))
    sum_y = np.zeros(grid.n_points)
    loss_rate = np.zeros(grid.n_points)
    t = grid.points - grid.t0
    pi_mean = severity[0] / (severity[0] + severity[1])
    hk = np.cumsum(1.0 / np.arange(1, K + 1))
    stop = start + M
    b = start
    while b < stop:
        e = min(stop, (b // SCENARIO_BLOCK + 1) * SCENARIO_BLOCK)
        cb = simulate_contagion(theta, initial, grid, rng, b, e, substeps, h)
        for r in range(e - b):
            m = b + r
            row = m - start
            force = cb.sir.force[r]
            j_sub[row] = infected_subunits(cb.sir.i[r], h)
            sum_s += cb.sir.s[r]
            sum_i += cb.sir.i[r]
            sum_r += cb.sir.r[r]
            sum_y += force
            if book.n_subunits == 0:
                continue
            gamma_k = cb.gamma1[r][:, None] / hk[None, :]
            gen = rng.child(FIRM_STREAM, m).generator()
            tau, delta, sev, _src = infection_times(book.sizes, force, cb.a[r], gamma_k, grid, gen, severity)
            ftau = np.minimum.reduceat(tau, book.starts)
            surv += np.bincount(book.sizes[ftau > grid.end], minlength=K + 1)[1:]
            inf = np.nonzero(tau <= grid.end)[0]
            if inf.size:
                paths = book.paths(inf, grid, gen)
                daily[row] = daily_claims(tau[inf], delta[inf], sev[inf], paths, grid).sum(axis=0)
                act = (tau[inf][:, None] <= grid.points) & (grid.points < (tau + delta)[inf][:, None])
                loss_rate += np.sum(sev[inf][:, None] * act * book.z0[inf, None]
                                    * np.exp(book.drift[inf, None] * t), axis=0)
            if with_approx:
                approx[row] = book.approx_loss(force, cb.a[r], cb.gamma1[r], grid, pi_mean)
        b = e
    return EpisodeBatch(grid, daily, approx, surv, counts, j_sub, loss_rate / M,
                        book.undisturbed_revenue(grid), sum_s / M, sum_i / M, sum_r / M, sum_y / M)


def expected_output(firms: Sequence[Firm], batch: EpisodeBatch, t: Optional[float] = None):
    """E[O_t] = sum_ij z_ij0 e^{mu_ij t} (1 - mean_m pi_ij 1{active at t}).

    Returns the value at grid time ``t`` or the whole daily series.
    """
    out = batch.expected_output()
    if t is None:
        return out
    g = batch.grid
    return float(out[int(round((t - g.t0) / g.step))])

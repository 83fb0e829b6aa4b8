"""Parameter estimation: firm sizes, revenue dynamics and contagion coefficients."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import optimize

from .firmmodel import Firm, ZipfSpec
from .sir import SirBatch, SirState, harmonic, simulate_sir_batch
from .stochproc import SCENARIO_BLOCK, CirSpec, RngStream, TimeGrid, cir_paths, logistic

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.0
CONTAGION_STREAM = 1


@dataclass(frozen=True)
class ThetaSpec:
    """The six contagion hyper-coefficients.

    Each of the in-firm rate (tilde space), gamma_1 and beta_1 follows a CIR
    process started at its initial value, with long-run mean equal to that
    value and shared speed ``kappa_a`` and volatility ``sigma_a``.
    """

    kappa_a: float = 0.4474
    sigma_a: float = 0.0151
    a0: float = 0.3466
    gamma1_0: float = 0.6782
    beta1_0: float = 0.5471
    h_star: float = 14210.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")

    def cir_specs(self) -> dict:
        """CirSpec per driven parameter (raises on Feller violation)."""
        k, s = self.kappa_a, self.sigma_a
        return {
            "a_tilde": CirSpec(k, self.a0, s, self.a0),
            "gamma1": CirSpec(k, self.gamma1_0, s, self.gamma1_0),
            "beta1": CirSpec(k, self.beta1_0, s, self.beta1_0),
        }

    def feller_margin(self) -> float:
        """min over parameters of 2 kappa phi0 - sigma^2 (>= 0 when valid)."""
        return 2 * self.kappa_a * min(self.a0, self.gamma1_0, self.beta1_0) - self.sigma_a**2

    def as_vector(self) -> np.ndarray:
        return np.array([self.kappa_a, self.sigma_a, self.a0, self.gamma1_0, self.beta1_0, self.h_star])

    @classmethod
    def from_vector(cls, v) -> "ThetaSpec":
        return cls(*[float(x) for x in v])


@dataclass
class InfectionPanel:
    """Observed infected-firm counts ``counts[u, k-1]`` per day and size."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2:
            raise ValueError("counts must be a (days, sizes) array")
        if np.any(c < 0):
            raise ValueError("counts must be nonnegative")
        if not np.all(np.equal(np.mod(c, 1), 0)):
            raise ValueError("counts must be integers")
        self.counts = c.astype(float)

    @property
    def n_days(self) -> int:
        return self.counts.shape[0]

    @property
    def K(self) -> int:
        return self.counts.shape[1]

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, float(self.n_days - 1), 1.0)

    @classmethod
    def from_new_infections(cls, new_counts, duration_days) -> "InfectionPanel":
        """Convert daily new infections into currently infected counts.

        A firm reported on day u counts as infected on days u..u+d-1 where
        ``d = duration_days[k-1]`` (rounded up).
        """
        new = np.asarray(new_counts, dtype=float)
        cur = np.zeros_like(new)
        for k in range(new.shape[1]):
            d = max(1, int(math.ceil(duration_days[k])))
            cs = np.cumsum(new[:, k])
            lag = np.concatenate((np.zeros(d), cs))[: new.shape[0]]
            cur[:, k] = cs - lag
        return cls(np.rint(cur))


# ---------------------------------------------------------------------------
# contagion scenarios


@dataclass
class ContagionBatch:
    """Environmental paths and SIR solutions for a range of scenarios."""

    a: np.ndarray  # in-firm probability, (M, n_points)
    gamma1: np.ndarray
    beta1: np.ndarray
    sir: SirBatch
    total_firms: float

    def gamma_by_size(self, m: int) -> np.ndarray:
        K = self.sir.s.shape[-1]
        return self.gamma1[m][:, None] / harmonic(K)[None, :]


def scale_rates(gamma1, beta1, K: int):
    """Harmonic scaling gamma_k = gamma_1 / H_k and beta_k = beta_1 / H_k."""
    if np.any(np.asarray(gamma1) <= 0) or np.any(np.asarray(beta1) <= 0):
        raise ValueError("rates must be positive")
    h = harmonic(K)
    g = np.asarray(gamma1, dtype=float)[..., None] / h
    b = np.asarray(beta1, dtype=float)[..., None] / h
    return g, b


def theta_paths(theta: ThetaSpec, grid: TimeGrid, rng: RngStream, start: int, stop: int):
    """CIR paths of (a_tilde, gamma_1, beta_1) for scenarios ``start..stop-1``.

    Scenarios are drawn in fixed blocks, each with its own stream, so a
    scenario's paths do not depend on how many scenarios are requested.
    """
    theta.cir_specs()  # Feller check
    x0 = np.array([theta.a0, theta.gamma1_0, theta.beta1_0])
    b0, b1 = start // SCENARIO_BLOCK, (stop - 1) // SCENARIO_BLOCK + 1
    chunks = []
    for b in range(b0, b1):
        gen = rng.child(CONTAGION_STREAM, b).generator()
        x = np.repeat(x0[:, None], SCENARIO_BLOCK, axis=1)
        chunks.append(cir_paths(x, theta.kappa_a, x, theta.sigma_a, grid.step, grid.n_steps, gen))
    paths = np.concatenate(chunks, axis=1)[:, start - b0 * SCENARIO_BLOCK: stop - b0 * SCENARIO_BLOCK]
    return paths[0], paths[1], paths[2]


def simulate_contagion(theta: ThetaSpec, initial: SirState, grid: TimeGrid, rng: RngStream,
                       start: int = 0, stop: int = 1, substeps: int = 1,
                       total_firms: Optional[float] = None) -> ContagionBatch:
    """Environmental paths and SIR trajectories for a scenario range."""
    a_t, g1, b1 = theta_paths(theta, grid, rng, start, stop)
    K = initial.K
    g, b = scale_rates(np.maximum(g1, 1e-300), np.maximum(b1, 1e-300), K)
    a = logistic(a_t)
    sir = simulate_sir_batch(initial, b, g, a, grid, substeps)
    return ContagionBatch(a, g1, b1, sir, theta.h_star if total_firms is None else total_firms)


def initial_state(populations, infected_firms) -> SirState:
    """Initial fractions with zero removed."""
    return SirState.from_counts(populations, infected_firms)


def allocate_initial_infected(n_subunits: float, populations, integer: bool = False) -> np.ndarray:
    """Split infected subunits across sizes proportionally to k h_k, as firm counts.

    With ``integer=True`` firm counts are rounded (largest remainder on
    subunits is not attempted; plain rounding per size).
    """
    h = np.asarray(populations, dtype=float)
    k = np.arange(1, h.size + 1)
    w = k * h / np.sum(k * h)
    firms = n_subunits * w / k
    return np.rint(firms) if integer else firms


# ---------------------------------------------------------------------------
# firm sizes


def fit_zipf(sizes, K: int, method: str = "nls") -> ZipfSpec:
    """Fit the truncated power law ``q k^-(1+a)`` to observed firm sizes.

    Args:
        sizes: Observed sizes in 1..K.
        K: Largest size.
        method: ``"nls"`` least squares on relative frequencies (default),
            ``"loglog"`` least squares on log frequencies with empty bins
            dropped, or ``"mle"`` maximum likelihood of the exponent.
    """
    sizes = np.asarray(sizes, dtype=int)
    if sizes.size == 0:
        raise ValueError("no sizes given")
    if sizes.min() < 1 or sizes.max() > K:
        raise ValueError("sizes must lie in 1..K")
    counts = np.bincount(sizes, minlength=K + 1)[1:]
    return fit_zipf_counts(counts, method)


def fit_zipf_counts(counts, method: str = "nls") -> ZipfSpec:
    """Same as ``fit_zipf`` from a histogram ``counts[k-1]``."""
    counts = np.asarray(counts, dtype=float)
    K = counts.size
    if np.count_nonzero(counts) < 2:
        raise ValueError("degenerate size sample: need at least two distinct sizes")
    freq = counts / counts.sum()
    k = np.arange(1, K + 1, dtype=float)
    keep = freq > 0
    slope, icpt = np.polyfit(np.log(k[keep]), np.log(freq[keep]), 1)
    a_ll, q_ll = -slope - 1.0, float(np.exp(icpt))
    if method == "loglog":
        return ZipfSpec(a_ll, q_ll, K)
    if method == "nls":
        def resid(p):
            return p[1] * k ** (-(1.0 + p[0])) - freq
        sol = optimize.least_squares(resid, [max(a_ll, 0.1), q_ll], xtol=1e-15, ftol=1e-15, gtol=1e-15)
        return ZipfSpec(float(sol.x[0]), float(sol.x[1]), K)
    if method == "mle":
        logk = np.log(k)

        def nll(a):
            w = k ** (-(1.0 + a))
            return float(np.sum(counts * (1.0 + a) * logk) + counts.sum() * np.log(w.sum()))
        a = optimize.minimize_scalar(nll, bounds=(1e-6, 10.0), method="bounded", options={"xatol": 1e-10}).x
        w = k ** (-(1.0 + a))
        return ZipfSpec(float(a), float(1.0 / w.sum()), K)
    raise ValueError(f"unknown method {method!r}")


def allocate_populations(h_star: float, zipf: ZipfSpec, rule: str = "fitted") -> np.ndarray:
    """Initial firm count per size group.

    Args:
        h_star: Total firm population.
        zipf: Fitted size law.
        rule: ``"fitted"`` gives ``ceil(h_star * q * k^-(1+a))`` (the fitted
            frequency curve); ``"normalized"`` gives
            ``floor(h_star * k^-a / sum_j j^-a)``.
    """
    if h_star < 1:
        raise ValueError("h_star must be at least 1")
    k = zipf.sizes.astype(float)
    if rule == "fitted":
        # small tolerance keeps exact products from rounding up
        return np.ceil(h_star * zipf.frequency(k) - 1e-9).astype(np.int64)
    if rule == "normalized":
        w = k ** (-zipf.exponent)
        return np.floor(h_star * w / w.sum() + 1e-9).astype(np.int64)
    raise ValueError(f"unknown rule {rule!r}")


# ---------------------------------------------------------------------------
# firm proxies and revenue dynamics


def build_firm_proxy(revenues: Mapping[str, Sequence[float]], sectors: Optional[Mapping[str, str]] = None,
                     rho: float = 0.0, vol_floor: float = 1e-8) -> list[Firm]:
    """Firms from annual revenue panels.

    The size is ``ceil(Z_i1 / mean_i Z_i1)`` and each subunit gets an equal
    share of revenue. Subunit dynamics come from ``estimate_bs``; the initial
    daily revenue rate is the last annual value divided by 365.

    Args:
        revenues: Firm id to annual revenue series (oldest first).
        sectors: Optional firm id to sector label.
        rho: Within-firm correlation for every firm.
    """
    ids = list(revenues)
    if not ids:
        raise ValueError("empty revenue panel")
    series = {i: np.asarray(revenues[i], dtype=float) for i in ids}
    for i, s in series.items():
        if np.any(s <= 0):
            raise ValueError(f"firm {i}: nonpositive revenue")
    first = np.array([series[i][0] for i in ids])
    zbar = first.mean()
    firms = []
    for i, z1 in zip(ids, first):
        K = proxy_size(z1, zbar)
        sub = series[i] / K
        mu, sigma = estimate_bs(sub, vol_floor=vol_floor)
        z0 = sub[-1] / DAYS_PER_YEAR
        firms.append(Firm(str(i), (sectors or {}).get(i, ""), np.full(K, z0), np.full(K, mu), np.full(K, sigma),
                          rho if K > 1 else 0.0))
    return firms


def proxy_size(z1: float, zbar: float) -> int:
    """Smallest integer >= z1 / zbar (with a guard against round-off)."""
    return max(1, int(math.ceil(z1 / zbar - 1e-12)))


def estimate_bs(series, vol_floor: float = 1e-8, days_per_year: float = DAYS_PER_YEAR):
    """Daily GBM coefficients from an annual revenue series.

    sigma_year is the sample standard deviation of log-returns and
    mu_year = mean log-return + sigma_year^2 / 2, both converted to days.

    Returns:
        ``(mu_daily, sigma_daily)``.
    """
    z = np.asarray(series, dtype=float)
    if z.size < 3:
        raise ValueError("need at least three observations")
    if np.any(z <= 0):
        raise ValueError("revenues must be positive")
    r = np.diff(np.log(z))
    sigma_y = float(np.std(r, ddof=1))
    mu_y = float(np.mean(r)) + 0.5 * sigma_y**2
    sigma_d = sigma_y / math.sqrt(days_per_year)
    if sigma_d < vol_floor:
        warnings.warn("degenerate volatility; applying floor", RuntimeWarning, stacklevel=2)
        sigma_d = vol_floor
    return mu_y / days_per_year, sigma_d


# ---------------------------------------------------------------------------
# infection panel priors


def infection_proxy(sector_rates: Mapping[str, float], total_infections: int,
                    sector_size_table: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Distribute infections over firm sizes using sector shares.

    Each sector receives ``rate * total`` infections, split over sizes in
    proportion to its firm-size histogram. Integer cells are obtained by the
    largest-remainder method on the whole table.

    Returns:
        ``(n_sectors, K)`` integer array ordered like ``sector_rates``.
    """
    if not sector_size_table or not sector_rates:
        raise ValueError("empty sector table")
    names = list(sector_rates)
    rates = np.array([sector_rates[s] for s in names], dtype=float)
    # published shares are rounded percentages, so allow a small excess over 1
    if np.any(rates < 0) or rates.sum() > 1 + 1e-3:
        raise ValueError("sector rates must be nonnegative and sum to at most 1")
    table = np.array([np.asarray(sector_size_table[s], dtype=float) for s in names])
    row = table.sum(axis=1, keepdims=True)
    if np.any(row <= 0):
        raise ValueError("every sector needs at least one firm")
    target = total_infections * rates[:, None] * table / row
    return largest_remainder(target)


def largest_remainder(target: np.ndarray) -> np.ndarray:
    """Round a nonnegative array to integers preserving the rounded total."""
    target = np.asarray(target, dtype=float)
    base = np.floor(target)
    short = int(round(target.sum() - base.sum()))
    if short > 0:
        frac = (target - base).ravel()
        order = np.argsort(-frac, kind="stable")[:short]
        flat = base.ravel()
        flat[order] += 1
        base = flat.reshape(target.shape)
    return base.astype(np.int64)


# ---------------------------------------------------------------------------
# forward-model objective


def populations_for(theta: ThetaSpec, zipf: ZipfSpec) -> np.ndarray:
    """Continuous population per size used inside the objective."""
    return theta.h_star * zipf.frequency()


def objective_j2(theta: ThetaSpec, panel: InfectionPanel, zipf: ZipfSpec, M: int, rng: RngStream,
                 reference_population: Optional[float] = None, substeps: int = 1) -> float:
    """Mean over scenarios of the squared error between infected fractions.

    Observed and simulated counts are both divided by the same
    ``reference_population`` (``theta.h_star`` when omitted), so the value is
    comparable across theta when a fixed reference is given.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    theta.cir_specs()
    resid = j2_residuals(theta, panel, zipf, M, rng, reference_population, substeps)
    return float(np.sum(resid**2) / M)


def j2_residuals(theta, panel, zipf, M, rng, reference_population=None, substeps=1) -> np.ndarray:
    """Residuals ``(M, days, K)`` of simulated minus observed fractions."""
    h = populations_for(theta, zipf)
    infected0 = panel.counts[0]
    if np.any(infected0 > h):
        raise ValueError("initial infected exceed the size-group population")
    state = SirState.from_counts(h, infected0)
    ref = theta.h_star if reference_population is None else reference_population
    batch = simulate_contagion(theta, state, panel.grid, rng, 0, M, substeps)
    sim = batch.sir.i * h.sum()
    return (sim - panel.counts[None]) / ref


@dataclass
class CalibrationConfig:
    """Optimizer settings.

    Attributes:
        n_scenarios: Scenarios per objective evaluation.
        n_starts: Random multi-starts of Nelder-Mead.
        max_evals: Evaluation budget per start.
        lower, upper: Box for (kappa, sigma, a0, gamma1, beta1, h_star).
        xatol, fatol: Nelder-Mead tolerances (log-parameter space and relative objective).
    """

    n_scenarios: int = 100
    n_starts: int = 8
    max_evals: int = 3000
    lower: tuple = (0.05, 1e-3, 0.01, 0.05, 0.05, 1000.0)
    upper: tuple = (2.0, 0.1, 3.0, 3.0, 3.0, 1e5)
    xatol: float = 1e-4
    fatol: float = 1e-10
    feller_margin: float = 0.0
    substeps: int = 1
    reference_population: Optional[float] = None


@dataclass
class CalibrationResult:
    theta: ThetaSpec
    j2: float
    converged: bool
    starts: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    stderr: Optional[np.ndarray] = None
    unidentifiable: bool = False
    n_evals: int = 0

    def to_dict(self) -> dict:
        d = {
            "theta": asdict(self.theta),
            "j2": self.j2,
            "converged": self.converged,
            "unidentifiable": self.unidentifiable,
            "n_evals": self.n_evals,
            "starts": self.starts,
        }
        if self.stderr is not None:
            d["stderr"] = dict(zip(asdict(self.theta), [float(x) for x in self.stderr]))
        return d


def calibrate(panel: InfectionPanel, zipf: ZipfSpec, cfg: CalibrationConfig = CalibrationConfig(),
              rng: RngStream = RngStream(0), x0: Optional[ThetaSpec] = None) -> CalibrationResult:
    """Fit theta by Nelder-Mead on log-parameters with random multi-starts.

    Every objective evaluation reuses the same scenario streams (common random
    numbers). Points outside the box or violating the Feller margin receive a
    large penalty. The best start wins; its convergence flag is reported.
    """
    lo, hi = np.log(cfg.lower), np.log(cfg.upper)
    ref = cfg.reference_population
    if ref is None:
        ref = (x0.h_star if x0 is not None else float(np.sqrt(cfg.lower[5] * cfg.upper[5])))
    if not np.any(panel.counts):
        log.warning("panel has no infections; theta is unidentifiable")
    h_min = float(np.max(panel.counts[0] / zipf.frequency())) if np.any(panel.counts[0]) else 0.0
    trace = []

    def f(z):
        if np.any(z < lo) or np.any(z > hi):
            return 1e6 + float(np.sum(np.maximum(lo - z, 0) + np.maximum(z - hi, 0)))
        v = np.exp(z)
        th = ThetaSpec.from_vector(v)
        margin = th.feller_margin() - cfg.feller_margin
        if margin < 0:
            return 1e6 - margin
        if th.h_star <= h_min:
            return 1e6 + (h_min - th.h_star)
        val = objective_j2(th, panel, zipf, cfg.n_scenarios, rng, ref, cfg.substeps)
        trace.append((v.tolist(), val))
        return val

    gen = rng.child(99).generator()
    starts = []
    if x0 is not None:
        starts.append(np.log(x0.as_vector()))
    while len(starts) < cfg.n_starts:
        z = lo + (hi - lo) * gen.random(6)
        th = ThetaSpec.from_vector(np.exp(z))
        if th.feller_margin() > cfg.feller_margin and th.h_star > h_min:
            starts.append(z)
    results = []
    for z0 in starts:
        res = optimize.minimize(f, z0, method="Nelder-Mead",
                                options={"maxfev": cfg.max_evals, "xatol": cfg.xatol, "fatol": cfg.fatol,
                                         "adaptive": True})
        results.append(res)
        log.info("start done: J2=%.6g converged=%s nfev=%d", res.fun, res.success, res.nfev)
    best = min(results, key=lambda r: r.fun)
    theta = ThetaSpec.from_vector(np.exp(best.x))
    stderr = _gauss_newton_stderr(theta, panel, zipf, cfg, rng, ref)
    return CalibrationResult(
        theta=theta,
        j2=float(best.fun),
        converged=bool(best.success) and best.fun < 1e6,
        starts=[{"theta": np.exp(r.x).tolist(), "j2": float(r.fun), "converged": bool(r.success)} for r in results],
        trace=trace,
        stderr=stderr,
        unidentifiable=not np.any(panel.counts),
        n_evals=int(sum(r.nfev for r in results)),
    )


def _gauss_newton_stderr(theta, panel, zipf, cfg, rng, ref) -> Optional[np.ndarray]:
    """Approximate standard errors from the residual Jacobian at the optimum."""
    try:
        v = theta.as_vector()
        r0 = j2_residuals(theta, panel, zipf, cfg.n_scenarios, rng, ref, cfg.substeps).mean(axis=0).ravel()
        J = np.empty((r0.size, v.size))
        for p in range(v.size):
            step = 1e-4 * v[p]
            w = v.copy()
            w[p] += step
            r1 = j2_residuals(ThetaSpec.from_vector(w), panel, zipf, cfg.n_scenarios, rng, ref,
                              cfg.substeps).mean(axis=0).ravel()
            J[:, p] = (r1 - r0) / step
        dof = max(r0.size - v.size, 1)
        s2 = float(r0 @ r0) / dof
        cov = s2 * np.linalg.pinv(J.T @ J)
        return np.sqrt(np.clip(np.diag(cov), 0, None))
    except (ValueError, np.linalg.LinAlgError):
        return None

"""Firms, subunit revenues, infection times and claims.

Revenue rates ``z`` are in currency per day, so integrating a claim rate
over days gives currency.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .stochproc import TimeGrid, _gen, cumulative_hazard, invert_hazard, sample_severity

NONE, PRIMARY, SECONDARY = 0, 1, 2


@dataclass
class Firm:
    """A policyholder made of ``size`` revenue-generating subunits.

    Attributes:
        id: Identifier.
        sector: Industry label.
        z0: Initial revenue rate per subunit.
        drift: Daily drift per subunit.
        vol: Daily volatility per subunit.
        rho: Correlation between the subunits' Brownian drivers.
    """

    id: str
    sector: str
    z0: np.ndarray
    drift: np.ndarray
    vol: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        self.z0 = np.atleast_1d(np.asarray(self.z0, dtype=float))
        self.drift = np.atleast_1d(np.asarray(self.drift, dtype=float))
        self.vol = np.atleast_1d(np.asarray(self.vol, dtype=float))
        if not (self.z0.shape == self.drift.shape == self.vol.shape):
            raise ValueError(f"firm {self.id}: subunit coefficient lengths differ")
        if np.any(self.z0 <= 0):
            raise ValueError(f"firm {self.id}: z0 must be positive")
        if np.any(self.vol <= 0):
            raise ValueError(f"firm {self.id}: vol must be positive")
        if self.size > 1 and not (-1.0 / (self.size - 1) < self.rho <= 1.0):
            raise ValueError(f"firm {self.id}: rho={self.rho} outside (-1/(K-1), 1]")

    @property
    def size(self) -> int:
        return self.z0.size

    @property
    def subunits(self):
        return list(zip(self.z0, self.drift, self.vol))

    def expected_revenue(self, t) -> np.ndarray:
        """No-attack expected revenue rate per subunit at day offset ``t``."""
        return self.z0 * np.exp(self.drift * t)


@dataclass
class InfectionRecord:
    """Infection outcome of one firm in one scenario.

    ``tau`` holds the sentinel ``T+1`` for subunits never infected.
    """

    tau: np.ndarray
    delta: np.ndarray
    severity: np.ndarray
    source: np.ndarray
    horizon_end: float

    @property
    def infected(self) -> np.ndarray:
        return self.tau <= self.horizon_end

    @property
    def firm_tau(self) -> float:
        return float(self.tau.min())

    def active(self, t) -> np.ndarray:
        """Mask of subunits with ``tau <= t < tau + delta``."""
        return (self.tau <= t) & (t < self.tau + self.delta)


@dataclass(frozen=True)
class ZipfSpec:
    """Truncated power law for firm sizes.

    The fitted curve is ``q * k^-(1+a)`` on frequencies; sampling uses its
    normalization over ``1..max_size``.
    """

    exponent: float
    scale: float = 1.0
    max_size: int = 12

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("exponent must be positive")
        if not 0 < self.scale:
            raise ValueError("scale must be positive")
        if self.max_size < 1:
            raise ValueError("max_size must be at least 1")

    @property
    def sizes(self) -> np.ndarray:
        return np.arange(1, self.max_size + 1)

    def frequency(self, k=None) -> np.ndarray:
        k = self.sizes if k is None else np.asarray(k, dtype=float)
        return self.scale * np.power(k, -(1.0 + self.exponent))

    def pmf(self) -> np.ndarray:
        w = np.power(self.sizes.astype(float), -(1.0 + self.exponent))
        return w / w.sum()

    def density(self) -> np.ndarray:
        """Unnormalized discrete Pareto form ``q a k^-(1+a) / (1 - K^-a)``."""
        a, K = self.exponent, self.max_size
        denom = 1.0 - K ** (-a) if K > 1 else 1.0
        return self.scale * a * np.power(self.sizes.astype(float), -(1.0 + a)) / denom


def sample_firm_sizes(spec: ZipfSpec, count: int, rng) -> np.ndarray:
    """Draw ``count`` iid firm sizes from the normalized power law."""
    return _gen(rng).choice(spec.sizes, size=count, p=spec.pmf())


# ---------------------------------------------------------------------------
# infection times


def _check_len(name, arr, grid: TimeGrid):
    if arr.shape[-1] not in (grid.n_points, grid.n_steps):
        raise ValueError(f"{name} length {arr.shape[-1]} does not match grid ({grid.n_points} points)")


def infection_times(sizes, force, a_path, gamma_by_size, grid: TimeGrid, gen: np.random.Generator,
                    severity=(50.0, 10.0)):
    """Infection times for all subunits of many firms in one scenario.

    Args:
        sizes: Firm sizes, shape ``(H,)``. Subunits are laid out firm by firm.
        force: Force of infection per grid point.
        a_path: In-firm attack probability per grid point.
        gamma_by_size: Recovery rate per grid point and size, ``(n_points, K)``.
        grid: Time grid.
        gen: numpy Generator.
        severity: Beta shapes of the loss fraction.

    Returns:
        ``(tau, delta, severity, source)`` flat arrays over subunits.
    """
    sizes = np.asarray(sizes, dtype=int)
    force = np.asarray(force, dtype=float)
    a_path = np.asarray(a_path, dtype=float)
    gamma_by_size = np.asarray(gamma_by_size, dtype=float)
    n_sub = int(sizes.sum())
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    firm_of = np.repeat(np.arange(sizes.size), sizes)

    y = force[: grid.n_steps]
    lam = cumulative_hazard(y, grid)
    e = gen.standard_exponential(n_sub)
    u_sec = gen.random(n_sub)
    sev = sample_severity(severity[0], severity[1], gen, n_sub)

    tau = invert_hazard(lam, y, grid, e)
    source = np.where(np.isfinite(tau), PRIMARY, NONE)
    firm_tau = np.minimum.reduceat(tau, starts) if n_sub else np.empty(0)
    ft = firm_tau[firm_of]
    hit = np.isfinite(ft)
    cell = np.zeros(n_sub, dtype=np.int64)
    cell[hit] = np.clip(np.floor((ft[hit] - grid.t0) / grid.step), 0, grid.n_steps - 1).astype(np.int64)
    sec = hit & (tau > ft) & (u_sec < a_path[cell])
    tau = np.where(sec, ft, tau)
    source = np.where(sec, SECONDARY, source)

    infected = np.isfinite(tau)
    own_cell = np.zeros(n_sub, dtype=np.int64)
    own_cell[infected] = np.clip(np.floor((tau[infected] - grid.t0) / grid.step), 0, grid.n_steps - 1).astype(np.int64)
    g = gamma_by_size[own_cell, sizes[firm_of] - 1]
    delta = np.where(infected, 1.0 / g, 0.0)
    tau = np.where(infected, tau, grid.sentinel)
    return tau, delta, sev, source


def simulate_infection_times(firm: Firm, force, a_path, gamma_paths, grid: TimeGrid, rng,
                             severity=(50.0, 10.0)) -> InfectionRecord:
    """Primary Cox infections plus one round of in-firm secondary infections.

    Args:
        firm: The policyholder.
        force: Force of infection Y per grid point.
        a_path: In-firm attack probability per grid point.
        gamma_paths: Recovery rates, either ``(n_points,)`` for the firm's size
            group or ``(n_points, K)`` for all groups.
        grid: Time grid.
        rng: ``RngStream`` or Generator.
        severity: Beta shapes of the loss fraction.
    """
    force = np.asarray(force, dtype=float)
    a_path = np.asarray(a_path, dtype=float)
    gamma_paths = np.asarray(gamma_paths, dtype=float)
    for name, arr in (("force", force), ("a_path", a_path)):
        _check_len(name, arr, grid)
    if gamma_paths.ndim == 1:
        _check_len("gamma_paths", gamma_paths, grid)
        g = np.zeros((gamma_paths.size, firm.size))
        g[:, firm.size - 1] = gamma_paths
        gamma_paths = g
    elif gamma_paths.shape[0] not in (grid.n_points, grid.n_steps) or gamma_paths.shape[1] < firm.size:
        raise ValueError("gamma_paths shape does not match grid and firm size")
    tau, delta, sev, src = infection_times([firm.size], force, a_path, gamma_paths, grid, _gen(rng), severity)
    return InfectionRecord(tau, delta, sev, src, grid.end)


# ---------------------------------------------------------------------------
# marginal law of a subunit's infection time


def _cell_values(arr, grid: TimeGrid) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    _check_len("path", arr, grid)
    return arr[: grid.n_steps]


def _hazard_parts(size: int, force, a_path, grid: TimeGrid):
    y = _cell_values(force, grid)
    a = _cell_values(a_path, grid)
    lam = cumulative_hazard(y, grid)
    km1 = size - 1
    # (K-1) * int over each cell of Y e^{-(K-1) Lambda} (1 - a)
    gcell = (1 - a) * np.exp(-km1 * lam[:-1]) * -np.expm1(-km1 * y * grid.step) if km1 else np.zeros_like(y)
    gcum = np.concatenate(([0.0], np.cumsum(gcell)))
    return y, a, lam, gcum


def _locate(u, grid: TimeGrid):
    u = np.asarray(u, dtype=float)
    c = np.clip(np.floor((u - grid.t0) / grid.step), 0, grid.n_steps - 1).astype(int)
    return u, c, np.clip(u - (grid.t0 + c * grid.step), 0.0, None)


def marginal_cdf_tau(size: int, force, a_path, u, grid: Optional[TimeGrid] = None):
    """P(tau_ij <= u | environment) for a subunit of a size-``size`` firm.

    F(u) = 1 - e^{-K Lambda_u} - (K-1) e^{-Lambda_u} int_0^u Y e^{-(K-1) Lambda}(1-a) ds,
    evaluated exactly for grid-wise constant Y and a.
    """
    if grid is None:
        grid = TimeGrid(0.0, float(len(force) - 1), 1.0)
    y, a, lam, gcum = _hazard_parts(size, force, a_path, grid)
    u, c, off = _locate(u, grid)
    lam_u = lam[c] + y[c] * off
    km1 = size - 1
    if km1:
        g_u = gcum[c] + (1 - a[c]) * np.exp(-km1 * lam[c]) * -np.expm1(-km1 * y[c] * off)
    else:
        g_u = 0.0
    f = 1.0 - np.exp(-size * lam_u) - np.exp(-lam_u) * g_u
    f = np.where(u <= grid.t0, 0.0, np.clip(f, 0.0, 1.0))
    return f if f.ndim else float(f)


def marginal_density_tau(size: int, force, a_path, u, grid: Optional[TimeGrid] = None):
    """Density of ``marginal_cdf_tau`` (right-continuous in u)."""
    if grid is None:
        grid = TimeGrid(0.0, float(len(force) - 1), 1.0)
    y, a, lam, gcum = _hazard_parts(size, force, a_path, grid)
    u, c, off = _locate(u, grid)
    lam_u = lam[c] + y[c] * off
    km1 = size - 1
    g_u = gcum[c] + ((1 - a[c]) * np.exp(-km1 * lam[c]) * -np.expm1(-km1 * y[c] * off) if km1 else 0.0)
    ek = np.exp(-size * lam_u)
    return y[c] * (size * ek - km1 * (1 - a[c]) * ek + np.exp(-lam_u) * g_u)


# ---------------------------------------------------------------------------
# revenues and claims


def _grid_index(t, grid: TimeGrid) -> int:
    idx = (t - grid.t0) / grid.step
    if abs(idx - round(idx)) > 1e-9 or not 0 <= round(idx) < grid.n_points:
        raise ValueError(f"t={t} is not a grid point")
    return int(round(idx))


def subunit_revenue(path, record: InfectionRecord, j: int, grid: TimeGrid) -> np.ndarray:
    """Revenue path of subunit ``j`` including the loss while infected."""
    path = np.asarray(path, dtype=float)
    t = grid.points
    on = (record.tau[j] <= t) & (t < record.tau[j] + record.delta[j])
    return np.where(on, (1.0 - record.severity[j]) * path, path)


def instantaneous_claim(firm: Firm, paths, record: InfectionRecord, t: float, grid: TimeGrid) -> float:
    """Claim rate c_t = sum_j pi_j 1{tau_j <= t < tau_j + delta_j} zbar_j(t)."""
    u = _grid_index(t, grid)
    z = np.asarray(paths, dtype=float)[:, u]
    return float(np.sum(record.severity * record.active(t) * z))


def _log_interp(t, paths, grid: TimeGrid):
    """Log-linear interpolation of positive paths at real times ``t`` (one per row)."""
    pos = (np.asarray(t, dtype=float) - grid.t0) / grid.step
    i0 = np.clip(np.floor(pos).astype(int), 0, grid.n_steps - 1)
    w = np.clip(pos - i0, 0.0, 1.0)
    rows = np.arange(paths.shape[0])
    lo, hi = paths[rows, i0], paths[rows, i0 + 1]
    return np.exp((1 - w) * np.log(lo) + w * np.log(hi))


def active_trapezoid(t_a, t_b, v_a, v_b, nodes_t=None, nodes_v=None):
    """Trapezoid of one active window; nodes strictly inside are optional."""
    if nodes_t is None or len(nodes_t) == 0:
        return 0.5 * (t_b - t_a) * (v_a + v_b)
    ts = np.concatenate(([t_a], nodes_t, [t_b]))
    vs = np.concatenate(([v_a], nodes_v, [v_b]))
    return float(np.sum(0.5 * np.diff(ts) * (vs[1:] + vs[:-1])))


def period_claim(firm: Firm, paths, record: InfectionRecord, t_from: float, t_to: float, grid: TimeGrid) -> float:
    """Total claim between ``t_from`` and ``t_to``.

    Per subunit, the composite trapezoid of ``pi * zbar`` over
    ``[max(t_from, tau), min(t_to, tau + delta)]`` with nodes at the grid
    points inside the window.
    """
    if not t_from < t_to:
        raise ValueError("t_from must be strictly less than t_to")
    paths = np.asarray(paths, dtype=float)
    total = 0.0
    pts = grid.points
    for j in range(firm.size):
        if not record.infected[j]:
            continue
        a = max(t_from, record.tau[j])
        b = min(t_to, record.tau[j] + record.delta[j], grid.end)
        if b <= a:
            continue
        va, vb = _log_interp(np.array([a, b]), paths[[j, j]], grid)
        inner = (pts > a) & (pts < b)
        total += record.severity[j] * active_trapezoid(a, b, va, vb, pts[inner], paths[j, inner])
    return total


def conditional_expected_claim(firm: Firm, force, a_path, gamma_path, t: float, severity_mean: float,
                               grid: Optional[TimeGrid] = None) -> float:
    """E[c_t | environment] = pi* sum_j z_j0 e^{mu_j t} P(tau <= t < tau + delta).

    ``gamma_path`` is the recovery rate of the firm's size group per grid
    point; a subunit infected in cell c recovers after ``1/gamma_c``.
    """
    if grid is None:
        grid = TimeGrid(0.0, float(len(force) - 1), 1.0)
    g = _cell_values(gamma_path, grid)
    t0 = grid.t0
    n_cells = int(np.clip(np.ceil((t - t0) / grid.step), 0, grid.n_steps))
    if n_cells == 0:
        return 0.0
    c = np.arange(n_cells)
    left = t0 + c * grid.step
    with np.errstate(divide="ignore"):
        lo = np.maximum(left, t - 1.0 / g[c])
    hi = np.minimum(left + grid.step, t)
    # tau in (lo, hi] keeps the subunit active at t
    on = hi > lo
    if not np.any(on):
        return 0.0
    f_hi = marginal_cdf_tau(firm.size, force, a_path, hi[on], grid)
    f_lo = marginal_cdf_tau(firm.size, force, a_path, lo[on], grid)
    prob = float(np.sum(np.maximum(f_hi - f_lo, 0.0)))
    return severity_mean * float(np.sum(firm.expected_revenue(t - t0))) * prob


_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _approx_nodes(size: int, force, a_path, gamma_path, grid: TimeGrid):
    """Quadrature nodes (day offsets), weights x density, and recovery ends.

    Each cell is split at the kink of ``min(T, u + 1/gamma)``.
    """
    g = _cell_values(gamma_path, grid)
    T = grid.horizon
    a = np.arange(grid.n_steps) * grid.step
    b = a + grid.step
    kink = T - 1.0 / g
    mid = np.where((a < kink) & (kink < b), kink, b)
    lo = np.concatenate((a, mid))
    hi = np.concatenate((mid, b))
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    u = (0.5 * (hi - lo))[:, None] * _GL_X + (0.5 * (hi + lo))[:, None]
    w = (0.5 * (hi - lo))[:, None] * _GL_W
    u, w = u.ravel(), w.ravel()
    dens = marginal_density_tau(size, force, a_path, grid.t0 + u, grid)
    cell = np.clip(np.floor(u / grid.step).astype(int), 0, grid.n_steps - 1)
    end = np.minimum(T, u + 1.0 / g[cell])
    return u, w * dens, end


def approx_total_claim(firm: Firm, force, a_path, gamma_path, severity_mean: float,
                       grid: Optional[TimeGrid] = None) -> float:
    """Idiosyncratic-risk-free claim over the horizon.

    sum_j (pi* z_j0 / mu_j) int_0^T (e^{mu_j min(T, u + 1/gamma_u)} - e^{mu_j u}) dF(u),
    with the mu -> 0 limit ``pi* z_j0 (min(T, u + 1/gamma) - u)``.
    """
    if grid is None:
        grid = TimeGrid(0.0, float(len(force) - 1), 1.0)
    u, wd, end = _approx_nodes(firm.size, force, a_path, gamma_path, grid)
    mu = firm.drift[:, None]
    small = np.abs(mu) < 1e-10
    safe = np.where(small, 1.0, mu)
    per = np.where(small, end - u, (np.exp(safe * end) - np.exp(safe * u)) / safe)
    return float(severity_mean * np.sum(firm.z0 * (per @ wd)))


def approx_claim_moments(size: int, force, a_path, gamma_path, grid: TimeGrid, n_terms: int) -> np.ndarray:
    """Moments m_n = int (end^{n+1} - u^{n+1}) / (n+1)! dF(u), n < n_terms.

    A subunit with drift mu contributes ``pi* z0 sum_n mu^n m_n`` to the
    approximate claim, which lets many subunits share one quadrature.
    """
    u, wd, end = _approx_nodes(size, force, a_path, gamma_path, grid)
    out = np.empty(n_terms)
    pe, pu = end.copy(), u.copy()
    fact = 1.0
    for n in range(n_terms):
        fact *= n + 1
        out[n] = np.dot(pe - pu, wd) / fact
        pe *= end
        pu *= u
    return out

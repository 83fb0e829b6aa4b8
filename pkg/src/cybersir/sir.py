"""Multi-group SIR contagion with binomial in-firm splitting.

Compartments are indexed by firm size k = 1..K and hold fractions of the
total firm count h, so ``k * I_k * h`` is the number of infected subunits in
size group k.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .stochproc import TimeGrid


@dataclass
class SirState:
    """Per-size susceptible, infected and removed fractions."""

    s: np.ndarray
    i: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.i = np.asarray(self.i, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if not (self.s.shape == self.i.shape == self.r.shape and self.s.ndim == 1):
            raise ValueError("s, i, r must be 1-d arrays of equal length")
        if min(self.s.min(), self.i.min(), self.r.min()) < 0:
            raise ValueError("compartments must be nonnegative")

    @property
    def K(self) -> int:
        return self.s.size

    def average_size(self) -> float:
        """N = sum_k k (S_k + I_k + R_k)."""
        k = np.arange(1, self.K + 1)
        return float(np.sum(k * (self.s + self.i + self.r)))

    @classmethod
    def from_counts(cls, populations, infected, removed=None) -> "SirState":
        """Build fractions from firm counts per size (global normalization)."""
        h = np.asarray(populations, dtype=float)
        inf = np.asarray(infected, dtype=float)
        rem = np.zeros_like(h) if removed is None else np.asarray(removed, dtype=float)
        if np.any(inf + rem > h + 1e-9):
            raise ValueError("infected + removed exceeds population in some size group")
        total = h.sum()
        return cls((h - inf - rem) / total, inf / total, rem / total)


@dataclass
class SirParamsAt:
    """Contagion parameters at one instant.

    Attributes:
        beta: Out-firm infection rate per size group.
        gamma: Recovery rate per size group.
        a: In-firm attack probability.
    """

    beta: np.ndarray
    gamma: np.ndarray
    a: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if np.any(self.beta < 0) or np.any(self.gamma < 0):
            raise ValueError("beta and gamma must be nonnegative")
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"a must lie in [0, 1], got {self.a}")


@dataclass
class SirTrajectory:
    """States, force of infection and parameters on each grid day."""

    grid: TimeGrid
    s: np.ndarray  # (n_points, K)
    i: np.ndarray
    r: np.ndarray
    force: np.ndarray  # (n_points,)
    params: Sequence[SirParamsAt]
    n0: float

    def state(self, u: int) -> SirState:
        return SirState(self.s[u], self.i[u], self.r[u])

    def to_rows(self):
        """Plot-ready rows ``(day, k, S_k, I_k, R_k, Y)``."""
        days = self.grid.points
        for u, t in enumerate(days):
            for k in range(self.s.shape[1]):
                yield (t, k + 1, self.s[u, k], self.i[u, k], self.r[u, k], self.force[u])


def harmonic(K: int) -> np.ndarray:
    """Harmonic numbers H_1..H_K."""
    return np.cumsum(1.0 / np.arange(1, K + 1))


@lru_cache(maxsize=None)
def _binom_tables(K: int):
    j = np.arange(1, K + 1)[:, None]
    k = np.arange(1, K + 1)[None, :]
    lower = k <= j
    logc = np.where(lower, gammaln(j) - gammaln(k) - gammaln(np.maximum(j - k + 1, 1)), -np.inf)
    # source column for the S-gain term: G[j, k] = B[j, j-k] for k < j
    rows, cols = np.nonzero(k < j)
    src = (rows + 1) - (cols + 1) - 1
    return np.exp(logc), lower, (j - 1) * np.ones_like(k), (k - 1) * np.ones_like(j), rows, cols, src


def splitting_matrix(a, K: int) -> np.ndarray:
    """Binomial splitting kernel ``b_jk = C(j-1,k-1) a^(k-1) (1-a)^(j-k)``.

    ``a`` may be an array; the result then has shape ``a.shape + (K, K)``.
    Row ``j-1`` holds the law of the number of infected subunits after a
    primary hit on a size-j firm.
    """
    a = np.asarray(a, dtype=float)
    if np.any((a < 0) | (a > 1)):
        raise ValueError("a must lie in [0, 1]")
    if K < 1:
        raise ValueError("K must be at least 1")
    comb, lower, jm1, km1, *_ = _binom_tables(K)
    e = np.arange(K)
    pa = np.power(a[..., None], e)  # a^(k-1)
    pb = np.power(1.0 - a[..., None], e)  # (1-a)^(j-k)
    b = comb * pa[..., None, :] * pb[..., np.maximum(jm1 - km1, 0)]
    return np.where(lower, b, 0.0)


def _gain_matrix(B: np.ndarray) -> np.ndarray:
    """G[j, k] = B[j, j-k] for k < j (detachment of healthy remainders)."""
    K = B.shape[-1]
    *_, rows, cols, src = _binom_tables(K)
    G = np.zeros_like(B)
    G[..., rows, cols] = B[..., rows, src]
    return G


def force_of_infection(state: SirState, params: SirParamsAt, n0: float) -> float:
    """Y = (1/N0) sum_k beta_k k I_k."""
    if not n0 > 0:
        raise ValueError("n0 must be positive")
    k = np.arange(1, state.K + 1)
    return float(np.sum(params.beta * k * state.i) / n0)


def _step_arrays(S, I, R, beta, gamma, B, G, n0, dt):
    """One Euler step on (..., K) arrays; returns new arrays and Y."""
    K = S.shape[-1]
    k = np.arange(1, K + 1)
    y = np.sum(beta * k * I, axis=-1) / n0
    jS = k * S
    into_i = np.einsum("...j,...jk->...k", jS, B)
    into_s = np.einsum("...j,...jk->...k", jS, G)
    yy = y[..., None]
    S1 = S + dt * yy * (-k * S + into_s)
    I1 = I + dt * (-gamma * I + yy * into_i)
    R1 = R + dt * gamma * I
    return np.maximum(S1, 0.0), np.maximum(I1, 0.0), np.maximum(R1, 0.0), y


def euler_step(state: SirState, params: SirParamsAt, n0: float, dt: float) -> SirState:
    """Advance the SIR system by one explicit Euler step of length ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not n0 > 0:
        raise ValueError("n0 must be positive")
    B = splitting_matrix(params.a, state.K)
    s, i, r, _ = _step_arrays(state.s, state.i, state.r, params.beta, params.gamma, B, _gain_matrix(B), n0, dt)
    return SirState(s, i, r)


def simulate_sir(initial: SirState, params_path: Sequence[SirParamsAt], grid: TimeGrid, substeps: int = 1) -> SirTrajectory:
    """Iterate Euler steps over the grid, parameters held constant per day.

    Args:
        initial: State at ``grid.t0``.
        params_path: One ``SirParamsAt`` per grid point.
        grid: Time grid; the step is split into ``substeps`` Euler steps.
    """
    if len(params_path) != grid.n_points:
        raise ValueError(f"params_path has {len(params_path)} entries, grid has {grid.n_points} points")
    K = initial.K
    n0 = initial.average_size()
    n = grid.n_points
    S, I, R = (np.empty((n, K)) for _ in range(3))
    force = np.empty(n)
    s, i, r = initial.s.copy(), initial.i.copy(), initial.r.copy()
    dt = grid.step / substeps
    for u in range(n):
        S[u], I[u], R[u] = s, i, r
        p = params_path[u]
        force[u] = force_of_infection(SirState(s, i, r), p, n0)
        if u == n - 1:
            break
        B = splitting_matrix(p.a, K)
        G = _gain_matrix(B)
        for _ in range(substeps):
            s, i, r, _y = _step_arrays(s, i, r, p.beta, p.gamma, B, G, n0, dt)
    return SirTrajectory(grid, S, I, R, force, list(params_path), n0)


@dataclass
class SirBatch:
    """Vectorized trajectories for many scenarios.

    Arrays have shape ``(M, n_points, K)`` for compartments and
    ``(M, n_points)`` for the force of infection.
    """

    s: np.ndarray
    i: np.ndarray
    r: np.ndarray
    force: np.ndarray
    n0: float


def simulate_sir_batch(initial: SirState, beta, gamma, a, grid: TimeGrid, substeps: int = 1) -> SirBatch:
    """Simulate M scenarios at once.

    Args:
        initial: Common initial state.
        beta, gamma: Rates of shape ``(M, n_points, K)``.
        a: In-firm probabilities of shape ``(M, n_points)``.
    """
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    a = np.asarray(a, dtype=float)
    M, n, K = beta.shape
    if n != grid.n_points or gamma.shape != beta.shape or a.shape != (M, n) or K != initial.K:
        raise ValueError("parameter arrays do not match grid/scenario/size dimensions")
    n0 = initial.average_size()
    S, I, R = (np.empty((M, n, K)) for _ in range(3))
    force = np.empty((M, n))
    s = np.broadcast_to(initial.s, (M, K)).copy()
    i = np.broadcast_to(initial.i, (M, K)).copy()
    r = np.broadcast_to(initial.r, (M, K)).copy()
    k = np.arange(1, K + 1)
    dt = grid.step / substeps
    for u in range(n):
        S[:, u], I[:, u], R[:, u] = s, i, r
        force[:, u] = np.sum(beta[:, u] * k * i, axis=-1) / n0
        if u == n - 1:
            break
        B = splitting_matrix(a[:, u], K)
        BG = np.concatenate((B, _gain_matrix(B)), axis=-1)
        for _ in range(substeps):
            s, i, r = _step_stacked(s, i, r, beta[:, u], gamma[:, u], BG, n0, dt)
    return SirBatch(S, I, R, force, n0)


def _step_stacked(S, I, R, beta, gamma, BG, n0, dt):
    # same update as _step_arrays with both kernels in one matmul
    K = S.shape[-1]
    k = np.arange(1, K + 1)
    y = (np.sum(beta * k * I, axis=-1) / n0)[:, None]
    into = np.matmul((k * S)[:, None, :], BG)[:, 0, :]
    S1 = S + dt * y * (-k * S + into[:, K:])
    I1 = I + dt * (-gamma * I + y * into[:, :K])
    R1 = R + dt * gamma * I
    return np.maximum(S1, 0.0), np.maximum(I1, 0.0), np.maximum(R1, 0.0)


def r_max(state: SirState, params: SirParamsAt, n0: float) -> float:
    """Size-heterogeneous reproduction bound.

    R_max = max_k(beta_k/gamma_k) * sum_i i * sum_{m>=i} (m S_m / N0) b_mi.
    """
    if np.any(params.gamma <= 0):
        raise ValueError("all gamma_k must be positive")
    K = state.K
    B = splitting_matrix(params.a, K)
    k = np.arange(1, K + 1)
    weights = (k * state.s / n0) @ B  # sum over m of (m S_m / N0) b_mi
    return float(np.max(params.beta / params.gamma) * np.sum(k * weights))


def infected_subunits(i, total_firms: float) -> np.ndarray:
    """J = h * sum_k k I_k along the last axis."""
    i = np.asarray(i, dtype=float)
    k = np.arange(1, i.shape[-1] + 1)
    return total_firms * np.sum(k * i, axis=-1)


def peak(traj, populations) -> tuple[float, int]:
    """Peak of total infected subunits and its first day index.

    Args:
        traj: ``SirTrajectory`` or an ``(n_points, K)`` array of infected fractions.
        populations: Firm counts per size group (their sum is the total h).
    """
    i = traj.i if hasattr(traj, "i") else np.asarray(traj)
    j = infected_subunits(i, float(np.sum(populations)))
    day = int(np.argmax(j))
    return float(j[day]), day


def prevalence(traj, n0: float) -> np.ndarray:
    """Fraction of subunits removed, per day."""
    r = traj.r if hasattr(traj, "r") else np.asarray(traj)
    k = np.arange(1, r.shape[-1] + 1)
    return np.sum(k * r, axis=-1) / n0

"""Primitive stochastic processes and samplers.

Exact CIR transitions, geometric Brownian motion with equicorrelated
within-firm shocks, first jumps of Cox processes whose intensity is
piecewise constant on a time grid, and Beta severity draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SCENARIO_BLOCK = 64
"""Scenarios sharing one random stream. Part of the reproducibility contract."""


@dataclass(frozen=True)
class CirSpec:
    """Coefficients of one mean-reverting square-root parameter.

    Attributes:
        speed: Mean-reversion rate per day (kappa).
        long_mean: Long-run level.
        vol: Volatility factor (Sigma).
        x0: Initial value.
    """

    speed: float
    long_mean: float
    vol: float
    x0: float

    def __post_init__(self):
        if not self.speed > 0:
            raise ValueError(f"speed must be positive, got {self.speed}")
        if not self.vol > 0:
            raise ValueError(f"vol must be positive, got {self.vol}")
        if self.x0 < 0 or self.long_mean < 0:
            raise ValueError("x0 and long_mean must be nonnegative")
        if 2.0 * self.speed * self.long_mean < self.vol**2:
            raise ValueError(
                f"Feller condition violated: 2*{self.speed}*{self.long_mean} < {self.vol}^2"
            )

    def mean(self, t):
        """Closed-form expectation at time ``t`` (days from start)."""
        e = np.exp(-self.speed * np.asarray(t, dtype=float))
        return self.x0 * e + self.long_mean * (1.0 - e)

    def variance(self, t):
        """Closed-form variance at time ``t``."""
        k, s2 = self.speed, self.vol**2
        e = np.exp(-k * np.asarray(t, dtype=float))
        return self.x0 * (s2 / k) * (e - e * e) + self.long_mean * s2 / (2 * k) * (1 - e) ** 2


@dataclass(frozen=True)
class TimeGrid:
    """Regular simulation grid ``t0, t0+step, ..., t0+horizon``."""

    t0: float = 0.0
    horizon: float = 100.0
    step: float = 1.0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.step > 0:
            raise ValueError("step must be positive")
        n = self.horizon / self.step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("horizon must be a multiple of step")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def points(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.n_points)

    @property
    def end(self) -> float:
        return self.t0 + self.horizon

    @property
    def sentinel(self) -> float:
        """Infection time used for 'never infected within the horizon'."""
        return self.end + 1.0


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id, *sub)``.

    Two streams with the same key produce identical draws; distinct keys
    give independent Philox streams.
    """

    seed: int = 0
    stream_id: int = 0
    sub: tuple = field(default=())

    def __post_init__(self):
        sub = (self.sub,) if np.isscalar(self.sub) else self.sub
        object.__setattr__(self, "sub", tuple(int(k) for k in sub))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + tuple(self.sub))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        """Derive a sub-stream; the parent stream is unaffected."""
        return RngStream(self.seed, self.stream_id, tuple(self.sub) + tuple(int(k) for k in keys))


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def logistic(x):
    """Logistic transform mapping the real line into (0, 1)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def cir_paths(x0, kappa, mu, vol, dt: float, n_steps: int, gen: np.random.Generator):
    """Exact CIR paths for broadcastable coefficient arrays.

    The transition over ``dt`` is ``c * chi'^2(df, x e^{-kappa dt} / c)`` with
    ``c = vol^2 (1 - e^{-kappa dt}) / (4 kappa)`` and ``df = 4 kappa mu / vol^2``.

    Returns:
        Array of shape ``x0.shape + (n_steps + 1,)``.
    """
    x0 = np.asarray(x0, dtype=float)
    kappa, mu, vol = (np.broadcast_to(np.asarray(v, dtype=float), x0.shape) for v in (kappa, mu, vol))
    e = np.exp(-kappa * dt)
    c = vol**2 * (1.0 - e) / (4.0 * kappa)
    df = 4.0 * kappa * mu / vol**2
    out = np.empty(x0.shape + (n_steps + 1,))
    out[..., 0] = x0
    x = x0
    for n in range(n_steps):
        x = c * gen.noncentral_chisquare(df, x * e / c)
        out[..., n + 1] = x
    return out


def simulate_cir(spec: CirSpec, grid: TimeGrid, rng, n_paths: Optional[int] = None) -> np.ndarray:
    """Sample CIR path(s) on ``grid`` with the exact transition law.

    Args:
        spec: Process coefficients.
        grid: Time grid.
        rng: ``RngStream`` or numpy ``Generator``.
        n_paths: If given, return ``(n_paths, n_points)`` independent paths.

    Returns:
        Nonnegative path of length ``grid.n_points`` (or a 2-d array).
    """
    gen = _gen(rng)
    shape = () if n_paths is None else (int(n_paths),)
    x0 = np.full(shape, spec.x0, dtype=float)
    return cir_paths(x0, spec.speed, spec.long_mean, spec.vol, grid.step, grid.n_steps, gen)


def _cell_intensity(intensity, grid: TimeGrid) -> np.ndarray:
    y = np.asarray(intensity, dtype=float)
    n = grid.n_steps
    if y.shape[-1] == grid.n_points:
        y = y[..., :n]
    elif y.shape[-1] != n:
        raise ValueError(f"intensity length {y.shape[-1]} does not match grid ({grid.n_points} points)")
    if np.any(y < 0):
        raise ValueError("intensity must be nonnegative")
    return y


def cumulative_hazard(intensity, grid: TimeGrid) -> np.ndarray:
    """Integrated intensity at grid points for a piecewise-constant rate."""
    y = _cell_intensity(intensity, grid)
    lam = np.zeros(y.shape[:-1] + (grid.n_points,))
    np.cumsum(y * grid.step, axis=-1, out=lam[..., 1:])
    return lam


def invert_hazard(lam: np.ndarray, y: np.ndarray, grid: TimeGrid, e: np.ndarray) -> np.ndarray:
    """Map unit-exponential levels ``e`` to jump times; ``inf`` if beyond horizon.

    Args:
        lam: Cumulative hazard at grid points, shape ``(n_points,)``.
        y: Cell intensities, shape ``(n_steps,)``.
        e: Exponential levels of any shape.
    """
    e = np.asarray(e, dtype=float)
    cell = np.searchsorted(lam, e, side="left") - 1
    hit = (cell >= 0) & (cell < grid.n_steps) & (e <= lam[-1])
    c = np.clip(cell, 0, grid.n_steps - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = grid.t0 + c * grid.step + (e - lam[c]) / y[c]
    t = np.minimum(t, grid.t0 + (c + 1) * grid.step)
    return np.where(hit, t, np.inf)


def cox_first_jump(intensity, grid: TimeGrid, rng) -> Optional[float]:
    """First jump of a Cox process with grid-wise constant intensity.

    Returns:
        Jump time in ``[t0, t0+T]`` or ``None`` if no jump occurs.
    """
    y = _cell_intensity(intensity, grid)
    lam = cumulative_hazard(y, grid)
    t = float(invert_hazard(lam, y, grid, _gen(rng).standard_exponential()))
    return None if np.isinf(t) else t


def cox_first_jumps(intensity, grid: TimeGrid, rng, size: int) -> np.ndarray:
    """Vectorized ``cox_first_jump``; missing jumps are ``inf``."""
    y = _cell_intensity(intensity, grid)
    lam = cumulative_hazard(y, grid)
    return invert_hazard(lam, y, grid, _gen(rng).standard_exponential(size))


def correlated_shocks(rho: float, size: int, n_steps: int, rng, lead_shape: Sequence[int] = ()) -> np.ndarray:
    """Standard normal shocks with equicorrelation ``rho`` across ``size`` subunits.

    Uses the symmetric square root of the equicorrelation matrix, valid for
    ``-1/(size-1) <= rho <= 1``.

    Returns:
        Array of shape ``lead_shape + (size, n_steps)``.
    """
    if size > 1 and not (-1.0 / (size - 1) - 1e-12 <= rho <= 1.0):
        raise ValueError(f"rho={rho} not a valid equicorrelation for size {size}")
    eps = _gen(rng).standard_normal(tuple(lead_shape) + (size, n_steps))
    return equicorrelate(eps, rho)


def equicorrelate(eps: np.ndarray, rho, axis: int = -2) -> np.ndarray:
    """Apply the equicorrelation square root along ``axis`` of iid normals."""
    k = eps.shape[axis]
    rho = np.asarray(rho, dtype=float)
    m = eps.mean(axis=axis, keepdims=True)
    a = np.sqrt(np.maximum(1.0 - rho, 0.0))
    b = np.sqrt(np.maximum(1.0 + (k - 1) * rho, 0.0))
    return a * (eps - m) + b * m


def gbm_path(z0, drift, vol, grid: TimeGrid, shocks) -> np.ndarray:
    """Exact geometric Brownian motion at grid points.

    Args:
        z0: Initial value(s), strictly positive.
        drift: Drift per day.
        vol: Volatility per square-root day (zero allowed).
        grid: Time grid.
        shocks: Standard normal increments with last axis ``grid.n_steps``.

    Returns:
        Paths with last axis ``grid.n_points``.
    """
    z0 = np.asarray(z0, dtype=float)
    drift = np.asarray(drift, dtype=float)
    vol = np.asarray(vol, dtype=float)
    if np.any(z0 <= 0):
        raise ValueError("z0 must be positive")
    if np.any(vol < 0):
        raise ValueError("vol must be nonnegative")
    shocks = np.asarray(shocks, dtype=float)
    if shocks.shape[-1] != grid.n_steps:
        raise ValueError("shocks must have one entry per grid step")
    b = np.zeros(shocks.shape[:-1] + (grid.n_points,))
    np.cumsum(shocks * np.sqrt(grid.step), axis=-1, out=b[..., 1:])
    t = grid.points - grid.t0
    z0, drift, vol = (v[..., None] for v in (z0, drift, vol))
    return z0 * np.exp((drift - 0.5 * vol**2) * t + vol * b)


def sample_severity(alpha: float, beta: float, rng, size=None):
    """Beta-distributed loss fractions."""
    if not (alpha > 0 and beta > 0):
        raise ValueError("Beta shapes must be positive")
    return _gen(rng).beta(alpha, beta, size)

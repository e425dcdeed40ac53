"""Synthetic heterogeneous data from the eight-species generalised repressilator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from hetid.datamodel import HeterogeneousDataset, TimeSeriesExperiment

log = logging.getLogger(__name__)

N_SPECIES = 8
# production, threshold, Hill coefficient, basal rate, degradation
MEAN_KINETICS = (40.0, 1.0, 3.0, 0.5, 1.0)


class IntegrationError(RuntimeError):
    """Adaptive integration could not proceed (step-size underflow or blow-up)."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t


@dataclass(frozen=True)
class RepressilatorParams:
    """Kinetic parameters, one row per species: ``[p_i1, p_i2, p_i3, p_i4, p_i5]``."""

    p: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 2 or p.shape[1] != 5:
            raise ValueError(f"params must have shape (n, 5), got {p.shape}")
        if not np.all(p > 0):
            raise ValueError("all repressilator parameters must be strictly positive")
        if not np.all(p[:, 2] >= 1):
            raise ValueError("Hill coefficients must be >= 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @classmethod
    def mean(cls, n: int = N_SPECIES) -> "RepressilatorParams":
        return cls(np.tile(MEAN_KINETICS, (n, 1)))

    @property
    def n(self) -> int:
        return self.p.shape[0]


def repressilator_rhs(x, params: RepressilatorParams) -> np.ndarray:
    """Ring repression: species i is repressed by species i-1 (species 1 by the last)."""
    x = np.asarray(x, dtype=float)
    p = params.p
    pred = np.roll(x, 1)
    h = p[:, 2]
    return p[:, 0] / (p[:, 1] ** h + pred ** h) + p[:, 3] - p[:, 4] * x


def sample_experiment_params(mean: RepressilatorParams, spread: float, rng: np.random.Generator,
                             columns=None) -> RepressilatorParams:
    """Draw each parameter uniformly in ``[(1-spread), (1+spread)] * mean``.

    ``columns`` restricts the perturbation to some kinetic columns (the rest
    stay at their means).  A uniform draw is consumed for every entry either
    way, so the stream position does not depend on ``columns``.
    """
    if not 0 <= spread < 1:
        raise ValueError("spread must lie in [0, 1)")
    u = rng.random(mean.p.shape)
    factor = (1.0 - spread) + 2.0 * spread * u
    if columns is not None:
        keep = np.ones(mean.p.shape[1], dtype=bool)
        keep[list(columns)] = False
        factor[:, keep] = 1.0
    return RepressilatorParams(mean.p * factor)


# -- adaptive Runge-Kutta-Fehlberg 4(5) -------------------------------------

_C = np.array([0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2])
_A = [
    [],
    [1 / 4],
    [3 / 32, 9 / 32],
    [1932 / 2197, -7200 / 2197, 7296 / 2197],
    [439 / 216, -8.0, 3680 / 513, -845 / 4104],
    [-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40],
]
_B4 = np.array([25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0])
_B5 = np.array([16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55])
_E = _B5 - _B4


@dataclass
class Trajectory:
    """Accepted steps of an adaptive run with cubic Hermite dense output."""

    t: np.ndarray
    x: np.ndarray
    dx: np.ndarray
    n_rejected: int = 0

    def __call__(self, tq) -> np.ndarray:
        tq = np.atleast_1d(np.asarray(tq, dtype=float))
        if np.any(tq < self.t[0] - 1e-12) or np.any(tq > self.t[-1] + 1e-12):
            raise ValueError("query time outside the integrated interval")
        idx = np.clip(np.searchsorted(self.t, tq, side="right") - 1, 0, len(self.t) - 2)
        t0, t1 = self.t[idx], self.t[idx + 1]
        h = (t1 - t0)[:, None]
        s = ((tq - t0) / (t1 - t0))[:, None]
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.x[idx] + h10 * h * self.dx[idx]
                + h01 * self.x[idx + 1] + h11 * h * self.dx[idx + 1])


def integrate_adaptive(rhs: Callable, x0, t_end: float, rk_tol: float = 1e-8,
                       h0: Optional[float] = None, max_steps: int = 1_000_000) -> Trajectory:
    """Integrate ``x' = rhs(x)`` on ``[0, t_end]`` with an embedded RKF 4(5) pair.

    The fourth-order solution is propagated; the embedded fifth-order one only
    drives a PI step-size controller with mixed absolute/relative tolerance
    ``rk_tol``.
    """
    if rk_tol <= 0:
        raise ValueError("rk_tol must be positive")
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    t = 0.0
    f = np.asarray(rhs(x), dtype=float)
    ts, xs, fs = [t], [x.copy()], [f.copy()]
    if t_end <= 0:
        return Trajectory(np.array(ts), np.array(xs), np.array(fs))

    if h0 is None:
        scale = rk_tol * (1.0 + np.abs(x))
        d0, d1 = np.sqrt(np.mean((x / scale) ** 2)), np.sqrt(np.mean((f / scale) ** 2))
        h0 = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6
        h0 = min(h0, t_end)
    h = h0
    err_prev = 1.0
    safety, fac_min, fac_max = 0.9, 0.2, 5.0
    beta1, beta2 = 0.7 / 5, 0.4 / 5
    rejected = 0
    k = np.empty((6, x.size))

    for _ in range(max_steps):
        if t >= t_end:
            break
        h = min(h, t_end - t)
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
        k[0] = f
        for s in range(1, 6):
            k[s] = rhs(x + h * (np.dot(_A[s], k[:s])))
        x4 = x + h * (_B4 @ k)
        err_vec = h * (_E @ k)
        scale = rk_tol * (1.0 + np.maximum(np.abs(x), np.abs(x4)))
        err = np.sqrt(np.mean((err_vec / scale) ** 2))
        if not np.isfinite(err) or not np.all(np.isfinite(x4)):
            h *= fac_min
            rejected += 1
            continue
        if err <= 1.0:
            t = t_end if (t_end - (t + h)) < 1e-12 * max(1.0, t_end) else t + h
            x = x4
            f = np.asarray(rhs(x), dtype=float)
            ts.append(t)
            xs.append(x.copy())
            fs.append(f.copy())
            err = max(err, 1e-10)
            fac = safety * err ** (-beta1) * err_prev ** beta2
            h *= min(fac_max, max(fac_min, fac))
            err_prev = err
        else:
            rejected += 1
            h *= max(fac_min, safety * err ** (-1 / 5))
    else:
        raise IntegrationError("maximum number of steps exceeded", t)
    return Trajectory(np.array(ts), np.array(xs), np.array(fs), rejected)


# -- dataset generation -----------------------------------------------------

@dataclass(frozen=True)
class GenerationConfig:
    C: int = 5
    t_end: float = 50.0
    sample_interval: float = 1.0
    spread: float = 0.2
    sigma: float = 0.0
    seed: int = 0
    rk_tol: float = 1e-8
    # production, basal rate and degradation vary; threshold and Hill
    # coefficient stay at the values the dictionary assumes
    perturbed: tuple = (0, 3, 4)
    mean_params: RepressilatorParams = field(default_factory=RepressilatorParams.mean)

    def __post_init__(self):
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")
        if not 0 <= self.spread < 1:
            raise ValueError("spread must lie in [0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.rk_tol <= 0:
            raise ValueError("rk_tol must be positive")

    @property
    def sample_times(self) -> np.ndarray:
        n = int(np.floor(self.t_end / self.sample_interval + 1e-9)) + 1
        return np.arange(n) * self.sample_interval


def experiment_rng(seed, c: int) -> np.random.Generator:
    """Counter-based substream for experiment ``c`` (independent of C and of order)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    child = np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (c,))
    return np.random.Generator(np.random.Philox(child))


def generate_experiment(config: GenerationConfig, c: int, seed=None) -> TimeSeriesExperiment:
    """Simulate experiment ``c`` (zero-based) of ``config``."""
    rng = experiment_rng(config.seed if seed is None else seed, c)
    params = sample_experiment_params(config.mean_params, config.spread, rng, config.perturbed)
    n = params.n
    x0 = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=n)
    traj = integrate_adaptive(lambda x: repressilator_rhs(x, params), x0, config.t_end, config.rk_tol)
    if not np.all(traj.x > 0):
        bad = traj.t[np.any(traj.x <= 0, axis=1)][0]
        raise IntegrationError("trajectory left the positive orthant", bad)
    times = config.sample_times
    clean = traj(times)
    states = clean + config.sigma * rng.standard_normal(clean.shape) if config.sigma > 0 else clean
    meta = {
        "params": params.p.tolist(),
        "x0": x0.tolist(),
        "sigma": config.sigma,
        "rk_steps": len(traj.t) - 1,
    }
    return TimeSeriesExperiment(c + 1, times, states, None, meta)


def generate_dataset(config: GenerationConfig, seed=None) -> HeterogeneousDataset:
    """C experiments with fresh parameters, U(0,1) initial states and optional noise.

    ``seed`` overrides ``config.seed`` and may be a ``SeedSequence`` (used by
    the sweep to give every grid cell and repeat its own stream).
    """
    exps = tuple(generate_experiment(config, c, seed) for c in range(config.C))
    meta = {
        "generator": "repressilator",
        "C": config.C,
        "t_end": config.t_end,
        "sample_interval": config.sample_interval,
        "spread": config.spread,
        "sigma": config.sigma,
        "seed": config.seed if seed is None else repr(seed),
        "rk_tol": config.rk_tol,
        "perturbed": list(config.perturbed),
        "mean_params": config.mean_params.p.tolist(),
    }
    return HeterogeneousDataset(exps, exps[0].n_x, 0, meta)


def experiment_params(exp: TimeSeriesExperiment) -> RepressilatorParams:
    """True parameters recorded in the experiment's metadata."""
    return RepressilatorParams(np.asarray(exp.meta["params"], dtype=float))

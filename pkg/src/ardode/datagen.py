"""Synthetic trajectory families.

Every sample draws from its own generator seeded with ``(seed, index)``, so
a single sample can be regenerated from the dataset header and its index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .solver import TimeGrid, solve
from .tensor import Tensor

LV_LONG_STEPS = 600
LV_SUBSTEPS = 10


@dataclass
class Dataset:
    observations: np.ndarray  # (L, d, K+1)
    grid: TimeGrid
    generator: str
    seed: int
    options: dict = field(default_factory=dict)
    meta: dict[str, np.ndarray] = field(default_factory=dict)  # per-sample arrays, length L

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=float)
        if self.observations.ndim != 3:
            raise ValueError("observations must be (L, d, K+1)")
        if self.observations.shape[2] != self.grid.length:
            raise ValueError(f"series length {self.observations.shape[2]} does not match grid "
                             f"of {self.grid.length} points")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.observations[idx], self.grid, self.generator, self.seed,
                       dict(self.options), {k: v[idx] for k, v in self.meta.items()})


def _rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([seed, i])


def harmonic_sample(t, omega, phase, sigma_e, rng):
    clean = np.sin(omega * t + phase)
    return clean + sigma_e * rng.standard_normal(t.shape) if sigma_e > 0 else clean


def gen_harmonic(L: int = 2000, K: int = 100, dt: float = 0.1, omega_range=(0.5, 3.0),
                 sigma_e: float = 0.02, seed: int = 0) -> Dataset:
    """``sin(omega t + phase) + noise`` with ``omega ~ U(omega_range)``,
    ``phase ~ U(0, 2 pi)``."""
    grid = TimeGrid(dt, K)
    t = grid.times
    X = np.empty((L, 1, grid.length))
    om, ph = np.empty(L), np.empty(L)
    for i in range(L):
        r = _rng(seed, i)
        om[i] = r.uniform(*omega_range)
        ph[i] = r.uniform(0, 2 * math.pi)
        X[i, 0] = harmonic_sample(t, om[i], ph[i], sigma_e, r)
    return Dataset(X, grid, "harmonic", seed,
                   {"L": L, "K": K, "dt": dt, "omega_range": list(omega_range), "sigma_e": sigma_e},
                   {"omega": om, "phase": ph})


def gen_double_harmonic(L: int = 2000, K: int = 100, dt: float = 0.1, sigma_e: float = 0.02,
                        seed: int = 0, omegas=(0.5, 0.8)) -> Dataset:
    """``sin(w1 (t + s)) + sin(w2 (t + s))`` with a shared shift ``s ~ U(0, 2 pi / w1)``."""
    grid = TimeGrid(dt, K)
    t = grid.times
    w1, w2 = omegas
    X = np.empty((L, 1, grid.length))
    shift = np.empty(L)
    for i in range(L):
        r = _rng(seed, i)
        shift[i] = r.uniform(0, 2 * math.pi / w1)
        clean = np.sin(w1 * (t + shift[i])) + np.sin(w2 * (t + shift[i]))
        X[i, 0] = clean + (sigma_e * r.standard_normal(t.shape) if sigma_e > 0 else 0.0)
    return Dataset(X, grid, "double_harmonic", seed,
                   {"L": L, "K": K, "dt": dt, "sigma_e": sigma_e, "omegas": list(omegas)},
                   {"shift": shift})


def lotka_volterra_rhs(alpha, beta, delta, gamma):
    """Batched right-hand side of ``x' = a x - b x y``, ``y' = -d y + g x y``."""
    alpha, beta, delta, gamma = (np.asarray(v, dtype=float) for v in (alpha, beta, delta, gamma))

    def f(s, t=None):
        d = s.data
        x, y = d[..., 0], d[..., 1]
        return Tensor(np.stack([alpha * x - beta * x * y, -delta * y + gamma * x * y], axis=-1))

    return f


def lv_invariant(x, y, alpha, beta, delta, gamma):
    """Conserved along exact trajectories: ``g x - d ln x + b y - a ln y``."""
    return gamma * x - delta * np.log(x) + beta * y - alpha * np.log(y)


def solve_lotka_volterra(state0, alpha, beta, delta, gamma, steps: int, dt: float = 0.1,
                         substeps: int = LV_SUBSTEPS) -> np.ndarray:
    """Noise-free LV trajectories, ``(..., 2, steps+1)``."""
    f = lotka_volterra_rhs(alpha, beta, delta, gamma)
    return solve(f, Tensor(state0), TimeGrid(dt, steps), substeps=substeps).data


def gen_lotka_volterra(L: int = 2000, window_len: int = 100, dt: float = 0.1, seed: int = 0,
                       sigma_e: float = 0.0, alpha_range=(2.0, 2.5), delta_range=(3.0, 3.5),
                       beta: float = 1.0, gamma: float = 1.0, init_range=(0.5, 4.0)) -> Dataset:
    """Random ``window_len``-step windows of 600-step LV solves, full state observed."""
    if window_len > LV_LONG_STEPS:
        raise ValueError(f"window_len {window_len} exceeds the {LV_LONG_STEPS}-step solve")
    a, d = np.empty(L), np.empty(L)
    s0 = np.empty((L, 2))
    start = np.empty(L, dtype=int)
    rngs = [_rng(seed, i) for i in range(L)]
    for i, r in enumerate(rngs):
        a[i] = r.uniform(*alpha_range)
        d[i] = r.uniform(*delta_range)
        s0[i] = r.uniform(*init_range, size=2)
        start[i] = r.integers(0, LV_LONG_STEPS - window_len + 1)
    long = solve_lotka_volterra(s0, a, np.full(L, beta), d, np.full(L, gamma), LV_LONG_STEPS, dt)
    X = np.stack([long[i, :, start[i]:start[i] + window_len + 1] for i in range(L)])
    if sigma_e > 0:
        for i, r in enumerate(rngs):
            X[i] += sigma_e * r.standard_normal(X[i].shape)
    return Dataset(X, TimeGrid(dt, window_len), "lotka_volterra", seed,
                   {"L": L, "window_len": window_len, "dt": dt, "sigma_e": sigma_e,
                    "alpha_range": list(alpha_range), "delta_range": list(delta_range),
                    "beta": beta, "gamma": gamma, "init_range": list(init_range)},
                   {"alpha": a, "beta": np.full(L, beta), "delta": d, "gamma": np.full(L, gamma),
                    "state0": s0, "start": start, "xi0": X[:, :, 0].copy()})


def square_wave(t, omega, phase=0.0, amplitude=1.0):
    """50%-duty square wave with the period of ``sin(omega t + phase)``."""
    return amplitude * np.where(np.sin(omega * t + phase) >= 0, 1.0, -1.0)


GENERATORS = {
    "harmonic": gen_harmonic,
    "double_harmonic": gen_double_harmonic,
    "lotka_volterra": gen_lotka_volterra,
}


def generate(name: str, **options) -> Dataset:
    try:
        fn = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}") from None
    return fn(**options)


def regenerate_sample(ds: Dataset, i: int) -> np.ndarray:
    """Rebuild sample ``i`` from the dataset header alone."""
    opts = dict(ds.options)
    if ds.generator == "lotka_volterra":
        # samples are coupled only through the batched long solve, which is
        # elementwise per sample
        full = gen_lotka_volterra(**{**opts, "L": i + 1, "seed": ds.seed})
        return full.observations[i]
    opts["L"] = i + 1
    return generate(ds.generator, seed=ds.seed, **opts).observations[i]

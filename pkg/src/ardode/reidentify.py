"""Per-sample refinement of the latent code after training.

The decoder has no parameters, so for a fixed series ``x`` we can minimize
``MSE(decoder(z), x)`` directly over the relevant coordinates of ``z``.
Several starts per sample run side by side as one batch; the Adam moments
are per coordinate, so summing the per-run losses keeps the runs
independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .solver import DivergenceError, TimeGrid
from .vae import Decoder, PosteriorState


@dataclass(frozen=True)
class ReidOptions:
    learning_rate: float = 1e-2
    iterations: int = 1000
    starts: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    horizon_start: int = 0       # >0: fit only this many leading steps at first
    horizon_iterations: int = 0  # iterations over which the horizon grows to the full window

    def horizon(self, it: int, steps: int) -> int:
        """Fitted steps at iteration ``it`` (counted from 1)."""
        if self.horizon_start <= 0 or self.horizon_start >= steps or it > self.horizon_iterations:
            return steps
        return self.horizon_start + (steps - self.horizon_start) * (it - 1) // self.horizon_iterations


@dataclass
class ReidResult:
    z: np.ndarray            # (S, m) best code per sample
    mse: np.ndarray          # (S,)
    encoder_mse: np.ndarray  # (S,) MSE at the unpruned posterior mean
    initial_mse: np.ndarray  # (S, starts) MSE of every start before optimization
    diverged: np.ndarray     # (S,) every start diverged
    from_encoder: np.ndarray  # (S,) the plain encoder mean was the best candidate


def _grid(X, decoder: Decoder) -> TimeGrid:
    g = decoder.H.grid
    return TimeGrid(g.dt, X.shape[-1] - 1, g.origin)


def decoder_mse(decoder: Decoder, Z: np.ndarray, X: np.ndarray, chunk: int = 512) -> np.ndarray:
    """MSE of ``decoder(z)`` against ``x`` per row; ``inf`` where the solve diverges."""
    Z = np.atleast_2d(Z)
    X = np.asarray(X, dtype=float)
    grid = _grid(X, decoder)
    out = np.empty(len(Z))
    for s in range(0, len(Z), chunk):
        idx = np.arange(s, min(s + chunk, len(Z)))
        while len(idx):
            try:
                pred = decoder(Z[idx], grid).data
            except DivergenceError as err:
                bad = idx[list(err.samples)]
                out[bad] = np.inf
                idx = np.setdiff1d(idx, bad)
                continue
            out[idx] = np.mean((pred - X[idx]) ** 2, axis=(-2, -1))
            break
    return out


def reidentify_batch(X: np.ndarray, state: PosteriorState, decoder: Decoder, mask: np.ndarray,
                     opts: ReidOptions = ReidOptions()) -> ReidResult:
    """Reidentify every series in ``X`` (``(S, d, T)``).

    Start 0 is the posterior mean, the others are posterior samples; the
    coordinates outside ``mask`` are frozen at zero throughout.  While the
    fitted horizon is still short, iterates are not candidates for the best
    code, which is always judged on the full window.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    mask = np.asarray(mask, dtype=bool)
    S, P = len(X), opts.starts
    mu = state.encode(X)
    m = mu.shape[1]
    if mask.shape != (m,):
        raise ValueError(f"mask has shape {mask.shape}, latent dimension is {m}")
    rng = np.random.default_rng(opts.seed)
    eps = rng.standard_normal((S, P, m))
    eps[:, 0] = 0.0
    starts = mu[:, None, :] + state.sigma_z * eps
    starts[..., ~mask] = 0.0
    R = S * P
    Xr = np.repeat(X, P, axis=0)
    u = starts.reshape(R, m)[:, mask].copy()
    def codes(v):
        z = np.zeros((len(v), m))
        z[:, mask] = v
        return z

    best_z = codes(u)
    best = decoder_mse(decoder, best_z, Xr)
    initial = best.copy()
    active = np.isfinite(best)
    grid = _grid(X, decoder)
    k = int(mask.sum())
    m1 = np.zeros((R, k))
    m2 = np.zeros((R, k))
    sel = np.eye(m)[mask]  # (k, m) scatter of free coordinates

    for it in range(1, opts.iterations + 1 if k else 1):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        h = opts.horizon(it, grid.steps)
        sub = grid if h == grid.steps else TimeGrid(grid.dt, h, grid.origin)
        while len(idx):
            with T.Tape() as tape:
                uu = tape.watch(u[idx])
                z = T.matmul(uu, sel)
                try:
                    pred = decoder(z, sub)
                except DivergenceError as err:
                    dead = idx[list(err.samples)]
                    active[dead] = False
                    idx = np.setdiff1d(idx, dead)
                    continue
                err2 = T.mean(T.square(T.sub(pred, Xr[idx][..., :h + 1])), axis=(-2, -1))
                g = tape.backward(T.sum_(err2))[uu.grad_id].data
            break
        if not len(idx):
            break
        cur = err2.data if h == grid.steps else np.full(len(idx), np.inf)
        better = cur < best[idx]
        if np.any(better):
            bi = idx[better]
            best[bi] = cur[better]
            best_z[bi] = codes(u[bi])
        b1, b2 = opts.beta1, opts.beta2
        m1[idx] = b1 * m1[idx] + (1 - b1) * g
        m2[idx] = b2 * m2[idx] + (1 - b2) * g * g
        step = opts.learning_rate * (m1[idx] / (1 - b1 ** it)) / (
            np.sqrt(m2[idx] / (1 - b2 ** it)) + opts.eps)
        u[idx] = u[idx] - step

    if k:
        final = decoder_mse(decoder, codes(u), Xr)
        better = final < best
        best[better] = final[better]
        best_z[better] = codes(u)[better]

    best = best.reshape(S, P)
    best_z = best_z.reshape(S, P, m)
    pick = np.argmin(best, axis=1)  # first index wins ties
    z = best_z[np.arange(S), pick]
    mse = best[np.arange(S), pick]
    enc = decoder_mse(decoder, mu, X)
    from_enc = enc < mse
    z[from_enc] = mu[from_enc]
    mse = np.where(from_enc, enc, mse)
    diverged = ~np.isfinite(best).any(axis=1)
    z[diverged] = mu[diverged]
    mse[diverged] = enc[diverged]
    return ReidResult(z, mse, enc, initial.reshape(S, P), diverged, from_enc | diverged)


def reidentify(x, state: PosteriorState, decoder: Decoder, mask, opts: ReidOptions = ReidOptions()):
    """Single-series form: returns ``(z, mse, diverged)``."""
    res = reidentify_batch(np.asarray(x)[None], state, decoder, mask, opts)
    return res.z[0], float(res.mse[0]), bool(res.diverged[0])

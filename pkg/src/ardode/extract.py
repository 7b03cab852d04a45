"""Reading physical quantities back out of identified latent codes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arithmetic import Architecture, to_polynomials, unflatten_params


@dataclass
class HarmonicFit:
    omega: float      # sqrt(-w1 * w2)
    b: float          # gauge scale, 1 / w1
    w1: float
    w2: float
    partner: int      # index of the hidden state coupled to the observed one
    omega_eig: float  # largest |imag| eigenvalue of the full W, a gauge-free cross-check


def gauge_transform(W: np.ndarray, a: float, b: float) -> np.ndarray:
    """``T W T^-1`` with ``T = [[1, 0], [a, b]]``."""
    Tm = np.array([[1.0, 0.0], [a, b]])
    return Tm @ np.asarray(W, dtype=float) @ np.linalg.inv(Tm)


def harmonic_frequency(W: np.ndarray, observed: int = 0) -> HarmonicFit:
    """Frequency of the oscillator seen through state ``observed``.

    The partner state is the one feeding the observed state most strongly;
    with ``w1 = W[obs, partner]`` and ``w2 = W[partner, obs]`` the pruned
    block ``[[0, w1], [w2, 0]]`` oscillates at ``sqrt(-w1 w2)`` and the gauge
    scale is ``b = 1 / w1``.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    others = [j for j in range(n) if j != observed]
    if not others:
        raise ValueError("need at least two states")
    p = max(others, key=lambda j: abs(W[observed, j]))
    w1, w2 = W[observed, p], W[p, observed]
    prod = -w1 * w2
    omega = math.sqrt(prod) if prod > 0 else 0.0
    b = 1.0 / w1 if w1 != 0 else math.inf
    eig = np.linalg.eigvals(W)
    return HarmonicFit(omega, b, w1, w2, p, float(np.max(np.abs(eig.imag))))


def nau_matrix(arch: Architecture, theta: np.ndarray) -> np.ndarray:
    if len(arch.layers) != 1 or arch.layers[0].kind != "nau":
        raise ValueError(f"{arch} is not a single NAU layer")
    return unflatten_params(arch, np.asarray(theta, dtype=float)).weights()[0]


@dataclass
class LotkaVolterraFit:
    alpha: float   # coefficient of x in dx/dt
    beta: float    # minus the coefficient of x*y in dx/dt
    delta: float   # minus the coefficient of y in dy/dt
    gamma: float   # coefficient of x*y in dy/dt
    residual: float  # largest magnitude among all other monomial coefficients

    @property
    def signed(self) -> np.ndarray:
        """``(alpha, -beta, -delta, gamma)`` as they appear in the equations."""
        return np.array([self.alpha, -self.beta, -self.delta, self.gamma])


def lotka_volterra_coefficients(arch: Architecture, theta: np.ndarray,
                                threshold: float = 0.0) -> LotkaVolterraFit:
    """Expand the layer stack into polynomials and read off the four LV terms.

    The expansion is exact for any gate values, so hidden-unit permutations
    of the NMU do not matter.
    """
    model = unflatten_params(arch, np.asarray(theta, dtype=float))
    if model.state_dim != 2:
        raise ValueError("Lotka-Volterra extraction needs a two-state model")
    px, py = to_polynomials(model.layers, 2, threshold)
    fit = LotkaVolterraFit(px.coef(1, 0), -px.coef(1, 1), -py.coef(0, 1), py.coef(1, 1), 0.0)
    used = {((1, 0), 0), ((1, 1), 0), ((0, 1), 1), ((1, 1), 1)}
    rest = [abs(v) for j, p in enumerate((px, py)) for k, v in p.terms.items() if (k, j) not in used]
    fit.residual = max(rest, default=0.0)
    return fit


def dominant_frequency(signal: np.ndarray, oversample: int = 16) -> tuple[float, float]:
    """Dominant angular frequency (rad/step) of a real series and the share
    of its (mean-removed) energy captured by a single sinusoid there."""
    s = np.asarray(signal, dtype=float)
    s = s - s.mean()
    n = len(s)
    energy = float(np.sum(s * s))
    if energy == 0:
        return 0.0, 0.0
    nfft = oversample * n
    power = np.abs(np.fft.rfft(s * np.hanning(n), nfft))
    freqs = 2 * np.pi * np.fft.rfftfreq(nfft)
    peak = float(freqs[1 + np.argmax(power[1:])])
    k = np.arange(n)

    def fit_share(w):
        basis = np.stack([np.sin(w * k), np.cos(w * k), np.ones(n)], axis=1)
        coef, *_ = np.linalg.lstsq(basis, s, rcond=None)
        return 1.0 - float(np.sum((s - basis @ coef) ** 2)) / energy

    # the windowed peak is only accurate to a bin; refine on the fit itself
    w, half = peak, 2 * np.pi / n
    for _ in range(3):
        cands = np.clip(w + np.linspace(-half, half, 21), 1e-6, np.pi)
        shares = [fit_share(c) for c in cands]
        best = int(np.argmax(shares))
        w, share = float(cands[best]), shares[best]
        half /= 10
    return w, share


def decoupled_pair(traj: np.ndarray, min_separation: float = 0.1, min_share: float = 0.9,
                   min_energy: float = 0.01):
    """Find two states that are each nearly sinusoidal at clearly different
    frequencies.  ``traj`` is ``(n, T)``; returns ``(i, j, w_i, w_j)`` or None.

    States whose variance is below ``min_energy`` times the largest state
    variance are ignored, so a flat pruned state cannot qualify.
    """
    traj = np.asarray(traj, dtype=float)
    var = traj.var(axis=1)
    live = var >= min_energy * var.max() if var.max() > 0 else np.zeros(len(var), bool)
    stats = [dominant_frequency(row) for row in traj]
    best = None
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            (wi, si), (wj, sj) = stats[i], stats[j]
            if not (live[i] and live[j]):
                continue
            if si >= min_share and sj >= min_share and abs(wi - wj) > min_separation:
                if best is None or abs(wi - wj) > abs(best[2] - best[3]):
                    best = (i, j, wi, wj)
    return best

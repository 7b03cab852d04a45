"""Posterior-mean network.

Two branches share the input series ``x`` of shape ``(B, d, T)``:

* a dense branch that only sees the first ``init_steps`` observations and
  predicts the initial state,
* a convolutional branch over the whole series whose features are averaged
  over time before a linear read-out of the ODE parameters, so any series
  at least one receptive field long can be encoded.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SeriesTooShort(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    init_steps: int = 20
    dense_width: int = 50
    conv_channels: int = 16
    conv_layers: int = 3
    kernel: int = 3
    padding: str = "circular"  # or "zeros"
    theta_weight_scale: float = 0.1

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentCode:
    """``z = [theta, xi0]``; ``theta`` and ``xi0`` keep any batch dimensions."""

    theta: Tensor
    xi0: Tensor

    @property
    def split(self) -> int:
        return self.theta.shape[-1]

    def concat(self) -> Tensor:
        return T.concat([self.theta, self.xi0], axis=-1)

    @classmethod
    def from_z(cls, z, split: int) -> "LatentCode":
        z = T.as_tensor(z)
        return cls(z[..., :split], z[..., split:])


def _glorot(rng, fan_in, fan_out, shape):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, shape)


class EncoderNet:
    def __init__(self, obs_dim: int, state_dim: int, param_count: int,
                 cfg: EncoderConfig = EncoderConfig(), rng: np.random.Generator | None = None,
                 theta_bias: np.ndarray | None = None):
        if cfg.padding not in ("circular", "zeros"):
            raise ValueError(f"unknown padding {cfg.padding!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.obs_dim, self.state_dim, self.param_count, self.cfg = obs_dim, state_dim, param_count, cfg
        w, c, k = cfg.dense_width, cfg.conv_channels, cfg.kernel
        head = obs_dim * cfg.init_steps
        p: dict[str, np.ndarray] = {}
        p["dense0.w"] = _glorot(rng, head, w, (head, w))
        p["dense0.b"] = np.zeros(w)
        p["dense1.w"] = _glorot(rng, w, w, (w, w))
        p["dense1.b"] = np.zeros(w)
        p["dense_out.w"] = _glorot(rng, w, state_dim, (w, state_dim))
        p["dense_out.b"] = np.zeros(state_dim)
        cin = obs_dim
        for i in range(cfg.conv_layers):
            p[f"conv{i}.w"] = _glorot(rng, cin * k, c, (cin * k, c))
            p[f"conv{i}.b"] = np.zeros(c)
            cin = c
        p["theta_out.w"] = cfg.theta_weight_scale * _glorot(rng, cin, param_count, (cin, param_count))
        p["theta_out.b"] = (np.zeros(param_count) if theta_bias is None
                            else np.asarray(theta_bias, dtype=float).copy())
        self.params = p

    @property
    def receptive_field(self) -> int:
        return 1 + self.cfg.conv_layers * (self.cfg.kernel - 1)

    @property
    def min_length(self) -> int:
        return max(self.cfg.init_steps, self.receptive_field)

    @property
    def latent_dim(self) -> int:
        return self.param_count + self.state_dim

    def _conv(self, h: Tensor, w: Tensor, b: Tensor) -> Tensor:
        # h: (B, T, C) time-major
        k = self.cfg.kernel
        left, right = (k - 1) // 2, k // 2
        Tn = h.shape[1]
        if self.cfg.padding == "circular":
            parts = []
            if left:
                parts.append(h[:, Tn - left:, :])
            parts.append(h)
            if right:
                parts.append(h[:, :right, :])
        else:
            zl = np.zeros((h.shape[0], left, h.shape[2]))
            zr = np.zeros((h.shape[0], right, h.shape[2]))
            parts = [zl, h, zr]
        padded = T.concat(parts, axis=1)
        windows = T.concat([padded[:, j:j + Tn, :] for j in range(k)], axis=2)
        return T.relu(T.add(T.matmul(windows, w), b))

    def forward(self, x, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """Posterior mean ``(B, m)`` ordered ``[theta, xi0]``."""
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.obs_dim:
            raise T.ShapeError("encode", (None, self.obs_dim, None), x.shape)
        if x.shape[2] < self.min_length:
            raise SeriesTooShort(f"series of length {x.shape[2]} is shorter than the "
                                 f"minimum encoder length {self.min_length}")
        p = self.params if params is None else params
        B = x.shape[0]
        head = T.reshape(x[:, :, :self.cfg.init_steps], (B, self.obs_dim * self.cfg.init_steps))
        h = T.relu(T.add(T.matmul(head, p["dense0.w"]), p["dense0.b"]))
        h = T.relu(T.add(T.matmul(h, p["dense1.w"]), p["dense1.b"]))
        xi0 = T.add(T.matmul(h, p["dense_out.w"]), p["dense_out.b"])
        c = T.swapaxes(x, 1, 2)
        for i in range(self.cfg.conv_layers):
            c = self._conv(c, p[f"conv{i}.w"], p[f"conv{i}.b"])
        pooled = T.mean(c, axis=1)
        theta = T.add(T.matmul(pooled, p["theta_out.w"]), p["theta_out.b"])
        return T.concat([theta, xi0], axis=1)


def encode_mean(net: EncoderNet, x, params=None) -> LatentCode:
    return LatentCode.from_z(net.forward(x, params), net.param_count)


def sample_posterior(mean: LatentCode | Tensor, sigma_z, noise_seed=None,
                     rng: np.random.Generator | None = None):
    """``mean + sigma_z * eps`` with ``eps ~ N(0, I)`` (reparametrized)."""
    if rng is None:
        rng = np.random.default_rng(noise_seed)
    if isinstance(mean, LatentCode):
        z = mean.concat()
        eps = rng.standard_normal(z.shape)
        return LatentCode.from_z(T.add(z, T.mul(sigma_z, eps)), mean.split)
    mean = T.as_tensor(mean)
    eps = rng.standard_normal(mean.shape)
    return T.add(mean, T.mul(sigma_z, eps))

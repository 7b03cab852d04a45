"""Variational objective with an ARD prior on the latent ODE code, and the
training loop that fits encoder weights together with the shared scales
``sigma_z``, ``lambda_z`` and ``sigma_x``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import tensor as T
from .arithmetic import Architecture, unflatten_params
from .encoder import EncoderConfig, EncoderNet
from .solver import DivergenceError, ObservationOperator, TimeGrid, observe, solve
from .tensor import Tensor

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-4
LOG_FLOOR = math.log(SCALE_FLOOR)
LOG_2PI = math.log(2 * math.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_final: float = 0.0             # >0: exponential decay to this rate at the last epoch
    epochs: int = 5000
    mc_samples: int = 1
    seed: int = 0
    ard_enabled: bool = True
    model_arch: str = "nau:3x3"
    observation: str = "1,0,0"
    method: str = "rk4"
    substeps: int = 1
    unhalved_kl: bool = False
    prior_scale: float = 1.0          # fixed prior scale when ARD is off
    jeffreys_hyperprior: bool = True  # adds log(lambda_z)/L, the MAP term of p(lambda)=1/lambda
    divergence_loss: float = 1e4
    clip_norm: float = 0.0            # 0 disables global-norm clipping
    nau_init_scale: float = 0.1       # initial NAU entries of the theta read-out bias
    horizon_start: int = 0            # >0: fit only this many leading steps at first
    horizon_epochs: int = 0           # epochs over which the fitted horizon grows to the full window
    kl_warmup_epochs: int = 0         # epochs over which the prior terms ramp in from weight 0
    init_log_sigma_z: float = math.log(0.1)
    init_log_lambda_z: float = math.log(1.0)
    init_log_sigma_x: float = math.log(0.5)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.horizon_start < 0 or self.horizon_epochs < 0 or self.kl_warmup_epochs < 0:
            raise ValueError("horizon_start, horizon_epochs and kl_warmup_epochs must be >= 0")
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def arch(self) -> Architecture:
        return Architecture.parse(self.model_arch)


@dataclass
class Decoder:
    """``z -> H psi(theta, xi0, t)``; has no trainable parameters."""

    arch: Architecture
    H: ObservationOperator
    method: str = "rk4"
    substeps: int = 1

    def __post_init__(self):
        if self.H.state_dim != self.arch.state_dim:
            raise ValueError(f"observation operator acts on {self.H.state_dim} states, "
                             f"model {self.arch} has {self.arch.state_dim}")

    @property
    def latent_dim(self) -> int:
        return self.arch.param_count + self.arch.state_dim

    def trajectory(self, z, grid: TimeGrid | None = None) -> Tensor:
        z = T.as_tensor(z)
        k = self.arch.param_count
        model = unflatten_params(self.arch, z[..., :k])
        return solve(model, z[..., k:], grid or self.H.grid, self.method, self.substeps)

    def __call__(self, z, grid: TimeGrid | None = None) -> Tensor:
        return observe(self.trajectory(z, grid), self.H)


@dataclass
class PosteriorState:
    encoder: EncoderNet
    log_sigma_z: np.ndarray
    log_lambda_z: np.ndarray
    log_sigma_x: np.ndarray  # shape ()

    @classmethod
    def initial(cls, cfg: TrainConfig, obs_dim: int, rng: np.random.Generator) -> "PosteriorState":
        arch = cfg.arch
        enc_rng, theta_rng = rng.spawn(2)
        net = EncoderNet(obs_dim, arch.state_dim, arch.param_count, cfg.encoder, enc_rng,
                         theta_bias=arch.init_params(theta_rng, cfg.nau_init_scale))
        m = net.latent_dim
        return cls(net, np.full(m, cfg.init_log_sigma_z), np.full(m, cfg.init_log_lambda_z),
                   np.array(cfg.init_log_sigma_x))

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out["log_sigma_z"] = self.log_sigma_z
        out["log_lambda_z"] = self.log_lambda_z
        out["log_sigma_x"] = np.asarray(self.log_sigma_x)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k in self.encoder.params:
            self.encoder.params[k] = np.array(arrays[f"encoder.{k}"], dtype=float)
        self.log_sigma_z = np.array(arrays["log_sigma_z"], dtype=float)
        self.log_lambda_z = np.array(arrays["log_lambda_z"], dtype=float)
        self.log_sigma_x = np.array(arrays["log_sigma_x"], dtype=float)

    @property
    def sigma_z(self) -> np.ndarray:
        return np.exp(np.maximum(self.log_sigma_z, LOG_FLOOR))

    @property
    def lambda_z(self) -> np.ndarray:
        return np.exp(np.maximum(self.log_lambda_z, LOG_FLOOR))

    @property
    def sigma_x(self) -> float:
        return float(np.exp(max(float(self.log_sigma_x), LOG_FLOOR)))

    def encode(self, X: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Posterior means for a stack of series, without a tape."""
        X = np.asarray(X, dtype=float)
        return np.concatenate([self.encoder.forward(X[i:i + chunk]).data
                               for i in range(0, len(X), chunk)], axis=0)


def _floored_exp(log_scale) -> Tensor:
    return T.exp(T.maximum(log_scale, LOG_FLOOR))


def reconstruction_nll(x, pred, sigma_x) -> Tensor:
    """Per-sample Gaussian negative log-likelihood, including ``log(2 pi)``.

    ``x`` and ``pred`` are ``(..., d, T)``; returns shape ``(...)``.
    """
    x = T.as_tensor(x)
    sigma_x = T.as_tensor(sigma_x)
    if np.any(sigma_x.data <= 0):
        raise ValueError("sigma_x must be positive")
    count = x.shape[-1] * x.shape[-2]
    resid = T.sum_(T.square(T.sub(x, pred)), axis=(-2, -1))
    var = T.square(sigma_x)
    return T.add(T.div(resid, T.mul(var, 2.0)), T.mul(T.add(T.log(var), LOG_2PI), 0.5 * count))


def kl_ard(mu, sigma_z, lambda_z, unhalved: bool = False) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, lambda^2)) summed over the last axis.

    With ``unhalved`` the un-halved variant with a single ``-m`` offset is
    returned instead of the textbook closed form.
    """
    mu, sigma_z, lambda_z = T.as_tensor(mu), T.as_tensor(sigma_z), T.as_tensor(lambda_z)
    if np.any(sigma_z.data <= 0) or np.any(lambda_z.data <= 0):
        raise ValueError("kl_ard needs strictly positive scales")
    ls, ll = T.square(sigma_z), T.square(lambda_z)
    per_dim = T.add(T.add(T.log(T.div(ll, ls)), T.div(ls, ll)), T.div(T.square(mu), ll))
    m = mu.shape[-1]
    total = T.sum_(per_dim, axis=-1)
    if unhalved:
        return T.sub(total, float(m))
    return T.mul(T.sub(total, float(m)), 0.5)


@dataclass
class LossParts:
    loss: Tensor
    nll: float
    kl: float
    diverged: int


def elbo_loss(x, params: dict[str, Tensor], net: EncoderNet, decoder: Decoder,
              cfg: TrainConfig, rng: np.random.Generator, dataset_size: int = 1,
              horizon: int | None = None, kl_weight: float = 1.0) -> LossParts:
    """Negative ELBO averaged over the batch (the quantity minimized).

    The encoder always sees the whole series; with ``horizon`` the
    reconstruction term covers only the first ``horizon`` steps.  ``kl_weight``
    scales the KL and hyperprior terms; the reported ``kl`` is unscaled.

    ``params`` maps the names of :meth:`PosteriorState.arrays` to tensors,
    watched when gradients are wanted.
    """
    x = T.as_tensor(x)
    B = x.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    enc_params = {k[len("encoder."):]: v for k, v in params.items() if k.startswith("encoder.")}
    mu = net.forward(x, enc_params)
    sig = _floored_exp(params["log_sigma_z"])
    sx = _floored_exp(params["log_sigma_x"])
    if cfg.ard_enabled:
        lam = _floored_exp(params["log_lambda_z"])
    else:
        lam = Tensor(np.full(mu.shape[-1], cfg.prior_scale))

    target = x
    if horizon is not None and horizon < x.shape[-1] - 1:
        target = x[..., :horizon + 1]
    grid = _grid_for(target, decoder)
    nll_total = None
    diverged = 0
    for _ in range(cfg.mc_samples):
        z = T.add(mu, T.mul(sig, rng.standard_normal(mu.shape)))
        keep = np.arange(B)
        while True:
            zk = z if len(keep) == B else z[keep]
            try:
                pred = decoder(zk, grid)
                break
            except DivergenceError as err:
                keep = np.delete(keep, list(err.samples))
                if len(keep) == 0:
                    pred = None
                    break
        lost = B - len(keep)
        diverged += lost
        if pred is not None:
            xk = target if len(keep) == B else target[keep]
            part = T.sum_(reconstruction_nll(xk, pred, sx))
            part = T.add(part, lost * cfg.divergence_loss)
        else:
            part = Tensor(B * cfg.divergence_loss)
        nll_total = part if nll_total is None else T.add(nll_total, part)
    nll = T.div(nll_total, float(cfg.mc_samples * B))
    kl = T.mean(kl_ard(mu, sig, lam, cfg.unhalved_kl))
    prior = kl
    if cfg.ard_enabled and cfg.jeffreys_hyperprior:
        prior = T.add(prior, T.div(T.sum_(T.log(lam)), float(dataset_size)))
    loss = T.add(nll, prior if kl_weight == 1.0 else T.mul(prior, kl_weight))
    return LossParts(loss, float(nll.data), float(kl.data), diverged)


def _grid_for(x: Tensor, decoder: Decoder) -> TimeGrid:
    g = decoder.H.grid
    n = x.shape[-1] - 1
    return g if n == g.steps else TimeGrid(g.dt, n, g.origin)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays.get("adam.t", 0))
        for key, val in arrays.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = np.array(val, dtype=float)
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = np.array(val, dtype=float)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    nll: float
    kl: float
    sigma_x: float
    lambda_z: np.ndarray
    diverged: int = 0


@dataclass
class TrainResult:
    state: PosteriorState
    records: list[EpochRecord]
    optimizer: Adam
    epochs_done: int


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Rate for ``epoch``; the schedule spans ``cfg.epochs`` counted from 0,
    so a resumed run continues the same curve."""
    if cfg.lr_final <= 0 or cfg.epochs <= 1:
        return cfg.learning_rate
    frac = min(epoch / (cfg.epochs - 1), 1.0)
    return cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** frac


def horizon_at(cfg: TrainConfig, epoch: int, steps: int) -> int:
    """Number of leading steps fitted at ``epoch``; grows linearly from
    ``cfg.horizon_start`` to ``steps`` over ``cfg.horizon_epochs``."""
    if cfg.horizon_start <= 0 or cfg.horizon_start >= steps:
        return steps
    if cfg.horizon_epochs <= 0 or epoch >= cfg.horizon_epochs:
        return steps
    return int(cfg.horizon_start + (steps - cfg.horizon_start) * epoch // cfg.horizon_epochs)


def kl_weight_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.kl_warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / cfg.kl_warmup_epochs)


def make_decoder(cfg: TrainConfig, grid: TimeGrid) -> Decoder:
    return Decoder(cfg.arch, ObservationOperator.parse(cfg.observation, grid),
                   cfg.method, cfg.substeps)


def train(X: np.ndarray, grid: TimeGrid, cfg: TrainConfig, state: PosteriorState | None = None,
          optimizer: Adam | None = None, start_epoch: int = 0,
          callback: Callable[[EpochRecord], None] | None = None,
          stop_epoch: int | None = None) -> TrainResult:
    """Minimize the negative ELBO over ``X`` (``(L, d, K+1)``).

    ``cfg.epochs`` is the total epoch count.  Passing ``state``,
    ``optimizer`` and ``start_epoch`` resumes an earlier run up to that
    total; batches and noise are drawn from ``(seed, epoch)`` streams, so a
    resumed run matches an uninterrupted one.  ``stop_epoch`` ends the run
    early without changing the learning-rate schedule.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 3 or len(X) == 0:
        raise ValueError(f"expected a non-empty (L, d, T) array, got shape {X.shape}")
    decoder = make_decoder(cfg, grid)
    if X.shape[1] != decoder.H.obs_dim:
        raise ValueError(f"data has {X.shape[1]} observed channels, operator {decoder.H} has "
                         f"{decoder.H.obs_dim}")
    if state is None:
        state = PosteriorState.initial(cfg, X.shape[1], np.random.default_rng(cfg.seed))
    opt = optimizer or Adam(cfg.learning_rate)
    names = list(state.arrays())
    if not cfg.ard_enabled:
        names.remove("log_lambda_z")
    L = len(X)
    records: list[EpochRecord] = []
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, end):
        opt.lr = learning_rate_at(cfg, epoch)
        horizon = horizon_at(cfg, epoch, X.shape[-1] - 1)
        beta = kl_weight_at(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(L)
        tot = {"loss": 0.0, "nll": 0.0, "kl": 0.0}
        div = 0
        for start in range(0, L, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            arrays = state.arrays()
            with T.Tape() as tape:
                params = {k: (tape.watch(v) if k in names else T.Tensor(v)) for k, v in arrays.items()}
                parts = elbo_loss(X[idx], params, state.encoder, decoder, cfg, rng, L, horizon, beta)
                grads = tape.backward(parts.loss)
            if not np.isfinite(parts.loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            g = {k: (grads[params[k].grad_id].data if params[k].grad_id in grads
                     else np.zeros_like(arrays[k])) for k in names}
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.sum(v * v)) for v in g.values()))
                if norm > cfg.clip_norm:
                    g = {k: v * (cfg.clip_norm / norm) for k, v in g.items()}
            opt.step(arrays, g)
            state.load_arrays(arrays)
            w = len(idx) / L
            tot["loss"] += w * float(parts.loss.data)
            tot["nll"] += w * parts.nll
            tot["kl"] += w * parts.kl
            div += parts.diverged
        rec = EpochRecord(epoch, tot["loss"], tot["nll"], tot["kl"], state.sigma_x,
                          state.lambda_z.copy(), div)
        records.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("epoch %d loss %.4f nll %.4f kl %.4f", epoch, rec.loss, rec.nll, rec.kl)
    return TrainResult(state, records, opt, max(start_epoch, end))


def relevance_mask(state: PosteriorState, X: np.ndarray | None, tau: float = 0.1,
                   use_lambda: bool = True, means: np.ndarray | None = None) -> np.ndarray:
    """Latent dimensions with non-negligible prior scale or posterior mean.

    Dimension ``i`` is relevant when ``lambda_i > tau * max(lambda)`` or the
    dataset average of ``|mu_i|`` exceeds ``tau`` times its largest value.
    ``use_lambda=False`` drops the first clause, for models trained with a
    fixed prior whose scale carries no information.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if means is None:
        means = state.encode(X)
    avg = np.mean(np.abs(means), axis=0)
    mask = avg > tau * np.max(avg) if np.max(avg) > 0 else np.zeros(len(avg), bool)
    if use_lambda:
        lam = state.lambda_z
        mask = mask | (lam > tau * np.max(lam))
    return mask

"""Neural addition/multiplication layers used as an ODE right-hand side.

Weights may carry leading batch dimensions, ``(..., out, in)``, so one model
object evaluates a whole batch of per-sample parameter sets at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerShape:
    kind: str  # "nau" | "nmu"
    out_dim: int
    in_dim: int

    @property
    def size(self) -> int:
        return self.out_dim * self.in_dim

    def __str__(self) -> str:
        return f"{self.kind}:{self.out_dim}x{self.in_dim}"


@dataclass(frozen=True)
class Architecture:
    """Layer shapes of an ODE model, input-to-output.

    Parsed from strings like ``"nmu:3x2|nau:2x3"``; each ``OUTxIN`` is the
    weight matrix shape of that layer.
    """

    layers: tuple[LayerShape, ...]

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        layers = []
        for part in text.replace(" ", "").split("|"):
            try:
                kind, dims = part.split(":")
                out_dim, in_dim = (int(v) for v in dims.lower().split("x"))
            except ValueError:
                raise ArchitectureError(f"cannot parse layer {part!r} in {text!r}") from None
            if kind not in ("nau", "nmu"):
                raise ArchitectureError(f"unknown layer kind {kind!r}")
            if out_dim < 1 or in_dim < 1:
                raise ArchitectureError(f"layer {part!r} has an empty dimension")
            layers.append(LayerShape(kind, out_dim, in_dim))
        arch = cls(tuple(layers))
        arch.validate()
        return arch

    def validate(self):
        if not self.layers:
            raise ArchitectureError("architecture has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ArchitectureError(f"layer {a} does not chain into {b}")
        if self.layers[-1].out_dim != self.layers[0].in_dim:
            raise ArchitectureError(
                f"final output dim {self.layers[-1].out_dim} != state dim {self.layers[0].in_dim}")

    @property
    def state_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def param_count(self) -> int:
        return sum(l.size for l in self.layers)

    def __str__(self) -> str:
        return "|".join(str(l) for l in self.layers)

    def init_params(self, rng: np.random.Generator, nau_scale: float = 1.0) -> np.ndarray:
        """Initial flat parameter vector: NMU entries uniform in [0.25, 0.75]
        (inside the clamp, where gradients are alive), NAU Glorot uniform
        times ``nau_scale``."""
        parts = []
        for l in self.layers:
            if l.kind == "nmu":
                parts.append(rng.uniform(0.25, 0.75, l.size))
            else:
                r = nau_scale * np.sqrt(6.0 / (l.in_dim + l.out_dim))
                parts.append(rng.uniform(-r, r, l.size))
        return np.concatenate(parts)


@dataclass
class NauLayer:
    W: Tensor

    def __call__(self, x) -> Tensor:
        return nau_forward(self.W, x)


@dataclass
class NmuLayer:
    M: Tensor

    def __post_init__(self):
        self._gate = None

    def __call__(self, x) -> Tensor:
        # the clamp is shared by every evaluation within one solve
        if self._gate is None:
            self._gate = T.clamp(self.M, 0.0, 1.0)
        return _nmu_gated(self._gate, T.as_tensor(x))


def _check_dims(op, W, x):
    if W.ndim < 2 or x.ndim < 1 or W.shape[-1] != x.shape[-1]:
        raise T.ShapeError(op, W.shape, x.shape)


def nau_forward(W, x) -> Tensor:
    W, x = T.as_tensor(W), T.as_tensor(x)
    _check_dims("nau_forward", W, x)
    return T.matvec(W, x)


def nmu_forward(M, x) -> Tensor:
    """``out_i = prod_j (x_j * m_ij + 1 - m_ij)`` with ``m = clamp(M, 0, 1)``."""
    M, x = T.as_tensor(M), T.as_tensor(x)
    _check_dims("nmu_forward", M, x)
    return _nmu_gated(T.clamp(M, 0.0, 1.0), x)


def _nmu_gated(m: Tensor, x: Tensor) -> Tensor:
    _check_dims("nmu_forward", m, x)
    xe = T.reshape(x, x.shape[:-1] + (1, x.shape[-1]))
    # x*m + (1 - m) is exact for binary gates: x at m=1, 1 at m=0
    return T.prod(T.add(T.mul(m, xe), T.sub(1.0, m)), axis=-1)


class OdeModel:
    """A stack of NAU/NMU layers defining ``d xi/dt = f(xi)``.

    The model is autonomous; ``t`` is accepted for interface symmetry only.
    """

    def __init__(self, arch: Architecture, layers: Sequence[NauLayer | NmuLayer]):
        self.arch = arch
        self.layers = list(layers)

    @property
    def state_dim(self) -> int:
        return self.arch.state_dim

    @property
    def param_count(self) -> int:
        return self.arch.param_count

    def __call__(self, xi, t=None) -> Tensor:
        h = xi
        for layer in self.layers:
            h = layer(h)
        return h

    def weights(self) -> list[np.ndarray]:
        return [(l.W if isinstance(l, NauLayer) else l.M).data for l in self.layers]


def unflatten_params(arch: Architecture | OdeModel, theta) -> OdeModel:
    """Split ``theta`` (``(..., m_theta)``) into layer weights.

    Ordering is layer-major, then row-major within each weight matrix.
    """
    if isinstance(arch, OdeModel):
        arch = arch.arch
    theta = T.as_tensor(theta)
    if theta.ndim < 1 or theta.shape[-1] != arch.param_count:
        raise ValueError(f"theta has length {theta.shape[-1] if theta.ndim else 0}, "
                         f"architecture {arch} needs {arch.param_count}")
    lead = theta.shape[:-1]
    layers = []
    off = 0
    for layer in arch.layers:
        w = T.reshape(theta[..., off:off + layer.size], lead + (layer.out_dim, layer.in_dim))
        layers.append(NauLayer(w) if layer.kind == "nau" else NmuLayer(w))
        off += layer.size
    return OdeModel(arch, layers)


def flatten_params(model: OdeModel) -> Tensor:
    parts = []
    for layer in model.layers:
        w = layer.W if isinstance(layer, NauLayer) else layer.M
        parts.append(T.reshape(w, w.shape[:-2] + (w.shape[-2] * w.shape[-1],)))
    return T.concat(parts, axis=-1)


def model_from_weights(arch: Architecture | str, weights: Sequence) -> OdeModel:
    """Convenience constructor from a list of plain weight matrices."""
    if isinstance(arch, str):
        arch = Architecture.parse(arch)
    theta = np.concatenate([np.asarray(w, dtype=float).reshape(-1) for w in weights])
    return unflatten_params(arch, theta)


# ------------------------------------------------------------ symbolic view

class Polynomial:
    """Sparse multivariate polynomial: ``{exponent tuple: coefficient}``."""

    def __init__(self, nvars: int, terms: dict | None = None):
        self.nvars = nvars
        self.terms = {k: v for k, v in (terms or {}).items() if v != 0.0}

    @classmethod
    def const(cls, nvars, c):
        return cls(nvars, {(0,) * nvars: float(c)})

    @classmethod
    def var(cls, nvars, i):
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    def __add__(self, other: "Polynomial") -> "Polynomial":
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, 0.0) + v
        return Polynomial(self.nvars, out)

    def scale(self, c: float) -> "Polynomial":
        return Polynomial(self.nvars, {k: c * v for k, v in self.terms.items()})

    def __mul__(self, other: "Polynomial") -> "Polynomial":
        out: dict = {}
        for ka, va in self.terms.items():
            for kb, vb in other.terms.items():
                k = tuple(a + b for a, b in zip(ka, kb))
                out[k] = out.get(k, 0.0) + va * vb
        return Polynomial(self.nvars, out)

    def coef(self, *exponents) -> float:
        return self.terms.get(tuple(exponents), 0.0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1])
        for k, v in self.terms.items():
            total = total + v * np.prod(x ** np.asarray(k), axis=-1)
        return total

    def _order(self):
        return sorted(self.terms, key=lambda k: (sum(k), [-e for e in k]))

    def render(self, names: Sequence[str], style: str = "text", digits: int = 4) -> str:
        if not self.terms:
            return "0"
        pieces = []
        for k in self._order():
            c = self.terms[k]
            factors = []
            for name, e in zip(names, k):
                if e == 0:
                    continue
                if style == "latex":
                    factors.append(name if e == 1 else f"{name}^{{{e}}}")
                else:
                    factors.append(name if e == 1 else f"{name}^{e}")
            mono = ("" if style == "latex" else "·").join(factors)
            mag = f"{abs(c):.{digits}g}"
            if not mono:
                body = mag
            elif mag == "1":
                body = mono
            else:
                body = mag + ("" if style == "latex" else "·") + mono
            pieces.append(("-" if c < 0 else "+", body))
        sign, body = pieces[0]
        out = ("-" if sign == "-" else "") + body
        for sign, body in pieces[1:]:
            out += f" {sign} {body}"
        return out


def _pruned(kind: str, w: np.ndarray, threshold: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if kind == "nmu":
        m = np.clip(w, 0.0, 1.0)
        m = np.where(m < threshold, 0.0, m)
        return np.where(m > 1.0 - threshold, 1.0, m)
    scale = np.max(np.abs(w)) if w.size else 0.0
    return np.where(np.abs(w) < threshold * scale, 0.0, w)


def to_polynomials(layers: Sequence, in_dim: int, threshold: float = 0.0) -> list[Polynomial]:
    """Expand a layer stack into one polynomial per output.

    ``layers`` holds ``(kind, weight matrix)`` pairs or layer objects with
    unbatched weights.  NAU weights below ``threshold`` times the layer's
    largest magnitude are dropped; clamped NMU weights within ``threshold``
    of 0 or 1 are snapped there.  Non-binary NMU weights still expand
    exactly, since each factor ``m*x + 1 - m`` is affine.
    """
    polys = [Polynomial.var(in_dim, i) for i in range(in_dim)]
    for layer in layers:
        if isinstance(layer, NauLayer):
            kind, w = "nau", layer.W.data
        elif isinstance(layer, NmuLayer):
            kind, w = "nmu", layer.M.data
        else:
            kind, w = layer
        w = _pruned(kind, w, threshold)
        if w.ndim != 2 or w.shape[1] != len(polys):
            raise T.ShapeError("to_polynomials", w.shape, (len(polys),))
        new = []
        for row in w:
            if kind == "nau":
                acc = Polynomial(in_dim)
                for c, p in zip(row, polys):
                    if c != 0.0:
                        acc = acc + p.scale(c)
            else:
                acc = Polynomial.const(in_dim, 1.0)
                for m, p in zip(row, polys):
                    if m != 0.0:
                        acc = acc * (p.scale(m) + Polynomial.const(in_dim, 1.0 - m))
            new.append(acc)
        polys = new
    return polys


def render_expressions(layers, in_dim: int, threshold: float = 0.05, style: str = "text",
                       var: str = "x") -> list[str]:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    sep = "_" if style == "latex" else ""
    names = [f"{var}{sep}{i + 1}" for i in range(in_dim)]
    return [p.render(names, style) for p in to_polynomials(layers, in_dim, threshold)]


def render_equation(model: OdeModel, threshold: float = 0.05, style: str = "text",
                    var: str = "s") -> str:
    """One ``ds_i/dt = ...`` line per state variable of an unbatched model."""
    n = model.state_dim
    rhs = render_expressions(model.layers, n, threshold, style, var)
    sep = "_" if style == "latex" else ""
    return "\n".join(f"d{var}{sep}{i + 1}/dt = {r}" for i, r in enumerate(rhs))

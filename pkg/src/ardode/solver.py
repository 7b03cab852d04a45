"""Fixed-step explicit Runge-Kutta integration on the gradient tape.

Gradients come from backpropagating through the unrolled steps
(discretize-then-optimize); there is no adjoint solve.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

DIVERGENCE_LIMIT = 1e6


class DivergenceError(FloatingPointError):
    """The state left the finite/bounded region during a solve."""

    def __init__(self, step: int, samples=()):
        self.step = step
        self.samples = tuple(int(s) for s in samples)
        super().__init__(f"ODE solve diverged at step {step} (samples {list(self.samples)})")


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int
    origin: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be a positive integer")

    @property
    def times(self) -> np.ndarray:
        return self.origin + self.dt * np.arange(self.steps + 1)

    @property
    def length(self) -> int:
        return self.steps + 1


@dataclass(frozen=True)
class ObservationOperator:
    matrix: np.ndarray
    grid: TimeGrid = field(default_factory=lambda: TimeGrid(0.1, 100))

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", H)
        d, n = H.shape
        if d > n:
            raise ValueError(f"observation operator has more rows ({d}) than states ({n})")
        if np.any(np.all(H == 0, axis=1)):
            raise ValueError("every row of the observation operator needs a nonzero entry")

    @property
    def obs_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def state_dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def parse(cls, text: str, grid: TimeGrid) -> "ObservationOperator":
        """``"1,0,0"`` for one row, ``"1,0;0,1"`` for several."""
        rows = [[float(v) for v in r.split(",")] for r in text.replace(" ", "").split(";")]
        return cls(np.array(rows), grid)

    def __str__(self) -> str:
        return ";".join(",".join(f"{v:g}" for v in row) for row in self.matrix)


@dataclass(frozen=True)
class Tableau:
    name: str
    a: tuple[tuple[float, ...], ...]
    b: tuple[float, ...]
    c: tuple[float, ...]
    order: int


RK4 = Tableau(
    "rk4",
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    c=(0.0, 0.5, 0.5, 1.0),
    order=4,
)

# Tsitouras (2011) 5th-order weights of the Tsit5 pair, used here without its
# embedded error estimate.
TSIT5 = Tableau(
    "tsit5",
    a=(
        (),
        (0.161,),
        (-0.008480655492356989, 0.335480655492357),
        (2.897153057105493, -6.359448489975075, 4.3622954328695815),
        (5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525),
        (5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401,
         -0.028269050394068383),
    ),
    b=(0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
       -3.290069515436081, 2.324710524099774),
    c=(0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0),
    order=5,
)

TABLEAUS = {"rk4": RK4, "tsit5": TSIT5}


def rk_step(f: Callable, y: Tensor, t: float, h: float, tab: Tableau = RK4) -> Tensor:
    ks: list[Tensor] = []
    for i, row in enumerate(tab.a):
        if i == 0:
            yi = y
        else:
            terms = [y] + [ks[j] for j, a in enumerate(row) if a != 0.0]
            coefs = [1.0] + [h * a for a in row if a != 0.0]
            yi = T.lincomb(terms, coefs)
        ks.append(f(yi, t + tab.c[i] * h))
    terms = [y] + [k for k, b in zip(ks, tab.b) if b != 0.0]
    coefs = [1.0] + [h * b for b in tab.b if b != 0.0]
    return T.lincomb(terms, coefs)


def solve(model: Callable, xi0, grid: TimeGrid, method: str = "rk4", substeps: int = 1,
          limit: float = DIVERGENCE_LIMIT) -> Tensor:
    """Integrate ``d xi/dt = model(xi, t)`` over ``grid``.

    ``xi0`` has shape ``(..., n)``; the result has shape ``(..., n, K+1)``
    with column 0 equal to ``xi0``.  Raises :class:`DivergenceError` as soon
    as any state is non-finite or exceeds ``limit`` in magnitude.
    """
    if method not in TABLEAUS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(TABLEAUS)}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    tab = TABLEAUS[method]
    y = T.as_tensor(xi0)
    n = getattr(model, "state_dim", None)
    if n is not None and y.shape[-1] != n:
        raise T.ShapeError("solve", (n,), y.shape)
    h = grid.dt / substeps
    states = [y]
    t = grid.origin
    for k in range(1, grid.steps + 1):
        for _ in range(substeps):
            y = rk_step(model, y, t, h, tab)
            t += h
        d = y.data
        if not np.all(np.abs(d) <= limit):  # also catches nan
            bad = ~np.all(np.abs(d) <= limit, axis=-1)
            raise DivergenceError(k, np.flatnonzero(np.atleast_1d(bad)))
        states.append(y)
    return T.stack(states, axis=-1)


def observe(traj, H: ObservationOperator | np.ndarray) -> Tensor:
    """Apply the observation matrix to every time column: ``(..., n, K+1) -> (..., d, K+1)``."""
    M = H.matrix if isinstance(H, ObservationOperator) else np.atleast_2d(np.asarray(H, float))
    traj = T.as_tensor(traj)
    if traj.ndim < 2 or traj.shape[-2] != M.shape[1]:
        raise T.ShapeError("observe", M.shape, traj.shape)
    return T.matmul(M, traj)

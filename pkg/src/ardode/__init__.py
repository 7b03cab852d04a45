"""Sparse identification of ODE systems from partial observations.

A convolutional encoder maps each observed series to a latent code holding
the parameters of a neural-arithmetic ODE right-hand side and its initial
state.  An ARD prior on that code prunes the parameters the data does not
need, leaving a small, readable equation.
"""
from .arithmetic import Architecture, OdeModel, Polynomial, render_equation, render_expressions
from .datagen import Dataset, gen_double_harmonic, gen_harmonic, gen_lotka_volterra, generate
from .reidentify import ReidOptions, reidentify, reidentify_batch
from .solver import DivergenceError, ObservationOperator, TimeGrid, solve
from .tensor import Tape, Tensor
from .vae import PosteriorState, TrainConfig, kl_ard, relevance_mask, train

__version__ = "0.1.0"

__all__ = [
    "Architecture", "OdeModel", "Polynomial", "render_equation", "render_expressions",
    "Dataset", "gen_harmonic", "gen_double_harmonic", "gen_lotka_volterra", "generate",
    "ReidOptions", "reidentify", "reidentify_batch",
    "DivergenceError", "ObservationOperator", "TimeGrid", "solve",
    "Tape", "Tensor", "PosteriorState", "TrainConfig", "kl_ard", "relevance_mask", "train",
]

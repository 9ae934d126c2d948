"""Single-hidden-layer SELU network with hand-derived gradients, plus Adam.

Matrices are plain float64 ``numpy`` arrays. Every forward pass accepts either
one input vector ``(in,)`` or a batch ``(B, in)``; the backward pass mirrors
the shape and sums parameter gradients over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from partivae.errors import DimensionError, TrainingError

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

DEFAULT_HIDDEN = 1024


def selu(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    # branch-free: masked numpy ops are several times slower on (128, 1024) blocks
    h = np.expm1(np.minimum(z, 0.0))
    h *= SELU_ALPHA
    h += np.maximum(z, 0.0)
    h *= SELU_LAMBDA
    return h


def selu_grad(z: np.ndarray, h: np.ndarray | None = None) -> np.ndarray:
    """Derivative of :func:`selu`; pass ``h = selu(z)`` to skip the exponential."""
    z = np.asarray(z, dtype=np.float64)
    g = (selu(z) if h is None else h) + SELU_LAMBDA * SELU_ALPHA
    np.copyto(g, SELU_LAMBDA, where=z > 0)
    return g


@dataclass
class MlpParams:
    """Weights of ``out = w2 @ selu(w1 @ x + b1) + b2``.

    ``w1`` has shape (hidden, in) and ``w2`` has shape (out, hidden).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise DimensionError("w1 and w2 must be 2-D")
        hidden = self.w1.shape[0]
        if self.b1.shape != (hidden,):
            raise DimensionError(f"b1 has shape {self.b1.shape}, expected ({hidden},)")
        if self.w2.shape[1] != hidden:
            raise DimensionError(f"w2 has {self.w2.shape[1]} columns, expected {hidden}")
        if self.b2.shape != (self.w2.shape[0],):
            raise DimensionError(f"b2 has shape {self.b2.shape}, expected ({self.w2.shape[0]},)")

    @property
    def n_in(self) -> int:
        return self.w1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_out(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "MlpParams":
        return MlpParams(*(a.copy() for a in self.arrays()))

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls(*(np.zeros_like(a) for a in other.arrays()))


def init_mlp(
    n_in: int,
    n_out: int,
    hidden: int = DEFAULT_HIDDEN,
    rng: np.random.Generator | None = None,
    zero_output: bool = False,
) -> MlpParams:
    """Glorot-uniform weights, zero biases.

    With ``zero_output`` the second layer starts at zero so the network
    output is identically zero.
    """
    rng = np.random.default_rng() if rng is None else rng
    lim1 = np.sqrt(6.0 / (n_in + hidden)) if n_in + hidden > 0 else 0.0
    w1 = rng.uniform(-lim1, lim1, size=(hidden, n_in))
    if zero_output:
        w2 = np.zeros((n_out, hidden))
    else:
        lim2 = np.sqrt(6.0 / (hidden + n_out))
        w2 = rng.uniform(-lim2, lim2, size=(n_out, hidden))
    return MlpParams(w1, np.zeros(hidden), w2, np.zeros(n_out))


@dataclass(frozen=True)
class GradTape:
    """Activations cached by :func:`mlp_forward` for one (possibly batched) pass."""

    params: MlpParams
    x: np.ndarray  # (B, in)
    pre: np.ndarray  # (B, hidden)
    hidden: np.ndarray  # (B, hidden)
    batched: bool


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    xb = x if batched else x[None, :]
    if xb.ndim != 2 or xb.shape[1] != params.n_in:
        raise DimensionError(f"input has shape {x.shape}, network expects {params.n_in} features")
    pre = xb @ params.w1.T + params.b1
    h = selu(pre)
    out = h @ params.w2.T + params.b2
    tape = GradTape(params, xb, pre, h, batched)
    return (out if batched else out[0]), tape


def mlp_backward(tape: GradTape, out_grad) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(out_grad * output)`` w.r.t. parameters and input."""
    g = np.asarray(out_grad, dtype=np.float64)
    gb = g if tape.batched else g[None, :]
    p = tape.params
    if gb.shape != (tape.x.shape[0], p.n_out):
        raise DimensionError(f"out_grad has shape {g.shape}, expected output shape "
                             f"{(tape.x.shape[0], p.n_out) if tape.batched else (p.n_out,)}")
    gw2 = gb.T @ tape.hidden
    gb2 = gb.sum(axis=0)
    gpre = (gb @ p.w2) * selu_grad(tape.pre, tape.hidden)
    gw1 = gpre.T @ tape.x
    gb1 = gpre.sum(axis=0)
    gx = gpre @ p.w1
    return MlpParams(gw1, gb1, gw2, gb2), (gx if tape.batched else gx[0])


@dataclass
class AdamState:
    """Adam moments for a list of parameter arrays.

    Updates are applied as gradient *ascent*: callers pass the gradient of the
    objective they want to maximise.
    """

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray] | MlpParams, **hyper) -> "AdamState":
        arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam ascent step, in place. Returns ``(params, state)``."""
    arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    garrays = grads.arrays() if isinstance(grads, MlpParams) else list(grads)
    if len(arrays) != len(garrays) or len(arrays) != len(state.m):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    for a, g in zip(arrays, garrays):
        if a.shape != np.shape(g):
            raise DimensionError(f"gradient shape {np.shape(g)} does not match parameter {a.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(state.step, "non-finite gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for a, g, m, v in zip(arrays, garrays, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        a += state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state

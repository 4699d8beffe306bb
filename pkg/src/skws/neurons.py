"""LIF and PLIF neuron dynamics with surrogate-gradient firing.

One step of the leaky integrate-and-fire neuron:

    u_pre  = tau * u + input
    spike  = H(u_pre - v_th)
    u_next = u_pre * (1 - spike)          (hard reset)

The parametric variant replaces the fixed leak with a learnable decay
k(a) = sigmoid(a) applied to both the membrane and the input:

    u_pre = u - k(a) * (u - input) = (1 - k(a)) * u + k(a) * input

The Heaviside forward is non-differentiable; training substitutes a
pseudo-derivative (rectangular window by default). The reset factor
(1 - spike) is detached from the graph, so no gradient flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, mul, record_op, sigmoid, sub

SURROGATE_KINDS = ("rectangular", "sigmoid-derivative")


@dataclass(frozen=True)
class LifParams:
    """Constant leak factor and firing threshold."""

    tau: float = 0.5
    v_th: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ContractError(f"tau must lie in [0, 1), got {self.tau}")
        if self.v_th <= 0.0:
            raise ContractError(f"v_th must be positive, got {self.v_th}")


@dataclass
class PlifParams:
    """Learnable decay parameter (one scalar per layer) and threshold.

    The decay actually applied is k(a) = sigmoid(a), constrained to (0, 1)
    for every finite a. a starts at 0, i.e. k = 0.5.
    """

    a: Tensor = field(default_factory=lambda: Tensor(np.zeros(1), requires_grad=True))
    v_th: float = 1.0

    def __post_init__(self):
        if self.v_th <= 0.0:
            raise ContractError(f"v_th must be positive, got {self.v_th}")

    def decay(self) -> Tensor:
        return sigmoid(self.a)


@dataclass(frozen=True)
class SurrogateSpec:
    """Pseudo-derivative used in place of the Heaviside step during backward.

    rectangular:        (1/width) * 1[|u - v_th| < width/2]
    sigmoid-derivative: s(1-s)/width with s = sigmoid((u - v_th)/width)
    """

    kind: str = "rectangular"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ContractError(f"unknown surrogate kind {self.kind!r}")
        if self.width <= 0.0:
            raise ContractError(f"surrogate width must be positive, got {self.width}")

    def pseudo_derivative(self, u_pre: np.ndarray, v_th: float) -> np.ndarray:
        centered = u_pre - np.asarray(v_th, dtype=u_pre.dtype)
        if self.kind == "rectangular":
            window = np.abs(centered) < (self.width / 2.0)
            return window.astype(u_pre.dtype) / np.asarray(self.width, dtype=u_pre.dtype)
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-centered / np.asarray(self.width, dtype=u_pre.dtype)))
        return s * (1.0 - s) / np.asarray(self.width, dtype=u_pre.dtype)


@dataclass
class NeuronState:
    """Membrane potentials carried across time steps within one utterance."""

    u: Tensor


def zero_state(shape, dtype=np.float32) -> NeuronState:
    return NeuronState(u=Tensor(np.zeros(shape, dtype=dtype)))


def fire_with_surrogate(u_pre: Tensor, v_th: float, spec: SurrogateSpec) -> Tensor:
    """Heaviside firing H(u_pre - v_th) with a surrogate backward rule.

    Forward output is exactly binary; the boundary u_pre == v_th fires.
    """
    spikes = (u_pre.data >= np.asarray(v_th, dtype=u_pre.dtype)).astype(u_pre.dtype)
    pseudo = spec.pseudo_derivative(u_pre.data, v_th)

    def bwd(g):
        return (g * pseudo,)

    return record_op(spikes, (u_pre,), bwd, "fire")


def _check_same_shape(state: NeuronState, x: Tensor) -> None:
    if state.u.shape != x.shape:
        raise DimensionError(
            f"state shape {state.u.shape} does not match input shape {x.shape}")


def _fire_and_reset(u_pre: Tensor, v_th: float, spec: SurrogateSpec):
    spikes = fire_with_surrogate(u_pre, v_th, spec)
    # detached reset: backward treats the (1 - spike) mask as a constant
    keep = Tensor(1.0 - spikes.data)
    u_next = mul(u_pre, keep)
    return spikes, NeuronState(u=u_next)


def lif_step(state: NeuronState, x: Tensor, p: LifParams,
             spec: SurrogateSpec = SurrogateSpec()) -> tuple[Tensor, NeuronState]:
    """One LIF update: leak, integrate, fire, hard-reset."""
    _check_same_shape(state, x)
    u_pre = mul(state.u, p.tau) + x
    return _fire_and_reset(u_pre, p.v_th, spec)


def plif_step(state: NeuronState, x: Tensor, p: PlifParams,
              spec: SurrogateSpec = SurrogateSpec()) -> tuple[Tensor, NeuronState]:
    """One PLIF update; gradient reaches the decay parameter through k(a)."""
    _check_same_shape(state, x)
    k = p.decay()
    u_pre = sub(state.u, mul(k, sub(state.u, x)))
    return _fire_and_reset(u_pre, p.v_th, spec)

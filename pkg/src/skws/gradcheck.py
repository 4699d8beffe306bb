"""Finite-difference verification of every differentiable operation.

Each check runs the forward in float64, projects the output onto a fixed
random direction to get a scalar, and compares the tape gradient against
central finite differences (eps = 1e-3). The spiking nonlinearity is
excluded by construction: the end-to-end check uses the ReLU (glc-ann style)
block variants, plus a no-fire LIF chain that exercises backpropagation
through the membrane recursion.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import VerificationError
from .layers import (BatchNormParams, BottleneckPlifBlock, Conv1dParams,
                     GlscBlock, batchnorm_forward, conv1d_forward,
                     linear_forward)
from .neurons import LifParams, NeuronState, PlifParams, SurrogateSpec, lif_step
from .tensor import Tensor, no_grad
from .training import cross_entropy

TOLERANCE = 1e-4
EPS = 1e-3


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                eps: float = EPS) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max())


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_err={self.error:.3e}"


def _check(name: str, build: Callable[[list], Tensor], args: list,
           wrt: int, corrupt: Optional[str]) -> CheckResult:
    """Compare tape gradient of args[wrt] against finite differences.

    `build` maps a list of float64 Tensors to the output tensor; the loss is
    the projection of that output onto a fixed random direction.
    """
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    leaves = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(args)]
    out = build(leaves)
    direction = Tensor(rng.standard_normal(out.shape))
    loss = T.reduce_sum(T.mul(out, direction))
    T.backward(loss)
    analytic = leaves[wrt].grad.copy()
    if corrupt == name:
        analytic = analytic * 1.01 + 1e-3  # test hook: simulate a broken rule

    def f(x: np.ndarray) -> float:
        with no_grad():
            probe = [Tensor(x if i == wrt else a)
                     for i, a in enumerate(args)]
            value = T.reduce_sum(T.mul(build(probe), direction))
        return float(value.data.reshape(()))

    numeric = fd_gradient(f, args[wrt])
    return CheckResult(name, max_rel_error(analytic, numeric))


def _micro_blocks(dtype=np.float64):
    """Tiny ReLU-variant GLSC + bottleneck blocks with float64 weights."""
    rng = np.random.default_rng(7)

    def conv(in_c, out_c, k, stride=1, dilation=1, padding=0):
        w = Tensor(rng.standard_normal((out_c, in_c, k)).astype(dtype) * 0.5,
                   requires_grad=True)
        return Conv1dParams(in_c, out_c, k, stride, dilation, padding, weight=w)

    def bn(c):
        p = BatchNormParams(c)
        p.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        p.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        return p

    glsc = GlscBlock(conv(1, 3, 3, stride=2, padding=1), bn(3),
                     conv(1, 3, 3, stride=2, dilation=2, padding=2), bn(3),
                     lif=LifParams(0.5, 1.0), neuron_kind="relu")
    cla = BottleneckPlifBlock(
        conv(3, 2, 1), bn(2), conv(2, 2, 3, padding=1), bn(2),
        conv(2, 3, 1), bn(3), conv(3, 3, 1), bn(3),
        PlifParams(v_th=1.0), PlifParams(v_th=1.0), PlifParams(v_th=1.0),
        neuron_kind="relu")
    head_w = Tensor(rng.standard_normal((3, 2)).astype(dtype), requires_grad=True)
    head_b = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)
    return glsc, cla, head_w, head_b


def run_suite(seed: int = 0, corrupt: Optional[str] = None) -> list:
    """All finite-difference checks; deterministic for a given seed."""
    rng = np.random.default_rng(seed)

    def rand(*shape):
        return rng.standard_normal(shape)

    def away_from_zero(*shape):
        # keeps ReLU kinks and sqrt branch points out of the FD window
        return (rng.uniform(0.2, 1.0, shape)) * np.where(rand(*shape) > 0, 1.0, -1.0)

    checks: list[CheckResult] = []

    def run(name, build, args, wrt=0):
        checks.append(_check(name, build, [np.asarray(a, dtype=np.float64)
                                           for a in args], wrt, corrupt))

    a34, b34 = rand(3, 4), rand(3, 4)
    run("add", lambda xs: T.add(xs[0], xs[1]), [a34, b34])
    run("add.broadcast", lambda xs: T.add(xs[0], xs[1]), [a34, rand(4)], wrt=1)
    run("sub", lambda xs: T.sub(xs[0], xs[1]), [a34, b34], wrt=1)
    run("mul", lambda xs: T.mul(xs[0], xs[1]), [a34, b34])
    run("scale", lambda xs: T.scale(xs[0], -1.7), [a34])
    div_b = away_from_zero(3, 4)
    run("div.a", lambda xs: T.div(xs[0], xs[1]), [a34, div_b])
    run("div.b", lambda xs: T.div(xs[0], xs[1]), [a34, div_b], wrt=1)
    run("sigmoid", lambda xs: T.sigmoid(xs[0]), [rand(4, 5)])
    run("relu", lambda xs: T.relu(xs[0]), [away_from_zero(4, 5)])
    run("sqrt", lambda xs: T.sqrt(xs[0]), [np.abs(rand(3, 3)) + 0.5])
    run("matmul.a", lambda xs: T.matmul(xs[0], xs[1]), [rand(3, 4), rand(4, 2)])
    run("matmul.b", lambda xs: T.matmul(xs[0], xs[1]), [rand(3, 4), rand(4, 2)], wrt=1)
    run("reduce_sum", lambda xs: T.reduce_sum(xs[0], axes=(0, 2), keepdims=True),
        [rand(2, 3, 4)])
    run("reduce_mean", lambda xs: T.reduce_mean(xs[0], axes=1), [rand(2, 5)])
    run("reshape", lambda xs: T.reshape(xs[0], (6, 2)), [rand(3, 4)])
    run("concat0", lambda xs: T.concat0([xs[0], xs[1]]), [rand(2, 3), rand(4, 3)])
    run("slice0", lambda xs: T.slice0(xs[0], 1, 3), [rand(4, 3)])

    def conv_builder(stride, dilation, padding, bias):
        def build(xs):
            p = Conv1dParams(2, 3, 3, stride, dilation, padding,
                             weight=xs[1], bias=xs[2] if bias else None)
            return conv1d_forward(xs[0], p)
        return build

    conv_x, conv_w, conv_b = rand(2, 2, 12), rand(3, 2, 3) * 0.5, rand(3)
    for geom_name, stride, dilation, padding in (
            ("s1", 1, 1, 1), ("s2", 2, 1, 1), ("d4", 1, 4, 4)):
        run(f"conv1d.{geom_name}.input", conv_builder(stride, dilation, padding, True),
            [conv_x, conv_w, conv_b], wrt=0)
        run(f"conv1d.{geom_name}.weight", conv_builder(stride, dilation, padding, True),
            [conv_x, conv_w, conv_b], wrt=1)
    run("conv1d.bias", conv_builder(1, 1, 1, True), [conv_x, conv_w, conv_b], wrt=2)

    def bn_build(xs):
        p = BatchNormParams(3)
        p.gamma, p.beta = xs[1], xs[2]
        return batchnorm_forward(xs[0], p, train=True)

    bn_x, bn_g, bn_b = rand(4, 3, 5), np.abs(rand(3)) + 0.5, rand(3)
    run("batchnorm.input", bn_build, [bn_x, bn_g, bn_b], wrt=0)
    run("batchnorm.gamma", bn_build, [bn_x, bn_g, bn_b], wrt=1)
    run("batchnorm.beta", bn_build, [bn_x, bn_g, bn_b], wrt=2)

    run("linear.weight",
        lambda xs: linear_forward(xs[0], xs[1], xs[2]),
        [rand(4, 3), rand(3, 2), rand(2)], wrt=1)
    run("cross_entropy",
        lambda xs: cross_entropy(xs[0], np.array([0, 2, 1, 2])),
        [rand(4, 3)])

    def lif_chain(xs):
        # sub-threshold leaky integration over four steps; the loss reads the
        # final membrane, so BPTT flows through the recursion with no firing
        state = NeuronState(u=T.mul(xs[0], 0.0))
        p = LifParams(tau=0.5, v_th=1e9)
        for _ in range(4):
            _, state = lif_step(state, xs[0], p, SurrogateSpec())
        return state.u

    run("lif.bptt", lif_chain, [rand(2, 3) * 0.1])

    def micro_model(xs):
        glsc, cla, head_w, head_b = _micro_blocks()
        glsc.local.weight, glsc.global_.weight = xs[1], xs[2]
        out = cla.forward(glsc.forward(xs[0], 1, train=True), 1, train=True)
        pooled = T.reduce_mean(out, axes=2)
        return cross_entropy(linear_forward(pooled, head_w, head_b),
                             np.array([0, 1, 0]))

    micro_x = rand(3, 1, 16)
    micro_wl = rand(3, 1, 3) * 0.5
    micro_wg = rand(3, 1, 3) * 0.5
    run("micro_model.input", micro_model, [micro_x, micro_wl, micro_wg], wrt=0)
    run("micro_model.local_weight", micro_model, [micro_x, micro_wl, micro_wg], wrt=1)
    run("micro_model.global_weight", micro_model, [micro_x, micro_wl, micro_wg], wrt=2)

    return checks


def run_or_raise(seed: int = 0, corrupt: Optional[str] = None,
                 log_fn=print) -> None:
    results = run_suite(seed, corrupt)
    failed = [r for r in results if not r.passed]
    for r in results:
        log_fn(r.line())
    if failed:
        worst = max(failed, key=lambda r: r.error)
        raise VerificationError(
            f"{len(failed)} gradient check(s) failed; worst is "
            f"{worst.name!r} with max relative error {worst.error:.3e}")

"""1-D convolutions, batch normalization, and the two spiking blocks.

The GLSC block sums a plain and a dilated convolution branch (each batch
normalized) and feeds the result through LIF neurons. The bottleneck block
squeezes channels through 1-wide convolutions around a 3-wide one, with PLIF
neurons and a projected skip connection.

Blocks run "layer-major": the T per-step inputs arrive stacked along the
batch axis as one [T*B, C, L] tensor, convolutions and batch norm process all
steps at once (so normalization statistics span batch, steps and positions),
and only the neuron update iterates over the T steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .neurons import (LifParams, PlifParams, SurrogateSpec, lif_step,
                      plif_step, zero_state)
from .tensor import (Tensor, add, concat0, div, matmul, mul, record_op,
                     reduce_mean, relu, reshape, slice0, sqrt, sub)

Array = np.ndarray


def conv_output_length(length: int, kernel: int, stride: int, dilation: int,
                       padding: int) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Array:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class Conv1dParams:
    """Weights and geometry of one 1-D convolution (cross-correlation)."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    weight: Tensor = None
    bias: Optional[Tensor] = None

    def __post_init__(self):
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ConfigError(
                f"invalid conv geometry: stride={self.stride} dilation={self.dilation} "
                f"padding={self.padding}")
        if self.weight is None:
            self.weight = Tensor(
                np.zeros((self.out_channels, self.in_channels, self.kernel_size),
                         dtype=np.float32),
                requires_grad=True)
        expected = (self.out_channels, self.in_channels, self.kernel_size)
        if self.weight.shape != expected:
            raise DimensionError(
                f"conv weight shape {self.weight.shape} does not match {expected}")

    @classmethod
    def build(cls, rng: np.random.Generator, in_channels: int, out_channels: int,
              kernel_size: int, stride: int = 1, dilation: int = 1,
              padding: int = 0, use_bias: bool = False) -> "Conv1dParams":
        fan_in = in_channels * kernel_size
        weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in),
            requires_grad=True)
        bias = Tensor(np.zeros(out_channels, dtype=np.float32), requires_grad=True) \
            if use_bias else None
        return cls(in_channels, out_channels, kernel_size, stride, dilation,
                   padding, weight, bias)

    def out_length(self, length: int) -> int:
        return conv_output_length(length, self.kernel_size, self.stride,
                                  self.dilation, self.padding)

    def min_input_length(self) -> int:
        return max(1, self.dilation * (self.kernel_size - 1) + 1 - 2 * self.padding)

    def dense_macs(self, length: int) -> int:
        """Multiply-accumulates of one dense pass over one sample."""
        return self.out_channels * self.in_channels * self.kernel_size \
            * self.out_length(length)


def gather_conv_columns(x: Array, kernel: int, stride: int, dilation: int,
                        padding: int) -> Array:
    """im2col for 1-D input [B, C, L] -> patches [B, C, kernel, L_out]."""
    b, c, length = x.shape
    l_out = conv_output_length(length, kernel, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols = np.empty((b, c, kernel, l_out), dtype=x.dtype)
    span = (l_out - 1) * stride + 1
    for j in range(kernel):
        cols[:, :, j, :] = xp[:, :, j * dilation: j * dilation + span: stride]
    return cols


def conv1d_forward(x: Tensor, p: Conv1dParams) -> Tensor:
    """Strided, dilated cross-correlation over the last axis.

    Input [B, C_in, L] -> output [B, C_out, L_out]; gradients are produced
    for the input, the kernel and (when present) the bias.
    """
    if x.ndim != 3:
        raise DimensionError(f"conv1d expects [B, C, L], got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"conv1d input has {x.shape[1]} channels, kernel expects {p.in_channels}")
    length = x.shape[2]
    l_out = p.out_length(length)
    if l_out < 1:
        raise ContractError(
            f"input length {length} too short for this convolution; "
            f"minimum is {p.min_input_length()}")

    cols = gather_conv_columns(x.data, p.kernel_size, p.stride, p.dilation, p.padding)
    out = np.tensordot(p.weight.data, cols, axes=([1, 2], [1, 2]))  # [C_out, B, L_out]
    out = np.ascontiguousarray(out.transpose(1, 0, 2))
    if p.bias is not None:
        out = out + p.bias.data[None, :, None]
    del cols  # regathered in backward; not worth holding k copies of the input

    stride, dilation, padding = p.stride, p.dilation, p.padding
    kernel = p.kernel_size
    in_shape = x.shape
    x_data = x.data
    weight_data = p.weight.data
    inputs = (x, p.weight) + ((p.bias,) if p.bias is not None else ())

    def bwd(g):
        patches = gather_conv_columns(x_data, kernel, stride, dilation, padding)
        grad_w = np.tensordot(g, patches, axes=([0, 2], [0, 3]))  # [C_out, C_in, k]
        del patches
        gcols = np.tensordot(g, weight_data, axes=([1], [0]))  # [B, L_out, C_in, k]
        gcols = gcols.transpose(0, 2, 3, 1)
        gxp = np.zeros((in_shape[0], in_shape[1], in_shape[2] + 2 * padding),
                       dtype=g.dtype)
        span = (g.shape[2] - 1) * stride + 1
        for j in range(kernel):
            gxp[:, :, j * dilation: j * dilation + span: stride] += gcols[:, :, j, :]
        gx = gxp[:, :, padding: padding + in_shape[2]] if padding else gxp
        if p.bias is not None:
            return gx, grad_w, g.sum(axis=(0, 2))
        return gx, grad_w

    return record_op(out, inputs, bwd, "conv1d")


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with running statistics."""

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    gamma: Tensor = None
    beta: Tensor = None
    running_mean: Array = None
    running_var: Array = None

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.gamma is None:
            self.gamma = Tensor(np.ones(self.channels, dtype=np.float32),
                                requires_grad=True)
        if self.beta is None:
            self.beta = Tensor(np.zeros(self.channels, dtype=np.float32),
                               requires_grad=True)
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)


def batchnorm_forward(x: Tensor, p: BatchNormParams, train: bool) -> Tensor:
    """Normalize [N, C, L] per channel over all non-channel axes.

    Train mode uses batch statistics (and updates the running ones via
    momentum); eval mode depends only on the running statistics. With the
    step-stacked layout, "batch" covers batch x time-steps x positions.
    """
    if x.ndim != 3:
        raise DimensionError(f"batchnorm expects [N, C, L], got shape {x.shape}")
    if x.shape[1] != p.channels:
        raise DimensionError(
            f"batchnorm input has {x.shape[1]} channels, params expect {p.channels}")
    if x.shape[0] == 0 or x.shape[2] == 0:
        raise ContractError(f"batchnorm over an empty batch: shape {x.shape}")

    gamma = reshape(p.gamma, (p.channels, 1))
    beta = reshape(p.beta, (p.channels, 1))

    if train:
        mean = reduce_mean(x, axes=(0, 2), keepdims=True)
        centered = sub(x, mean)
        var = reduce_mean(mul(centered, centered), axes=(0, 2), keepdims=True)
        m = p.momentum
        p.running_mean = ((1.0 - m) * p.running_mean
                          + m * mean.data.reshape(-1)).astype(np.float32)
        p.running_var = ((1.0 - m) * p.running_var
                         + m * var.data.reshape(-1)).astype(np.float32)
        xhat = div(centered, sqrt(add(var, p.eps)))
    else:
        rm = Tensor(p.running_mean.reshape(p.channels, 1).astype(x.dtype))
        rstd = Tensor(np.sqrt(p.running_var.astype(np.float64) + p.eps)
                      .reshape(p.channels, 1).astype(x.dtype))
        xhat = div(sub(x, rm), rstd)
    return add(mul(xhat, gamma), beta)


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine readout: [B, F] @ [F, C] + [C]."""
    return add(matmul(x, weight), bias)


def _run_spiking(pre: Tensor, timesteps: int, step_fn) -> Tensor:
    """Apply a neuron step over the T step-slices of a stacked tensor."""
    total = pre.shape[0]
    if timesteps < 1 or total % timesteps != 0:
        raise DimensionError(
            f"stacked axis {total} is not divisible into {timesteps} steps")
    batch = total // timesteps
    state = zero_state((batch,) + pre.shape[1:], dtype=pre.dtype)
    outs = []
    for t in range(timesteps):
        x_t = slice0(pre, t * batch, (t + 1) * batch)
        spikes, state = step_fn(state, x_t)
        outs.append(spikes)
    return concat0(outs)


def _record_ac(record, layer: str, x_data: Array, convs: list[tuple[str, Conv1dParams]]):
    """Log spike-gated accumulate counts for convolutions reading binary input."""
    for suffix, p in convs:
        cols = gather_conv_columns(x_data, p.kernel_size, p.stride, p.dilation,
                                   p.padding)
        record.add_conv_ac(f"{layer}.{suffix}", float(cols.sum(dtype=np.float64))
                           * p.out_channels)


class GlscBlock:
    """Parallel plain + dilated convolution branches fused by spiking neurons.

    Either branch may be absent (ablation variants); when both are present
    their geometry must produce identical output shapes for every input,
    which is checked at construction.
    """

    def __init__(self, local: Optional[Conv1dParams], bn_local: Optional[BatchNormParams],
                 global_: Optional[Conv1dParams], bn_global: Optional[BatchNormParams],
                 lif: LifParams, surrogate: SurrogateSpec = SurrogateSpec(),
                 neuron_kind: str = "lif", name: str = "glsc"):
        if local is None and global_ is None:
            raise ConfigError("GLSC block needs at least one branch")
        if neuron_kind not in ("lif", "relu"):
            raise ConfigError(f"unknown neuron kind {neuron_kind!r}")
        if local is not None and global_ is not None:
            if local.stride != global_.stride:
                raise ConfigError(
                    f"branch strides differ: {local.stride} vs {global_.stride}")
            local_extent = 2 * local.padding - local.dilation * (local.kernel_size - 1)
            global_extent = 2 * global_.padding - global_.dilation * (global_.kernel_size - 1)
            if local_extent != global_extent:
                raise ConfigError(
                    "branch output lengths differ: padding/dilation/kernel of the "
                    f"local ({local.kernel_size},{local.dilation},{local.padding}) and "
                    f"global ({global_.kernel_size},{global_.dilation},{global_.padding}) "
                    "branches are inconsistent")
            if local.out_channels != global_.out_channels:
                raise ConfigError(
                    f"branch channel counts differ: {local.out_channels} vs "
                    f"{global_.out_channels}")
        self.local = local
        self.bn_local = bn_local
        self.global_ = global_
        self.bn_global = bn_global
        self.lif = lif
        self.surrogate = surrogate
        self.neuron_kind = neuron_kind
        self.name = name
        self.state: Optional[object] = None

    @property
    def out_channels(self) -> int:
        branch = self.local if self.local is not None else self.global_
        return branch.out_channels

    def out_length(self, length: int) -> int:
        branch = self.local if self.local is not None else self.global_
        return branch.out_length(length)

    def forward(self, xs: Tensor, timesteps: int, train: bool,
                record=None, input_is_spikes: bool = True) -> Tensor:
        pre = None
        if self.local is not None:
            pre = batchnorm_forward(conv1d_forward(xs, self.local), self.bn_local, train)
        if self.global_ is not None:
            branch = batchnorm_forward(conv1d_forward(xs, self.global_),
                                       self.bn_global, train)
            pre = branch if pre is None else add(pre, branch)

        if self.neuron_kind == "relu":
            out = relu(pre)
        else:
            def step(state, x_t):
                self.state = state
                return lif_step(state, x_t, self.lif, self.surrogate)
            out = _run_spiking(pre, timesteps, step)
            self.state = None

        if record is not None and self.neuron_kind == "lif":
            record.add_spikes(self.name, out.data, timesteps)
            if input_is_spikes:
                convs = []
                if self.local is not None:
                    convs.append(("local", self.local))
                if self.global_ is not None:
                    convs.append(("global", self.global_))
                _record_ac(record, self.name, xs.data, convs)
        return out


class BottleneckPlifBlock:
    """Channel-squeezing residual block with PLIF activations.

    Main path: 1-wide conv+bn -> PLIF -> 3-wide conv+bn -> PLIF -> 1-wide
    conv+bn. Skip path: 1-wide conv+bn of the input. The block output is the
    PLIF firing of the two paths' sum.
    """

    def __init__(self, reduce: Conv1dParams, bn_reduce: BatchNormParams,
                 mid: Conv1dParams, bn_mid: BatchNormParams,
                 expand: Conv1dParams, bn_expand: BatchNormParams,
                 skip: Conv1dParams, bn_skip: BatchNormParams,
                 plif_reduce: PlifParams, plif_mid: PlifParams,
                 plif_out: PlifParams, surrogate: SurrogateSpec = SurrogateSpec(),
                 neuron_kind: str = "plif", name: str = "cla"):
        if neuron_kind not in ("plif", "relu"):
            raise ConfigError(f"unknown neuron kind {neuron_kind!r}")
        if reduce.in_channels != skip.in_channels:
            raise ConfigError(
                f"reduce and skip input channels differ: {reduce.in_channels} vs "
                f"{skip.in_channels}")
        if mid.in_channels != reduce.out_channels:
            raise ConfigError(
                f"mid expects {mid.in_channels} channels but reduce emits "
                f"{reduce.out_channels}")
        if expand.in_channels != mid.out_channels:
            raise ConfigError(
                f"expand expects {expand.in_channels} channels but mid emits "
                f"{mid.out_channels}")
        if expand.out_channels != skip.out_channels:
            raise ConfigError(
                f"main path emits {expand.out_channels} channels, skip emits "
                f"{skip.out_channels}")
        for label, conv in (("reduce", reduce), ("expand", expand), ("skip", skip)):
            if conv.kernel_size != 1 or conv.stride != 1:
                raise ConfigError(f"{label} conv must be 1-wide with stride 1")
        if mid.stride != 1 or 2 * mid.padding != mid.dilation * (mid.kernel_size - 1):
            raise ConfigError("mid conv must preserve length (stride 1, symmetric padding)")
        self.reduce, self.bn_reduce = reduce, bn_reduce
        self.mid, self.bn_mid = mid, bn_mid
        self.expand, self.bn_expand = expand, bn_expand
        self.skip, self.bn_skip = skip, bn_skip
        self.plif_reduce = plif_reduce
        self.plif_mid = plif_mid
        self.plif_out = plif_out
        self.surrogate = surrogate
        self.neuron_kind = neuron_kind
        self.name = name

    @property
    def out_channels(self) -> int:
        return self.expand.out_channels

    def out_length(self, length: int) -> int:
        return length

    def _activate(self, pre: Tensor, timesteps: int, plif: PlifParams) -> Tensor:
        if self.neuron_kind == "relu":
            return relu(pre)
        return _run_spiking(pre, timesteps,
                            lambda state, x_t: plif_step(state, x_t, plif, self.surrogate))

    def forward(self, xs: Tensor, timesteps: int, train: bool,
                record=None, input_is_spikes: bool = True) -> Tensor:
        spiking = self.neuron_kind == "plif"

        h = batchnorm_forward(conv1d_forward(xs, self.reduce), self.bn_reduce, train)
        s1 = self._activate(h, timesteps, self.plif_reduce)
        h = batchnorm_forward(conv1d_forward(s1, self.mid), self.bn_mid, train)
        s2 = self._activate(h, timesteps, self.plif_mid)
        main = batchnorm_forward(conv1d_forward(s2, self.expand), self.bn_expand, train)
        shortcut = batchnorm_forward(conv1d_forward(xs, self.skip), self.bn_skip, train)
        out = self._activate(add(main, shortcut), timesteps, self.plif_out)

        if record is not None and spiking:
            record.add_spikes(f"{self.name}.plif1", s1.data, timesteps)
            record.add_spikes(f"{self.name}.plif2", s2.data, timesteps)
            record.add_spikes(f"{self.name}.out", out.data, timesteps)
            if input_is_spikes:
                _record_ac(record, self.name, xs.data,
                           [("reduce", self.reduce), ("skip", self.skip)])
            _record_ac(record, self.name, s1.data, [("mid", self.mid)])
            _record_ac(record, self.name, s2.data, [("expand", self.expand)])
        return out

"""Full network assembly: stacked GLSC blocks, bottleneck classifier, readout.

The raw waveform is presented unchanged at each of the T simulation steps
(static encoding); membrane states evolve across steps. The readout averages
the final block's spikes over the sequence axis per step, applies a linear
map, and averages the per-step logits over T.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import serialize
from .errors import ConfigError, DimensionError, NumericError
from .layers import (BatchNormParams, BottleneckPlifBlock, Conv1dParams,
                     GlscBlock, conv_output_length, kaiming_uniform,
                     linear_forward)
from .neurons import LifParams, PlifParams, SurrogateSpec
from .tensor import Tensor, concat0, reduce_mean, reshape

VARIANTS = ("snn-kws", "glsc-only-local", "glsc-only-global", "glc-ann")

CONFIG_ENTRY = "__config__"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and simulation hyperparameters.

    The published architecture gives only the block counts and T; channel
    widths, kernels, strides and dilations here are implementation defaults
    chosen to stay under the 100K parameter ceiling.
    """

    variant: str = "snn-kws"
    num_classes: int = 12
    sample_len: int = 16000
    timesteps: int = 8
    conv_channels: tuple = (16, 32, 48, 64)
    conv_strides: tuple = (2, 2, 2, 2)
    conv_dilations: tuple = (1, 2, 4, 8)
    local_kernel: int = 3
    global_kernel: int = 3
    cla_channels: tuple = (64, 64)
    cla_mid_channels: tuple = (32, 32)
    v_th: float = 1.0
    tau: float = 0.5
    surrogate_kind: str = "rectangular"
    surrogate_width: float = 1.0

    @property
    def n_conv_blocks(self) -> int:
        return len(self.conv_channels)

    @property
    def n_cla_blocks(self) -> int:
        return len(self.cla_channels)

    def effective_timesteps(self) -> int:
        # the ANN ablation has no temporal state, a single pass suffices
        return 1 if self.variant == "glc-ann" else self.timesteps

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be at least 1, got {self.timesteps}")
        if self.n_conv_blocks < 1 or self.n_cla_blocks < 1:
            raise ConfigError("need at least one GLSC and one bottleneck block")
        if not (len(self.conv_strides) == len(self.conv_dilations) == self.n_conv_blocks):
            raise ConfigError(
                "conv_channels, conv_strides and conv_dilations must have equal length")
        if len(self.cla_mid_channels) != self.n_cla_blocks:
            raise ConfigError("cla_channels and cla_mid_channels must have equal length")
        for name, values in (("conv_channels", self.conv_channels),
                             ("conv_strides", self.conv_strides),
                             ("conv_dilations", self.conv_dilations),
                             ("cla_channels", self.cla_channels),
                             ("cla_mid_channels", self.cla_mid_channels)):
            if any(v < 1 for v in values):
                raise ConfigError(f"{name} entries must be positive, got {values}")
        for i, length in enumerate(self.length_cascade()[1:], start=1):
            if length < 1:
                raise ConfigError(
                    f"conv block {i} reduces the sequence length to {length} for "
                    f"{self.sample_len}-sample input; lower its stride or kernel")

    def _branch_geometry(self, index: int):
        """(kernel, dilation, padding) for the local and global branches."""
        local = None
        if self.variant != "glsc-only-global":
            k = self.local_kernel
            local = (k, 1, (k - 1) // 2)
        global_ = None
        if self.variant != "glsc-only-local":
            k, d = self.global_kernel, self.conv_dilations[index]
            global_ = (k, d, (d * (k - 1)) // 2)
        return local, global_

    def length_cascade(self) -> list:
        """Sequence length after the input and after each GLSC block."""
        lengths = [self.sample_len]
        length = self.sample_len
        for i in range(self.n_conv_blocks):
            local, global_ = self._branch_geometry(i)
            k, d, p = local if local is not None else global_
            length = conv_output_length(length, k, self.conv_strides[i], d, p)
            lengths.append(length)
        return lengths

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kind = kinds[key]
            if kind == "tuple":
                values[key] = tuple(int(v) for v in val.split(",") if v)
            elif kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            else:
                values[key] = val
        return cls(**values)


def make_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Derive an ablation configuration with a comparable parameter budget.

    Single-branch variants widen the surviving branch's kernel to the sum of
    both kernels, which keeps the convolution parameter count identical; the
    ANN variant swaps spiking neurons for ReLU and drops temporal state.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "snn-kws":
        return replace(cfg, variant=variant)
    if variant == "glsc-only-local":
        return replace(cfg, variant=variant,
                       local_kernel=cfg.local_kernel + cfg.global_kernel)
    if variant == "glsc-only-global":
        return replace(cfg, variant=variant,
                       global_kernel=cfg.local_kernel + cfg.global_kernel)
    return replace(cfg, variant="glc-ann")


@dataclass
class ForwardOutput:
    """Logits plus the per-step logits they were averaged from."""

    logits: Tensor
    step_logits: Tensor
    spike_record: Optional[object] = None


class Model:
    """Built network: blocks, readout, and the trainable parameter registry."""

    def __init__(self, cfg: ModelConfig, conv_blocks, cla_blocks,
                 head_weight: Tensor, head_bias: Tensor,
                 params: dict, bn_layers: dict):
        self.cfg = cfg
        self.conv_blocks = conv_blocks
        self.cla_blocks = cla_blocks
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.params = params
        self.bn_layers = bn_layers

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, wave, timesteps: Optional[int] = None, train: bool = False,
                record=None) -> ForwardOutput:
        """Run the network over T steps of the (re-presented) waveform.

        wave is [B, 1, sample_len]; all membrane states start at zero and are
        discarded on return, so consecutive calls are independent.
        """
        x = wave if isinstance(wave, Tensor) else Tensor(np.asarray(wave, dtype=np.float32))
        if x.ndim != 3 or x.shape[1] != 1:
            raise DimensionError(f"expected wave of shape [B, 1, L], got {x.shape}")
        if x.shape[2] != self.cfg.sample_len:
            raise DimensionError(
                f"wave length {x.shape[2]} does not match configured "
                f"{self.cfg.sample_len}")
        steps = timesteps if timesteps is not None else self.cfg.effective_timesteps()
        if self.cfg.variant == "glc-ann":
            steps = 1
        batch = x.shape[0]

        if record is not None:
            record.count_batch(batch, steps)

        xs = x if steps == 1 else concat0([x] * steps)
        for i, block in enumerate(self.conv_blocks):
            xs = block.forward(xs, steps, train, record=record,
                               input_is_spikes=(i > 0))
        for block in self.cla_blocks:
            xs = block.forward(xs, steps, train, record=record,
                               input_is_spikes=True)

        pooled = reduce_mean(xs, axes=2)                       # [T*B, C]
        step_logits = linear_forward(pooled, self.head_weight, self.head_bias)
        if steps == 1:
            logits = step_logits
        else:
            logits = reduce_mean(
                reshape(step_logits, (steps, batch, self.cfg.num_classes)), axes=0)
        if not logits.is_finite():
            raise NumericError("non-finite logits produced by forward pass")
        return ForwardOutput(logits=logits, step_logits=step_logits,
                             spike_record=record)

    def dense_mac_count(self, sample_len: Optional[int] = None) -> int:
        """MACs of one dense (ANN) pass of the identical topology, per sample."""
        length = sample_len if sample_len is not None else self.cfg.sample_len
        total = 0
        for block in self.conv_blocks:
            for branch in (block.local, block.global_):
                if branch is not None:
                    total += branch.dense_macs(length)
            length = block.out_length(length)
        for block in self.cla_blocks:
            for conv in (block.reduce, block.mid, block.expand, block.skip):
                total += conv.dense_macs(length)
            length = block.out_length(length)
        total += self.head_weight.shape[0] * self.head_weight.shape[1]
        return total

    def front_mac_count(self) -> int:
        """Dense MACs of the first block, whose input is the real-valued wave."""
        first = self.conv_blocks[0]
        total = 0
        for branch in (first.local, first.global_):
            if branch is not None:
                total += branch.dense_macs(self.cfg.sample_len)
        return total

    # -- checkpointing ----------------------------------------------------

    def state_entries(self) -> dict:
        entries = {name: t.data for name, t in self.params.items()}
        for name, bn in self.bn_layers.items():
            entries[f"{name}.running_mean"] = bn.running_mean
            entries[f"{name}.running_var"] = bn.running_var
        return entries

    def save(self, path) -> None:
        entries = {CONFIG_ENTRY: serialize.encode_text(self.cfg.to_text())}
        entries.update(self.state_entries())
        serialize.save_tensors(path, entries)

    @classmethod
    def load(cls, path) -> "Model":
        entries = serialize.load_tensors(path)
        if CONFIG_ENTRY not in entries:
            raise ConfigError(f"checkpoint missing entry {CONFIG_ENTRY!r}")
        cfg = ModelConfig.from_text(serialize.decode_text(entries.pop(CONFIG_ENTRY)))
        model = build_model(cfg, seed=0)
        expected = model.state_entries()
        for name in expected:
            if name not in entries:
                raise ConfigError(f"checkpoint missing entry {name!r}")
            if tuple(entries[name].shape) != tuple(expected[name].shape):
                raise ConfigError(
                    f"checkpoint entry {name!r} has shape {entries[name].shape}, "
                    f"expected {tuple(expected[name].shape)}")
        extra = set(entries) - set(expected)
        if extra:
            raise ConfigError(f"checkpoint has unexpected entries: {sorted(extra)}")
        for name, tensor in model.params.items():
            tensor.data = np.ascontiguousarray(entries[name], dtype=np.float32)
            tensor.zero_grad()
        for name, bn in model.bn_layers.items():
            bn.running_mean = entries[f"{name}.running_mean"].astype(np.float32)
            bn.running_var = entries[f"{name}.running_var"].astype(np.float32)
        return model


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Construct and initialize the network deterministically from a seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    surrogate = SurrogateSpec(cfg.surrogate_kind, cfg.surrogate_width)
    is_ann = cfg.variant == "glc-ann"

    params: dict = {}
    bn_layers: dict = {}

    def register(name: str, tensor: Tensor) -> Tensor:
        tensor.name = name
        params[name] = tensor
        return tensor

    def make_bn(name: str, channels: int) -> BatchNormParams:
        bn = BatchNormParams(channels)
        register(f"{name}.gamma", bn.gamma)
        register(f"{name}.beta", bn.beta)
        bn_layers[name] = bn
        return bn

    def make_conv(name: str, in_c: int, out_c: int, k: int, stride: int,
                  dilation: int, padding: int) -> Conv1dParams:
        conv = Conv1dParams.build(rng, in_c, out_c, k, stride, dilation, padding)
        register(f"{name}.weight", conv.weight)
        return conv

    conv_blocks = []
    in_channels = 1
    for i in range(cfg.n_conv_blocks):
        name = f"conv{i + 1}"
        out_channels = cfg.conv_channels[i]
        stride = cfg.conv_strides[i]
        local_geom, global_geom = cfg._branch_geometry(i)
        local = bn_local = global_ = bn_global = None
        if local_geom is not None:
            k, d, p = local_geom
            local = make_conv(f"{name}.local", in_channels, out_channels, k, stride, d, p)
            bn_local = make_bn(f"{name}.bn_local", out_channels)
        if global_geom is not None:
            k, d, p = global_geom
            global_ = make_conv(f"{name}.global", in_channels, out_channels, k, stride, d, p)
            bn_global = make_bn(f"{name}.bn_global", out_channels)
        conv_blocks.append(GlscBlock(
            local, bn_local, global_, bn_global,
            lif=LifParams(cfg.tau, cfg.v_th), surrogate=surrogate,
            neuron_kind="relu" if is_ann else "lif", name=name))
        in_channels = out_channels

    cla_blocks = []
    for i in range(cfg.n_cla_blocks):
        name = f"cla{i + 1}"
        out_channels = cfg.cla_channels[i]
        mid_channels = cfg.cla_mid_channels[i]
        reduce = make_conv(f"{name}.reduce", in_channels, mid_channels, 1, 1, 1, 0)
        mid = make_conv(f"{name}.mid", mid_channels, mid_channels, 3, 1, 1, 1)
        expand = make_conv(f"{name}.expand", mid_channels, out_channels, 1, 1, 1, 0)
        skip = make_conv(f"{name}.skip", in_channels, out_channels, 1, 1, 1, 0)
        plifs = []
        for j in ("plif1", "plif2", "plif_out"):
            a = register(f"{name}.{j}.a",
                         Tensor(np.zeros(1, dtype=np.float32), requires_grad=True))
            plifs.append(PlifParams(a=a, v_th=cfg.v_th))
        cla_blocks.append(BottleneckPlifBlock(
            reduce, make_bn(f"{name}.bn_reduce", mid_channels),
            mid, make_bn(f"{name}.bn_mid", mid_channels),
            expand, make_bn(f"{name}.bn_expand", out_channels),
            skip, make_bn(f"{name}.bn_skip", out_channels),
            plifs[0], plifs[1], plifs[2], surrogate=surrogate,
            neuron_kind="relu" if is_ann else "plif", name=name))
        in_channels = out_channels

    head_weight = register("head.weight", Tensor(
        kaiming_uniform(rng, (in_channels, cfg.num_classes), in_channels),
        requires_grad=True))
    head_bias = register("head.bias", Tensor(
        np.zeros(cfg.num_classes, dtype=np.float32), requires_grad=True))

    if is_ann:
        # spiking-neuron parameters vanish with the neurons themselves
        for i in range(cfg.n_cla_blocks):
            for j in ("plif1", "plif2", "plif_out"):
                params.pop(f"cla{i + 1}.{j}.a")

    return Model(cfg, conv_blocks, cla_blocks, head_weight, head_bias,
                 params, bn_layers)

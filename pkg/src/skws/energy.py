"""Spike-rate measurement and the ANN-relative energy ratio.

The energy model follows the neuromorphic-computing convention: an SNN pays
one accumulate (AC) per incoming spike per synapse, an ANN pays one
multiply-accumulate (MAC) per synapse per pass, and

    energy_rate = (AC/MAC cost ratio) * mean firing rate * time steps

with AC/MAC = 1/7 by default. The first layer consumes the real-valued
waveform in both models and is therefore counted as MAC work on both sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor

DEFAULT_AC_MAC = 1.0 / 7.0


@dataclass
class _LayerStats:
    spikes: np.ndarray   # per time step
    elements: np.ndarray


class SpikeRecord:
    """Accumulates per-layer spike and element counts, per time step.

    Records from separate batches merge by plain addition, so accumulation
    order does not matter. Gated accumulate counts for convolutions reading
    binary inputs are collected alongside.
    """

    def __init__(self):
        self.layers: dict[str, _LayerStats] = {}
        self.conv_ac: dict[str, float] = {}
        self.samples = 0
        self.timesteps = 0

    def count_batch(self, batch: int, timesteps: int) -> None:
        self.samples += batch
        self.timesteps = max(self.timesteps, timesteps)

    def add_spikes(self, layer: str, data: np.ndarray, timesteps: int) -> None:
        values = data.data if isinstance(data, Tensor) else np.asarray(data)
        if not bool(((values == 0.0) | (values == 1.0)).all()):
            raise ContractError(f"layer {layer!r} output is not binary")
        total = values.shape[0]
        if timesteps < 1 or total % timesteps != 0:
            raise ContractError(
                f"stacked axis {total} not divisible into {timesteps} steps")
        batch = total // timesteps
        per_elem = values[0].size * batch
        stats = self.layers.get(layer)
        if stats is None:
            stats = _LayerStats(np.zeros(timesteps, dtype=np.float64),
                                np.zeros(timesteps, dtype=np.float64))
            self.layers[layer] = stats
        elif stats.spikes.shape[0] != timesteps:
            raise ContractError(
                f"layer {layer!r} recorded with {stats.spikes.shape[0]} steps, "
                f"now given {timesteps}")
        for t in range(timesteps):
            stats.spikes[t] += float(values[t * batch:(t + 1) * batch]
                                     .sum(dtype=np.float64))
            stats.elements[t] += per_elem

    def add_conv_ac(self, layer: str, count: float) -> None:
        self.conv_ac[layer] = self.conv_ac.get(layer, 0.0) + float(count)

    def layer_rate(self, layer: str) -> float:
        stats = self.layers[layer]
        return float(stats.spikes.sum() / stats.elements.sum())

    def layer_step_rates(self, layer: str) -> np.ndarray:
        stats = self.layers[layer]
        return stats.spikes / stats.elements

    def mean_rate(self) -> float:
        """Element-weighted firing rate across all recorded layers."""
        spikes = sum(s.spikes.sum() for s in self.layers.values())
        elements = sum(s.elements.sum() for s in self.layers.values())
        if elements == 0:
            return 0.0
        return float(spikes / elements)

    def unweighted_mean_rate(self) -> float:
        if not self.layers:
            return 0.0
        return float(np.mean([self.layer_rate(name) for name in self.layers]))

    def total_conv_ac(self) -> float:
        return float(sum(self.conv_ac.values()))


def record_spikes(record: SpikeRecord, layer_id: str, spikes,
                  timesteps: int = 1) -> SpikeRecord:
    """Accumulate a binary spike tensor into the record; returns the record."""
    record.add_spikes(layer_id, spikes, timesteps)
    return record


def energy_ratio(mean_rate: float, timesteps: int,
                 ac_mac: float = DEFAULT_AC_MAC) -> tuple[float, float]:
    """(energy_rate, saving_factor) of the SNN relative to its dense twin."""
    if not 0.0 <= mean_rate <= 1.0:
        raise ContractError(f"mean_rate must lie in [0, 1], got {mean_rate}")
    if timesteps < 1:
        raise ContractError(f"timesteps must be at least 1, got {timesteps}")
    if ac_mac <= 0.0:
        raise ContractError(f"ac_mac must be positive, got {ac_mac}")
    rate = ac_mac * mean_rate * timesteps
    saving = math.inf if rate == 0.0 else 1.0 / rate
    return rate, saving


@dataclass
class EnergyReport:
    """Firing rates, synaptic-operation counts and the derived energy ratio."""

    layer_rates: dict
    layer_elements: dict
    layer_spikes: dict
    mean_rate: float
    unweighted_mean_rate: float
    timesteps: int
    ac_mac_ratio: float
    energy_rate: float
    saving_factor: float
    snn_ac_ops: float = 0.0
    ann_mac_ops: float = 0.0
    front_mac_ops: float = 0.0
    samples: int = 0

    def to_text(self) -> str:
        lines = [
            f"samples={self.samples}",
            f"timesteps={self.timesteps}",
            f"ac_mac_ratio={self.ac_mac_ratio!r}",
            f"mean_rate={self.mean_rate!r}",
            f"unweighted_mean_rate={self.unweighted_mean_rate!r}",
            f"energy_rate={self.energy_rate!r}",
            f"saving_factor={self.saving_factor!r}",
            f"snn_ac_ops={self.snn_ac_ops!r}",
            f"ann_mac_ops={self.ann_mac_ops!r}",
            f"front_mac_ops={self.front_mac_ops!r}",
            "",
            "layer,elements,spikes,rate",
        ]
        for name in self.layer_rates:
            lines.append(f"{name},{self.layer_elements[name]:.0f},"
                         f"{self.layer_spikes[name]:.0f},{self.layer_rates[name]!r}")
        return "\n".join(lines) + "\n"


def build_report(record: SpikeRecord, ac_mac: float = DEFAULT_AC_MAC,
                 ann_mac_ops: float = 0.0, front_mac_ops: float = 0.0) -> EnergyReport:
    mean = record.mean_rate()
    timesteps = max(record.timesteps, 1)
    rate, saving = energy_ratio(mean, timesteps, ac_mac)
    per_sample_ac = record.total_conv_ac() / record.samples if record.samples else 0.0
    return EnergyReport(
        layer_rates={name: record.layer_rate(name) for name in record.layers},
        layer_elements={name: float(s.elements.sum()) for name, s in record.layers.items()},
        layer_spikes={name: float(s.spikes.sum()) for name, s in record.layers.items()},
        mean_rate=mean,
        unweighted_mean_rate=record.unweighted_mean_rate(),
        timesteps=timesteps,
        ac_mac_ratio=ac_mac,
        energy_rate=rate,
        saving_factor=saving,
        snn_ac_ops=per_sample_ac,
        ann_mac_ops=ann_mac_ops,
        front_mac_ops=front_mac_ops,
        samples=record.samples,
    )


def count_ops(model, input_shape, record: SpikeRecord) -> tuple[float, float]:
    """(snn_ac_ops, ann_mac_ops) per sample for a completed recorded forward.

    The SNN side counts accumulates gated by presynaptic spikes over all time
    steps; the ANN side is the dense MAC count of the identical topology for
    a single pass. The first convolution consumes the real-valued waveform
    and is excluded here, being MAC work in both models.
    """
    if record.samples == 0:
        raise ContractError("record holds no completed forward pass")
    length = input_shape[-1]
    if length != model.cfg.sample_len:
        raise ContractError(
            f"record input length {length} does not match model "
            f"{model.cfg.sample_len}")
    snn_ac = record.total_conv_ac() / record.samples
    ann_mac = float(model.dense_mac_count(length))
    return snn_ac, ann_mac

"""Parametric latency model for compute and communication phases.

Absolute numbers are illustrative only: they depend entirely on the chosen
parameters, which default to a 64 MHz Cortex-M-class core and BLE-PHY-sized
slots. What the model is for is the scaling shape: per-device compute shrinks
with the device count, round-based communication stays roughly constant in it,
and pruning cuts the transmitted bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .config import TransformerConfig
from .errors import ConfigError
from .partition import gather_sites


@dataclass(frozen=True)
class LatencyParams:
    macs_per_second: float = 16e6
    bytes_per_slot: int = 96
    slot_seconds: float = 1e-3
    slots_overhead_per_round: int = 24   # grows with network diameter

    def __post_init__(self):
        for name in ("macs_per_second", "bytes_per_slot", "slot_seconds"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.slots_overhead_per_round < 0:
            raise ConfigError("slots_overhead_per_round must be >= 0")


BLOCKS = ("attention", "residual", "layer")


def _held_in(width: int, devices: int, ratio: float) -> int:
    per_dev = width // devices
    zeros = math.floor(ratio * per_dev)
    return per_dev + (devices - 1) * (per_dev - zeros)


def device_macs(config: TransformerConfig, devices: int, ratio: float,
                block: str = "layer") -> int:
    """Per-device multiply-accumulate count of one layer's schedule.

    Rows pruned from communication are excluded from the products that would
    have consumed them; element-wise work (softmax, layernorm, activations) is
    not counted.
    """
    cfg = replace(config, devices=devices)
    n = cfg.tokens
    s = cfg.cols_per_device
    held_f = _held_in(cfg.features, devices, ratio)
    attention = 3 * n * held_f * s                       # q, k, v projections
    attention += 2 * n * n * cfg.head_dim * cfg.heads_per_device
    attention += n * held_f * s                          # output projection
    residual = 0
    for rows, cols in cfg.mlp_weight_shapes():
        residual += n * _held_in(rows, devices, ratio) * (cols // devices)
    if block == "attention":
        return attention
    if block == "residual":
        return residual
    if block == "layer":
        return attention + residual
    raise ConfigError(f"unknown block {block!r}, expected one of {BLOCKS}")


def compute_latency(config: TransformerConfig, devices: int, ratio: float,
                    params: LatencyParams, block: str = "layer") -> float:
    """Seconds of per-device compute for one layer block."""
    return device_macs(config, devices, ratio, block) / params.macs_per_second


def comm_latency(config: TransformerConfig, devices: int, ratio: float,
                 params: LatencyParams, block: str = "layer") -> float:
    """Seconds of communication for one layer block.

    Per round: ceil(transmitted bytes / bytes_per_slot) payload slots plus the
    fixed per-round overhead, times the slot length. A single device runs no
    rounds at all.
    """
    if devices == 1:
        return 0.0
    cfg = replace(config, devices=devices)
    if block == "attention":
        sites = gather_sites(cfg)[:2]
    elif block == "residual":
        sites = gather_sites(cfg)[2:]
    elif block == "layer":
        sites = gather_sites(cfg)
    else:
        raise ConfigError(f"unknown block {block!r}, expected one of {BLOCKS}")
    n, b = cfg.tokens, cfg.bytes_per_element
    seconds = 0.0
    for site in sites:
        kept = site.per_device - math.floor(ratio * site.per_device)
        sent = n * b * devices * kept
        slots = math.ceil(sent / params.bytes_per_slot) + params.slots_overhead_per_round
        seconds += slots * params.slot_seconds
    return seconds


def total_latency(config: TransformerConfig, devices: int, ratio: float,
                  params: LatencyParams, block: str = "layer") -> float:
    return (compute_latency(config, devices, ratio, params, block)
            + comm_latency(config, devices, ratio, params, block))


def speedup(config: TransformerConfig, devices: int, ratio: float,
            params: LatencyParams, block: str = "layer") -> float:
    """Latency of central execution divided by the distributed latency.

    Central execution is one device running the full unpruned model with no
    communication; with communication-dominated parameters the ratio can drop
    below one.
    """
    central = compute_latency(config, 1, 0.0, params, block)
    return central / total_latency(config, devices, ratio, params, block)

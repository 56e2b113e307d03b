"""Analytical per-device resource accounting and feasibility sweeps.

Byte accounting is decoupled from the numeric path: the simulator computes in
32-bit floats, while `bytes_per_element` (default 1, i.e. 8-bit deployment
accounting) scales every formula here.

Working-buffer model, asserted by the tests: three per-head scratch matrices
of tokens x head_dim (queries, keys, values are computed one head at a time)
plus one tokens x cols_per_device output accumulator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .config import TransformerConfig
from .errors import ConfigError
from .partition import PruneSpec, gather_sites


@dataclass(frozen=True)
class DeviceBudget:
    """Flash/RAM capacity with reserves for code, stack and radio buffers."""

    flash_bytes: int
    ram_bytes: int
    reserve_flash: int = 64 * 1024
    reserve_ram: int = 32 * 1024

    def __post_init__(self):
        if self.reserve_flash >= self.flash_bytes:
            raise ConfigError("reserve_flash must be smaller than flash_bytes")
        if self.reserve_ram >= self.ram_bytes:
            raise ConfigError("reserve_ram must be smaller than ram_bytes")

    @classmethod
    def nrf52840(cls) -> "DeviceBudget":
        return cls(flash_bytes=1024 * 1024, ram_bytes=256 * 1024)

    @property
    def usable_flash(self) -> int:
        return self.flash_bytes - self.reserve_flash

    @property
    def usable_ram(self) -> int:
        return self.ram_bytes - self.reserve_ram


# ---------------------------------------------------------------------------
# Per-device formulas
# ---------------------------------------------------------------------------


def working_buffer_bytes(config: TransformerConfig) -> int:
    n, b = config.tokens, config.bytes_per_element
    return 3 * n * config.head_dim * b + n * config.cols_per_device * b


def site_activation_bytes(config: TransformerConfig, held_count: int) -> int:
    """Bytes to store the held activation columns at one site."""
    return config.tokens * held_count * config.bytes_per_element


def weight_flash_per_device(config: TransformerConfig, ratio: float = 0.0) -> int:
    """Weight bytes one device stores, excluding layernorm vectors.

    Pruning removes weight rows: a pruned column's outgoing off-device weights
    are never used and need not be stored, while the device's own rows always
    remain. Per device and site, floor(ratio * S) columns are pruned.
    """
    d = config.devices
    b = config.bytes_per_element

    def stored_rows(width: int) -> int:
        per_dev = width // d
        zeros = math.floor(ratio * per_dev)
        return per_dev + (d - 1) * (per_dev - zeros)

    f = config.features
    s_out = config.cols_per_device
    per_layer = 3 * stored_rows(f) * s_out      # q, k, v share the x-site mask
    per_layer += stored_rows(f) * s_out         # output projection
    for rows, cols in config.mlp_weight_shapes():
        per_layer += stored_rows(rows) * (cols // d)
    return config.layers * per_layer * b


def layernorm_flash_per_device(config: TransformerConfig) -> int:
    """Every device stores full-length scale/shift for all columns it may hold."""
    return config.layers * 4 * config.features * config.bytes_per_element


def flash_per_device(config: TransformerConfig, ratio: float = 0.0) -> int:
    return weight_flash_per_device(config, ratio) + layernorm_flash_per_device(config)


def activation_bytes(config: TransformerConfig, width: int, ratio: float) -> float:
    """Expected held-activation bytes at a site of the given width: all own
    columns plus the unpruned fraction of the received ones."""
    n, b, d = config.tokens, config.bytes_per_element, config.devices
    own = width // d
    return n * b * (own + (width - own) * (1.0 - ratio))


def ram_per_device(config: TransformerConfig, ratio: float = 0.0) -> float:
    """Peak activation bytes across sites plus working buffers."""
    peak = max(activation_bytes(config, site.width, ratio)
               for site in gather_sites(config))
    return peak + working_buffer_bytes(config)


def comm_per_inference(config: TransformerConfig, ratio: float = 0.0) -> int:
    """Total broadcast bytes of one inference at a uniform pruning ratio.

    Matches the executor's lossless traces exactly: per round each device
    broadcasts its unpruned own columns, floor(ratio * S) of which are pruned.
    """
    if config.devices == 1:
        return 0
    n, b, d = config.tokens, config.bytes_per_element, config.devices
    total = 0
    for site in gather_sites(config):
        kept = site.per_device - math.floor(ratio * site.per_device)
        total += n * b * d * kept
    return config.layers * total


def comm_from_masks(config: TransformerConfig, prune: PruneSpec) -> int:
    """Exact broadcast bytes for arbitrary masks: N * b * sum of mask bits."""
    if config.devices == 1:
        return 0
    n, b = config.tokens, config.bytes_per_element
    return sum(int(mask.sum()) * n * b for mask in prune.masks.values())


@dataclass(frozen=True)
class ResourceReport:
    """Per-device accounting for one configuration (equal partitions, so all
    devices are symmetric)."""

    flash_bytes: int
    weight_flash_bytes: int
    ram_bytes: float
    comm_bytes_per_inference: int

    def to_dict(self) -> dict:
        return {
            "flash_bytes": self.flash_bytes,
            "weight_flash_bytes": self.weight_flash_bytes,
            "ram_bytes": self.ram_bytes,
            "comm_bytes_per_inference": self.comm_bytes_per_inference,
        }


def resource_report(config: TransformerConfig, ratio: float = 0.0) -> ResourceReport:
    return ResourceReport(
        flash_bytes=flash_per_device(config, ratio),
        weight_flash_bytes=weight_flash_per_device(config, ratio),
        ram_bytes=ram_per_device(config, ratio),
        comm_bytes_per_inference=comm_per_inference(config, ratio),
    )


# ---------------------------------------------------------------------------
# Primitive cost archetypes (qualitative baseline comparison)
# ---------------------------------------------------------------------------

ARCHETYPES = ("allgather", "allreduce", "reducescatter", "replicated")


@dataclass(frozen=True)
class ArchetypeCost:
    ram_bytes: float
    flash_bytes: float
    comm_bytes: float


def archetype_costs(primitive: str, config: TransformerConfig) -> ArchetypeCost:
    """Closed-form costs of one collective under the broadcast-only round
    contract, for an activation matrix of tokens x features and the whole
    model's weights.

    AllGather puts the activation matrix on the air once. Sum-based
    collectives must broadcast full per-device partial sums, so their traffic
    and (for allreduce, which buffers a whole round before reducing) their RAM
    grow linearly with the device count. Replication avoids communication but
    stores the entire model on every device.
    """
    n, f, b, d = config.tokens, config.features, config.bytes_per_element, config.devices
    c_a = n * f * b
    c_w = config.weight_elements() * b
    if primitive == "allgather":
        return ArchetypeCost(ram_bytes=c_a + c_w / d,
                             flash_bytes=c_w / d,
                             comm_bytes=c_a if d > 1 else 0)
    if primitive == "allreduce":
        return ArchetypeCost(ram_bytes=d * c_a + c_w / d,
                             flash_bytes=c_w / d,
                             comm_bytes=(d - 1) * c_a)
    if primitive == "reducescatter":
        return ArchetypeCost(ram_bytes=c_a + c_a / d + c_w / d,
                             flash_bytes=c_w / d,
                             comm_bytes=(d - 1) * c_a)
    if primitive == "replicated":
        return ArchetypeCost(ram_bytes=c_a, flash_bytes=c_w, comm_bytes=0)
    raise ConfigError(f"unknown primitive {primitive!r}, expected one of {ARCHETYPES}")


# ---------------------------------------------------------------------------
# Feasibility boundary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryPoint:
    tokens: int
    max_features: int
    binding_constraint: str     # "flash", "ram", "both" or "none"


def feasibility_boundary(
    budget: DeviceBudget,
    base: TransformerConfig,
    token_counts,
    ratio: float = 0.0,
    max_features: int = 4096,
) -> list[BoundaryPoint]:
    """Largest feasible feature width per token count under the budget.

    The feature width steps by lcm(heads, devices), the coarsest granularity
    every candidate must satisfy; the residual-block hidden width scales with
    the same multiplier as in the base config. binding_constraint names the
    resource that rules out the next step up.
    """
    step = math.lcm(base.heads, base.devices)
    mlp_mult = max(1, round(base.mlp_hidden / base.features))
    points = []
    for n in token_counts:
        best = 0
        binding = "both"
        for f in range(step, max_features + 1, step):
            cfg = replace(base, features=f, mlp_hidden=mlp_mult * f, tokens=int(n))
            flash_ok = flash_per_device(cfg, ratio) <= budget.usable_flash
            ram_ok = ram_per_device(cfg, ratio) <= budget.usable_ram
            if flash_ok and ram_ok:
                best = f
            else:
                binding = ("both" if not flash_ok and not ram_ok
                           else "flash" if not flash_ok else "ram")
                break
        else:
            binding = "none"
        points.append(BoundaryPoint(tokens=int(n), max_features=best,
                                    binding_constraint=binding))
    return points


def write_boundary_csv(points: list[BoundaryPoint], path) -> None:
    """CSV schema: N, F_max, binding_constraint."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "F_max", "binding_constraint"])
        for p in points:
            writer.writerow([p.tokens, p.max_features, p.binding_constraint])

"""Partitioning compiler: head assignment, weight sharding, pruning masks.

A deployment splits the feature dimension into D contiguous column blocks and
assigns each device a contiguous run of attention heads. Every inter-device
exchange happens at a "gather site"; per site and device a binary mask selects
which of the device's own activation columns are broadcast. The expansion of
those masks is a block matrix with all-ones diagonal blocks (intra-device
links are never pruned) and constant columns within each off-diagonal block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .config import TransformerConfig
from .errors import PruneError, ShapeError
from .kernels import DTYPE, ColumnSet, Matrix, as_matrix

if TYPE_CHECKING:  # pragma: no cover
    from .model import LayerWeights, ModelBundle

MASK_DTYPE = np.uint8


@dataclass(frozen=True)
class GatherSite:
    """One point in the layer pipeline where an all-to-all round occurs."""

    name: str
    width: int          # total gathered activation width
    per_device: int     # columns owned by each device at this site


def gather_sites(config: TransformerConfig) -> tuple[GatherSite, ...]:
    """Sites of one layer, in execution order.

    "x": input gather feeding layernorm and the Q/K/V projections (one mask
    governs all three). "h": head-output gather feeding the output projection.
    "mlp{i}": one gather before each residual-block weight matrix; the first
    reuses its gathered columns for the residual-block layernorm.
    """
    d = config.devices
    sites = [
        GatherSite("x", config.features, config.features // d),
        GatherSite("h", config.features, config.features // d),
    ]
    for i in range(config.mlp_weight_count):
        width = config.features if i == 0 else config.mlp_hidden
        sites.append(GatherSite(f"mlp{i}", width, width // d))
    return tuple(sites)


@dataclass(frozen=True)
class Partition:
    """Device-to-heads and device-to-columns assignment (contiguous blocks)."""

    devices: int
    cols_per_device: int
    head_map: tuple[tuple[int, ...], ...]
    col_ranges: tuple[tuple[int, int], ...]

    def own_columns(self, device: int, width: int | None = None) -> ColumnSet:
        """The device's own column indices at a site of the given total width."""
        if width is None:
            width = self.devices * self.cols_per_device
        per_dev = width // self.devices
        return np.arange(device * per_dev, (device + 1) * per_dev, dtype=np.int64)


def build_partition(config: TransformerConfig) -> Partition:
    """Contiguous block assignment: device d gets heads [d*H/D, (d+1)*H/D) and
    columns [d*S, (d+1)*S)."""
    config.validate()
    d = config.devices
    hpd = config.heads_per_device
    s = config.cols_per_device
    head_map = tuple(tuple(range(dev * hpd, (dev + 1) * hpd)) for dev in range(d))
    col_ranges = tuple((dev * s, (dev + 1) * s) for dev in range(d))
    return Partition(devices=d, cols_per_device=s, head_map=head_map, col_ranges=col_ranges)


# ---------------------------------------------------------------------------
# Pruning masks
# ---------------------------------------------------------------------------


@dataclass
class PruneSpec:
    """Per-layer, per-site, per-device binary broadcast masks.

    masks[(layer, site_name)] is a (devices, per_device) uint8 array; entry 1
    means the column is broadcast, 0 means it is pruned from communication and
    processed only on its owning device.
    """

    devices: int
    layer_count: int
    sites: tuple[GatherSite, ...]
    masks: dict[tuple[int, str], np.ndarray]

    @classmethod
    def all_ones(cls, config: TransformerConfig) -> "PruneSpec":
        sites = gather_sites(config)
        masks = {
            (layer, site.name): np.ones((config.devices, site.per_device), dtype=MASK_DTYPE)
            for layer in range(config.layers)
            for site in sites
        }
        return cls(devices=config.devices, layer_count=config.layers, sites=sites, masks=masks)

    def site(self, name: str) -> GatherSite:
        for s in self.sites:
            if s.name == name:
                return s
        raise ShapeError(f"unknown gather site {name!r}")

    def mask(self, layer: int, site_name: str) -> np.ndarray:
        try:
            return self.masks[(layer, site_name)]
        except KeyError:
            raise ShapeError(f"no mask for layer {layer}, site {site_name!r}") from None

    def validate(self) -> None:
        expected = {(layer, s.name): s.per_device
                    for layer in range(self.layer_count) for s in self.sites}
        if set(self.masks) != set(expected):
            raise ShapeError("mask keys do not cover exactly all (layer, site) pairs")
        for key, arr in self.masks.items():
            if arr.shape != (self.devices, expected[key]):
                raise ShapeError(f"mask {key} has shape {arr.shape}, "
                                 f"expected {(self.devices, expected[key])}")
            if not np.isin(arr, (0, 1)).all():
                raise ShapeError(f"mask {key} contains values other than 0/1")

    def copy(self) -> "PruneSpec":
        return PruneSpec(self.devices, self.layer_count, self.sites,
                         {k: v.copy() for k, v in self.masks.items()})

    def sparsity(self) -> float:
        """Fraction of zero mask bits across all sites and devices."""
        total = sum(a.size for a in self.masks.values())
        zeros = sum(int(a.size - a.sum()) for a in self.masks.values())
        return zeros / total if total else 0.0

    def matches(self, config: TransformerConfig) -> bool:
        return (self.devices == config.devices
                and self.layer_count == config.layers
                and self.sites == gather_sites(config))


def lossless_held(prune: PruneSpec, layer: int, site_name: str, device: int) -> ColumnSet:
    """Columns a device holds after a loss-free round: all of its own plus
    every other device's unpruned columns."""
    site = prune.site(site_name)
    mask = prune.mask(layer, site_name)
    held = np.zeros(site.width, dtype=bool)
    for dev in range(prune.devices):
        lo = dev * site.per_device
        if dev == device:
            held[lo:lo + site.per_device] = True
        else:
            held[lo:lo + site.per_device] = mask[dev].astype(bool)
    return np.flatnonzero(held).astype(np.int64)


def expand_mask(prune: PruneSpec, layer: int, site_name: str) -> Matrix:
    """Expand a site's masks into the square block mask matrix.

    Diagonal blocks are all ones; the off-diagonal blocks of block-row d
    repeat the device's mask column-wise, so a pruned column severs all of its
    outgoing inter-device links at once.
    """
    site = prune.site(site_name)
    mask = prune.mask(layer, site_name)
    s = site.per_device
    out = np.zeros((site.width, site.width), dtype=DTYPE)
    for dev in range(prune.devices):
        lo = dev * s
        rows = mask[dev].astype(DTYPE)[:, None]
        out[lo:lo + s, :] = rows            # p_d repeated column-wise
        out[lo:lo + s, lo:lo + s] = DTYPE(1)  # own block never pruned
    return out


# ---------------------------------------------------------------------------
# Column ranking and stepwise pruning
# ---------------------------------------------------------------------------


def column_scores(weights_at_site, partition: Partition) -> np.ndarray:
    """Magnitude score of each gathered column: sum of |w| over destination
    columns owned by *other* devices (intra-device links are never pruned and
    do not count). Accepts one consuming weight matrix or a sequence sharing
    the same gathered input (Q/K/V share the x-site mask)."""
    if isinstance(weights_at_site, (list, tuple)):
        mats = [as_matrix(w) for w in weights_at_site]
    else:
        mats = [as_matrix(weights_at_site)]
    d = partition.devices
    rows = mats[0].shape[0]
    if rows % d:
        raise ShapeError(f"gathered width {rows} not divisible by {d} devices")
    s_in = rows // d
    scores = np.zeros((d, s_in), dtype=np.float64)
    for w in mats:
        if w.shape[0] != rows:
            raise ShapeError("weight matrices at one site must share their input width")
        if w.shape[1] % d:
            raise ShapeError(f"output width {w.shape[1]} not divisible by {d} devices")
        s_out = w.shape[1] // d
        absw = np.abs(w, dtype=np.float64)
        row_totals = absw.sum(axis=1)
        for dev in range(d):
            r0, c0 = dev * s_in, dev * s_out
            own = absw[r0:r0 + s_in, c0:c0 + s_out].sum(axis=1)
            scores[dev] += row_totals[r0:r0 + s_in] - own
    return scores


def rank_columns(weights_at_site, partition: Partition) -> np.ndarray:
    """Per-device local column order, ascending by score (lowest pruned first),
    ties broken by lower column index."""
    scores = column_scores(weights_at_site, partition)
    return np.argsort(scores, axis=1, kind="stable").astype(np.int64)


def site_rankings(bundle: "ModelBundle", partition: Partition) -> dict[tuple[int, str], np.ndarray]:
    """Rankings for every (layer, site) from the bundle's weights."""
    rankings: dict[tuple[int, str], np.ndarray] = {}
    for layer_idx, lw in enumerate(bundle.layers):
        rankings[(layer_idx, "x")] = rank_columns([lw.w_q, lw.w_k, lw.w_v], partition)
        rankings[(layer_idx, "h")] = rank_columns(lw.w_o, partition)
        for i, w in enumerate(lw.mlp):
            rankings[(layer_idx, f"mlp{i}")] = rank_columns(w, partition)
    return rankings


def stepwise_schedule(target_ratio: float, stages: int) -> list[float]:
    """Evenly spaced cumulative pruning ratios ending at target_ratio."""
    if not 0.0 <= target_ratio < 1.0:
        raise PruneError(f"target ratio must be in [0, 1), got {target_ratio}")
    if stages < 1:
        raise PruneError("stages must be >= 1")
    return [target_ratio * (i + 1) / stages for i in range(stages)]


def apply_pruning(
    prune: PruneSpec,
    ratio: float,
    rankings: Mapping[tuple[int, str], np.ndarray],
) -> PruneSpec:
    """Zero the lowest-ranked floor(ratio*S) columns per device and site.

    Columns already pruned stay pruned; requesting fewer zeros than already
    present violates nestedness and is rejected.
    """
    if not 0.0 <= ratio < 1.0:
        raise PruneError(f"ratio must be in [0, 1), got {ratio}")
    out = prune.copy()
    for (layer, site_name), mask in out.masks.items():
        s = mask.shape[1]
        target = math.floor(ratio * s)
        ranking = rankings.get((layer, site_name))
        if ranking is None:
            raise PruneError(f"no ranking for layer {layer}, site {site_name!r}")
        for dev in range(out.devices):
            zeros = int(s - mask[dev].sum())
            if target < zeros:
                raise PruneError(
                    f"non-nested pruning request at layer {layer}, site {site_name!r}: "
                    f"{target} zeros requested but {zeros} already pruned")
            for col in ranking[dev]:
                if zeros >= target:
                    break
                if mask[dev, col]:
                    mask[dev, col] = 0
                    zeros += 1
    return out


def build_pruned_spec(
    bundle: "ModelBundle",
    partition: Partition,
    target_ratio: float,
    stages: int = 1,
) -> PruneSpec:
    """All-ones masks pruned to target_ratio via the stepwise schedule, with
    rankings fixed from the bundle's current weights."""
    rankings = site_rankings(bundle, partition)
    spec = PruneSpec.all_ones(bundle.config)
    for ratio in stepwise_schedule(target_ratio, stages):
        spec = apply_pruning(spec, ratio, rankings)
    return spec


# ---------------------------------------------------------------------------
# Weight sharding
# ---------------------------------------------------------------------------


@dataclass
class ShardLayer:
    """One device's column slices of a layer's weights (full-length ln vectors)."""

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    mlp: list[Matrix]
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass
class DeviceShard:
    """Everything one device stores: head assignment, weight slices, masks."""

    device: int
    heads: tuple[int, ...]
    config: TransformerConfig
    layers: list[ShardLayer]
    local_masks: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


def _out_block(w: Matrix, device: int, devices: int) -> Matrix:
    cols = w.shape[1] // devices
    return np.ascontiguousarray(w[:, device * cols:(device + 1) * cols])


def shard_weights(bundle: "ModelBundle", partition: Partition) -> list[DeviceShard]:
    """Slice a bundle into per-device shards.

    Each device keeps the Q/K/V columns consumed by its heads (which are
    exactly its feature columns, since head assignment is contiguous), the
    matching output-projection columns, its residual-block columns, and the
    full-length layernorm scale/shift vectors.
    """
    config = bundle.config
    if partition.devices != config.devices or partition.cols_per_device != config.cols_per_device:
        raise ShapeError("partition does not match bundle config")
    prune = bundle.prune
    shards = []
    for dev in range(partition.devices):
        layers = []
        for lw in bundle.layers:
            layers.append(ShardLayer(
                w_q=_out_block(lw.w_q, dev, partition.devices),
                w_k=_out_block(lw.w_k, dev, partition.devices),
                w_v=_out_block(lw.w_v, dev, partition.devices),
                w_o=_out_block(lw.w_o, dev, partition.devices),
                mlp=[_out_block(w, dev, partition.devices) for w in lw.mlp],
                ln1_gamma=lw.ln1_gamma.copy(),
                ln1_beta=lw.ln1_beta.copy(),
                ln2_gamma=lw.ln2_gamma.copy(),
                ln2_beta=lw.ln2_beta.copy(),
            ))
        local_masks = {}
        if prune is not None:
            local_masks = {key: m[dev].copy() for key, m in prune.masks.items()}
        shards.append(DeviceShard(
            device=dev,
            heads=partition.head_map[dev],
            config=config,
            layers=layers,
            local_masks=local_masks,
        ))
    return shards


def reassemble_shards(shards: Sequence[DeviceShard]) -> list["LayerWeights"]:
    """Column-wise concatenation of all shards; exact inverse of shard_weights."""
    from .model import LayerWeights

    if not shards:
        raise ShapeError("no shards to reassemble")
    config = shards[0].config
    if sorted(s.device for s in shards) != list(range(config.devices)):
        raise ShapeError("shards do not cover exactly devices 0..D-1")
    by_dev = sorted(shards, key=lambda s: s.device)
    layers = []
    for layer_idx in range(config.layers):
        parts = [s.layers[layer_idx] for s in by_dev]
        layers.append(LayerWeights(
            w_q=np.concatenate([p.w_q for p in parts], axis=1),
            w_k=np.concatenate([p.w_k for p in parts], axis=1),
            w_v=np.concatenate([p.w_v for p in parts], axis=1),
            w_o=np.concatenate([p.w_o for p in parts], axis=1),
            mlp=[np.concatenate([p.mlp[i] for p in parts], axis=1)
                 for i in range(config.mlp_weight_count)],
            ln1_gamma=parts[0].ln1_gamma.copy(),
            ln1_beta=parts[0].ln1_beta.copy(),
            ln2_gamma=parts[0].ln2_gamma.copy(),
            ln2_beta=parts[0].ln2_beta.copy(),
        ))
    return layers

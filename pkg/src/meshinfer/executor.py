"""Round-synchronized distributed executor.

Each virtual device runs the layer pipeline on its shard, alternating
all-to-all gather rounds with local compute. A barrier separates every round
from compute: no device starts computing before the round resolves, so the
simulation is deterministic regardless of device iteration order. Columns a
device did not receive are simply excluded from layernorm statistics and from
the masked multiplications, which is mathematically identical to zeroing the
corresponding weight rows for that round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import resources
from .config import TransformerConfig
from .errors import AssemblyError, ProtocolError, ShapeError
from .kernels import (
    DTYPE,
    ColumnSet,
    Matrix,
    as_matrix,
    attention_head,
    activation,
    layernorm_rows,
    masked_matmul,
)
from .mesh import GatherTrace, LossModel, Payload, somegather_round
from .model import _check_input
from .partition import DeviceShard, GatherSite, PruneSpec, gather_sites


@dataclass
class DeviceState:
    """Mutable per-device runtime state during one inference."""

    shard: DeviceShard
    own_block: Matrix                      # this device's current activation columns
    held: ColumnSet | None = None          # held columns at the current site
    rounds_seen: int = 0
    peak_activation_bytes: int = 0


@dataclass
class ExecReport:
    """Everything observable about one distributed inference."""

    output: Matrix
    traces: list[list[GatherTrace]]        # [layer][site]
    site_names: tuple[str, ...]
    peak_activation_bytes: list[int]
    comm_bytes_total: int

    def to_dict(self, include_output: bool = True) -> dict:
        data = {
            "site_names": list(self.site_names),
            "rounds_per_layer": len(self.site_names),
            "comm_bytes_total": self.comm_bytes_total,
            "peak_activation_bytes": self.peak_activation_bytes,
            "layers": [
                [
                    {
                        "round_id": t.round_id,
                        "site": t.site,
                        "sent_bytes": t.sent_bytes,
                        "sent_cols": [c.tolist() for c in t.sent_cols],
                        "delivered": t.delivered.tolist(),
                    }
                    for t in layer
                ]
                for layer in self.traces
            ],
        }
        if include_output:
            data["output"] = self.output.tolist()
        return data

    def trace_lines(self) -> list[str]:
        """One JSON record per round, in execution order."""
        lines = []
        for layer in self.traces:
            for t in layer:
                lines.append(json.dumps({
                    "round_id": t.round_id,
                    "site": t.site,
                    "sent_bytes": t.sent_bytes,
                    "sent_cols": [c.tolist() for c in t.sent_cols],
                    "delivered": t.delivered.tolist(),
                }))
        return lines

    def write_trace_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(line + "\n" for line in self.trace_lines())


def handle_missing(
    own: ColumnSet,
    received: Mapping[int, Payload],
    expected: ColumnSet,
    width: int,
) -> ColumnSet:
    """Held columns after a round: own plus whatever actually arrived.

    Receiving a column outside the expected (unpruned) set violates the
    protocol; missing expected columns are silently excluded, which downstream
    equals zeroing the corresponding weight rows for this round.
    """
    held = np.zeros(width, dtype=bool)
    held[own] = True
    expected_mask = np.zeros(width, dtype=bool)
    expected_mask[expected] = True
    for sender, payload in received.items():
        if not expected_mask[payload.cols].all():
            bad = [int(c) for c in payload.cols if not expected_mask[c]]
            raise ProtocolError(f"received pruned columns {bad} from device {sender}")
        held[payload.cols] = True
    return np.flatnonzero(held).astype(np.int64)


def assemble_output(pieces: Iterable[tuple[int, Matrix]]) -> Matrix:
    """Concatenate column blocks given as (start column, block) pairs.

    The blocks must tile the full width exactly; gaps and overlaps are errors.
    Assembly is order-independent.
    """
    items = sorted(((int(start), as_matrix(block)) for start, block in pieces),
                   key=lambda p: p[0])
    if not items:
        raise AssemblyError("no column blocks to assemble")
    rows = items[0][1].shape[0]
    cursor = 0
    for start, block in items:
        if block.shape[0] != rows:
            raise AssemblyError("column blocks disagree on row count")
        if start < cursor:
            raise AssemblyError(f"overlapping column blocks at column {start}")
        if start > cursor:
            raise AssemblyError(f"gap in column blocks at column {cursor}")
        cursor += block.shape[1]
    return np.concatenate([block for _, block in items], axis=1)


def _gather(
    states: list[DeviceState],
    blocks: list[Matrix],
    prune: PruneSpec,
    layer_idx: int,
    site: GatherSite,
    loss: LossModel,
    round_id: int,
    config: TransformerConfig,
) -> tuple[list[Matrix], list[ColumnSet], GatherTrace]:
    """One all-to-all round at a site; returns per-device full-width buffers
    (zeros outside held columns) and the held sets."""
    d = len(states)
    mask = prune.mask(layer_idx, site.name)
    payloads = []
    for dev in range(d):
        lo = dev * site.per_device
        local = np.flatnonzero(mask[dev]).astype(np.int64)
        payloads.append(Payload(cols=local + lo,
                                values=np.ascontiguousarray(blocks[dev][:, local])))
    received, trace = somegather_round(
        payloads, loss, round_id, config.bytes_per_element, site=site.name)

    buffers: list[Matrix] = []
    held_sets: list[ColumnSet] = []
    for dev in range(d):
        own = np.arange(dev * site.per_device, (dev + 1) * site.per_device, dtype=np.int64)
        # expected: all own columns plus other devices' unpruned columns
        exp = np.zeros(site.width, dtype=bool)
        exp[own] = True
        for e in range(d):
            if e != dev:
                lo = e * site.per_device
                exp[lo:lo + site.per_device] = mask[e].astype(bool)
        expected_cols = np.flatnonzero(exp).astype(np.int64)
        held = handle_missing(own, received[dev], expected_cols, site.width)
        buffer = np.zeros((config.tokens, site.width), dtype=DTYPE)
        buffer[:, own] = blocks[dev]
        for payload in received[dev].values():
            buffer[:, payload.cols] = payload.values
        buffers.append(buffer)
        held_sets.append(held)
        states[dev].held = held
        states[dev].rounds_seen += 1
        site_bytes = resources.site_activation_bytes(config, held.size)
        states[dev].peak_activation_bytes = max(
            states[dev].peak_activation_bytes,
            site_bytes + resources.working_buffer_bytes(config))
    return buffers, held_sets, trace


def run_inference(
    shards: Sequence[DeviceShard],
    prune: PruneSpec | None,
    loss: LossModel,
    x1: Matrix,
) -> ExecReport:
    """Execute all layers across the virtual devices under the loss model.

    The caller supplies the full input matrix; the executor scatters it by
    column range (distributed sources are emulated, not implemented). The
    output is the column-wise assembly of the devices' blocks.
    """
    if not shards:
        raise ShapeError("no shards")
    config = shards[0].config
    if sorted(s.device for s in shards) != list(range(config.devices)):
        raise ShapeError("shards must cover exactly devices 0..D-1")
    shards = sorted(shards, key=lambda s: s.device)
    if prune is None:
        prune = PruneSpec.all_ones(config)
    if not prune.matches(config):
        raise ShapeError("prune masks do not match shard config")
    prune.validate()

    x = _check_input(config, x1)
    d = config.devices
    s = config.cols_per_device
    dh = config.head_dim
    sites = gather_sites(config)

    states = [DeviceState(shard=shard,
                          own_block=np.ascontiguousarray(x[:, i * s:(i + 1) * s]))
              for i, shard in enumerate(shards)]

    traces: list[list[GatherTrace]] = []
    round_id = 0
    for layer_idx in range(config.layers):
        layer_traces: list[GatherTrace] = []

        # --- attention: gather x, device-local layernorm, local heads ---
        x_blocks = [st.own_block for st in states]
        buffers, held_x, trace = _gather(
            states, x_blocks, prune, layer_idx, sites[0], loss, round_id, config)
        round_id += 1
        layer_traces.append(trace)
        h_blocks = []
        for dev, st in enumerate(states):
            lw = st.shard.layers[layer_idx]
            xbar = layernorm_rows(buffers[dev], held_x[dev], lw.ln1_gamma, lw.ln1_beta)
            head_outs = []
            for h_local in range(config.heads_per_device):
                lo = h_local * dh
                head_outs.append(attention_head(
                    masked_matmul(xbar, lw.w_q[:, lo:lo + dh], held_x[dev]),
                    masked_matmul(xbar, lw.w_k[:, lo:lo + dh], held_x[dev]),
                    masked_matmul(xbar, lw.w_v[:, lo:lo + dh], held_x[dev]),
                ))
            h_blocks.append(np.concatenate(head_outs, axis=1))

        # --- gather head outputs, output projection, local residual add ---
        buffers, held_h, trace = _gather(
            states, h_blocks, prune, layer_idx, sites[1], loss, round_id, config)
        round_id += 1
        layer_traces.append(trace)
        y_blocks = []
        for dev, st in enumerate(states):
            lw = st.shard.layers[layer_idx]
            o = masked_matmul(buffers[dev], lw.w_o, held_h[dev])
            y_blocks.append(o + x_blocks[dev])

        # --- residual block: gather before every weight matrix ---
        cur_blocks = y_blocks
        for i in range(config.mlp_weight_count):
            site = sites[2 + i]
            buffers, held, trace = _gather(
                states, cur_blocks, prune, layer_idx, site, loss, round_id, config)
            round_id += 1
            layer_traces.append(trace)
            next_blocks = []
            for dev, st in enumerate(states):
                lw = st.shard.layers[layer_idx]
                z = (layernorm_rows(buffers[dev], held[dev], lw.ln2_gamma, lw.ln2_beta)
                     if i == 0 else buffers[dev])
                block = masked_matmul(z, lw.mlp[i], held[dev])
                if i < config.mlp_weight_count - 1:
                    block = activation(block, config.activation)
                next_blocks.append(block)
            cur_blocks = next_blocks

        for dev, st in enumerate(states):
            st.own_block = cur_blocks[dev] + y_blocks[dev]
        traces.append(layer_traces)

    output = assemble_output((dev * s, st.own_block) for dev, st in enumerate(states))
    if config.layers == 0:
        for st in states:
            st.peak_activation_bytes = resources.site_activation_bytes(config, s) \
                + resources.working_buffer_bytes(config)
    return ExecReport(
        output=output,
        traces=traces,
        site_names=tuple(site.name for site in sites),
        peak_activation_bytes=[st.peak_activation_bytes for st in states],
        comm_bytes_total=sum(t.total_bytes for layer in traces for t in layer),
    )

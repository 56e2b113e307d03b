"""Centralized reference transformer, in two flavors.

`forward_standard` evaluates the textbook layer stack. `forward_virtual_devices`
emulates the distributed deployment in a single process: per-device layernorm
statistics over held columns only, and every weight multiplication restricted
to the columns the device would actually have received. With all-ones masks
the two are bit-identical; the distributed executor is checked against both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import partition as part
from .config import TransformerConfig
from .errors import ShapeError
from .kernels import (
    DTYPE,
    Matrix,
    as_matrix,
    attention_head,
    activation,
    full_columns,
    layernorm_rows,
    masked_matmul,
    matmul,
)


@dataclass
class LayerWeights:
    """Dense weights of one transformer layer (biases omitted)."""

    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    mlp: list[Matrix]
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    def validate(self, config: TransformerConfig) -> None:
        f = config.features
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (f, f):
                raise ShapeError(f"{name} must be {f}x{f}, got {w.shape}")
        shapes = config.mlp_weight_shapes()
        if len(self.mlp) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} residual-block matrices, got {len(self.mlp)}")
        for i, (w, shape) in enumerate(zip(self.mlp, shapes)):
            if w.shape != shape:
                raise ShapeError(f"mlp[{i}] must be {shape}, got {w.shape}")
        for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            v = getattr(self, name)
            if v.shape != (f,):
                raise ShapeError(f"{name} must have length {f}, got shape {v.shape}")


@dataclass
class ModelBundle:
    """Serialization unit: config, layer weights, optional masks, metadata."""

    config: TransformerConfig
    layers: list[LayerWeights]
    prune: part.PruneSpec | None = None
    metadata: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        self.config.validate()
        if len(self.layers) != self.config.layers:
            raise ShapeError(
                f"bundle has {len(self.layers)} layers, config says {self.config.layers}")
        for lw in self.layers:
            lw.validate(self.config)
        if self.prune is not None:
            if not self.prune.matches(self.config):
                raise ShapeError("prune masks do not match config dimensions")
            self.prune.validate()


def random_bundle(config: TransformerConfig, seed: int = 0) -> ModelBundle:
    """Procedurally generated bundle with well-conditioned random weights."""
    rng = np.random.default_rng(seed)

    def w(rows, cols):
        scale = 0.5 / np.sqrt(rows)
        return (rng.standard_normal((rows, cols)) * scale).astype(DTYPE)

    def ln(base):
        return (base + 0.05 * rng.standard_normal(config.features)).astype(DTYPE)

    f = config.features
    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            w_q=w(f, f), w_k=w(f, f), w_v=w(f, f), w_o=w(f, f),
            mlp=[w(r, c) for r, c in config.mlp_weight_shapes()],
            ln1_gamma=ln(1.0), ln1_beta=ln(0.0),
            ln2_gamma=ln(1.0), ln2_beta=ln(0.0),
        ))
    bundle = ModelBundle(config=config, layers=layers,
                         metadata={"generator": "random", "seed": str(seed)})
    bundle.validate()
    return bundle


def _check_input(config: TransformerConfig, x1) -> Matrix:
    x = as_matrix(x1)
    if x.shape != (config.tokens, config.features):
        raise ShapeError(
            f"input must be {config.tokens}x{config.features}, got {x.shape}")
    return x


def forward_standard(bundle: ModelBundle, x1: Matrix) -> Matrix:
    """Plain centralized forward pass through all layers."""
    config = bundle.config
    x = _check_input(config, x1)
    all_cols = full_columns(config.features)
    dh = config.head_dim
    for lw in bundle.layers:
        xbar = layernorm_rows(x, all_cols, lw.ln1_gamma, lw.ln1_beta)
        q = matmul(xbar, lw.w_q)
        k = matmul(xbar, lw.w_k)
        v = matmul(xbar, lw.w_v)
        heads = [attention_head(q[:, h * dh:(h + 1) * dh],
                                k[:, h * dh:(h + 1) * dh],
                                v[:, h * dh:(h + 1) * dh])
                 for h in range(config.heads)]
        y = matmul(np.concatenate(heads, axis=1), lw.w_o) + x
        cur = layernorm_rows(y, all_cols, lw.ln2_gamma, lw.ln2_beta)
        for i, w in enumerate(lw.mlp):
            cur = matmul(cur, w)
            if i < len(lw.mlp) - 1:
                cur = activation(cur, config.activation)
        x = cur + y
    return x


def forward_virtual_devices(
    bundle: ModelBundle,
    partition: part.Partition,
    x1: Matrix,
    prune: part.PruneSpec | None = None,
) -> Matrix:
    """Single-process emulation of the pruned distributed deployment.

    Every device sees the full activation matrix here, but uses only the
    columns it would hold after a loss-free round: layernorm statistics come
    from held columns, and each multiplication skips unheld rows. The output
    is the column-wise assembly of all devices' blocks.
    """
    config = bundle.config
    if partition.devices != config.devices:
        raise ShapeError("partition does not match bundle config")
    x = _check_input(config, x1)
    if prune is None:
        prune = bundle.prune if bundle.prune is not None else part.PruneSpec.all_ones(config)
    if not prune.matches(config):
        raise ShapeError("prune masks do not match config dimensions")

    d = config.devices
    s = config.cols_per_device
    dh = config.head_dim
    hpd = config.heads_per_device

    for layer_idx, lw in enumerate(bundle.layers):
        held_x = [part.lossless_held(prune, layer_idx, "x", dev) for dev in range(d)]
        h_blocks = []
        for dev in range(d):
            xbar = layernorm_rows(x, held_x[dev], lw.ln1_gamma, lw.ln1_beta)
            head_outs = []
            for h_local in range(hpd):
                lo = dev * s + h_local * dh
                head_outs.append(attention_head(
                    masked_matmul(xbar, lw.w_q[:, lo:lo + dh], held_x[dev]),
                    masked_matmul(xbar, lw.w_k[:, lo:lo + dh], held_x[dev]),
                    masked_matmul(xbar, lw.w_v[:, lo:lo + dh], held_x[dev]),
                ))
            h_blocks.append(np.concatenate(head_outs, axis=1))
        h_full = np.concatenate(h_blocks, axis=1)

        y_blocks = []
        for dev in range(d):
            held_h = part.lossless_held(prune, layer_idx, "h", dev)
            o = masked_matmul(h_full, lw.w_o[:, dev * s:(dev + 1) * s], held_h)
            y_blocks.append(o + x[:, dev * s:(dev + 1) * s])
        y = np.concatenate(y_blocks, axis=1)

        cur = y
        for i, w in enumerate(lw.mlp):
            out_cols = w.shape[1] // d
            blocks = []
            for dev in range(d):
                held = part.lossless_held(prune, layer_idx, f"mlp{i}", dev)
                z = layernorm_rows(cur, held, lw.ln2_gamma, lw.ln2_beta) if i == 0 else cur
                block = masked_matmul(z, w[:, dev * out_cols:(dev + 1) * out_cols], held)
                if i < len(lw.mlp) - 1:
                    block = activation(block, config.activation)
                blocks.append(block)
            cur = np.concatenate(blocks, axis=1)
        x = cur + y
    return x

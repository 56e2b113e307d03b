"""Binary model-bundle reader/writer.

Layout (all integers little-endian uint32 unless noted):

    magic            4 bytes, b"CATS"
    version          u32, currently 1
    config           9 x u32: layers, features, heads, tokens, mlp_hidden,
                     mlp_layers, activation code (0=relu, 1=gelu), devices,
                     bytes_per_element
    per layer        w_q, w_k, w_v, w_o, residual-block matrices in order,
                     then ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
                     each as raw row-major float32
    mask flag        u8: 0 = no masks, 1 = mask section follows
    mask section     per layer, per gather site (x, h, mlp0, mlp1, ...), per
                     device: one byte (0/1) per mask bit
    metadata         u32 entry count, then per entry u32 key length, key
                     bytes (UTF-8), u32 value length, value bytes

The file ends exactly after the metadata section; trailing bytes are an error.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .config import ACTIVATIONS, TransformerConfig
from .errors import (
    BundleFormatError,
    BundleMagicError,
    BundleTruncatedError,
    BundleVersionError,
    ConfigError,
    ShapeError,
)
from .kernels import DTYPE
from .model import LayerWeights, ModelBundle
from .partition import MASK_DTYPE, PruneSpec, gather_sites

MAGIC = b"CATS"
VERSION = 1
_CONFIG_FIELDS = ("layers", "features", "heads", "tokens", "mlp_hidden",
                  "mlp_layers", "activation", "devices", "bytes_per_element")


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _write_array(fh: BinaryIO, a: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(a, dtype=DTYPE).tobytes())


def write_bundle(bundle: ModelBundle, sink) -> None:
    """Serialize a bundle to a path or binary file object."""
    bundle.validate()
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            write_bundle(bundle, fh)
        return
    fh: BinaryIO = sink
    cfg = bundle.config
    fh.write(MAGIC)
    _write_u32(fh, VERSION)
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if name == "activation":
            value = ACTIVATIONS.index(value)
        _write_u32(fh, value)
    for lw in bundle.layers:
        for w in (lw.w_q, lw.w_k, lw.w_v, lw.w_o, *lw.mlp):
            _write_array(fh, w)
        for v in (lw.ln1_gamma, lw.ln1_beta, lw.ln2_gamma, lw.ln2_beta):
            _write_array(fh, v)
    if bundle.prune is None:
        fh.write(b"\x00")
    else:
        fh.write(b"\x01")
        for layer in range(cfg.layers):
            for site in gather_sites(cfg):
                mask = bundle.prune.mask(layer, site.name)
                fh.write(mask.astype(np.uint8).tobytes())
    _write_u32(fh, len(bundle.metadata))
    for key, value in bundle.metadata.items():
        kb, vb = key.encode("utf-8"), str(value).encode("utf-8")
        _write_u32(fh, len(kb))
        fh.write(kb)
        _write_u32(fh, len(vb))
        fh.write(vb)


class _Reader:
    def __init__(self, fh: BinaryIO):
        self.fh = fh

    def take(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise BundleTruncatedError(
                f"stream ended while reading {what} ({len(data)}/{n} bytes)")
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        data = self.take(4 * count, what)
        return np.frombuffer(data, dtype=DTYPE).reshape(shape).copy()


def read_bundle(source) -> ModelBundle:
    """Parse a bundle from a path or binary file object; exact round trip."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_bundle(fh)
    if isinstance(source, (bytes, bytearray)):
        return read_bundle(io.BytesIO(source))
    r = _Reader(source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BundleMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise BundleVersionError(f"unsupported bundle version {version}")
    raw = {name: r.u32(f"config field {name}") for name in _CONFIG_FIELDS}
    if raw["activation"] >= len(ACTIVATIONS):
        raise BundleFormatError(f"unknown activation code {raw['activation']}")
    raw["activation"] = ACTIVATIONS[raw["activation"]]
    try:
        cfg = TransformerConfig(**raw)
    except ConfigError as exc:
        raise BundleFormatError(f"inconsistent config: {exc}") from exc

    f = cfg.features
    layers = []
    for layer in range(cfg.layers):
        mats = [r.f32_array((f, f), f"layer {layer} projection") for _ in range(4)]
        mlp = [r.f32_array(shape, f"layer {layer} residual-block matrix")
               for shape in cfg.mlp_weight_shapes()]
        vecs = [r.f32_array((f,), f"layer {layer} layernorm vector") for _ in range(4)]
        layers.append(LayerWeights(*mats, mlp, *vecs))

    flag = r.take(1, "mask flag")[0]
    prune = None
    if flag == 1:
        sites = gather_sites(cfg)
        masks = {}
        for layer in range(cfg.layers):
            for site in sites:
                data = r.take(cfg.devices * site.per_device,
                              f"mask (layer {layer}, site {site.name})")
                arr = np.frombuffer(data, dtype=np.uint8).reshape(
                    cfg.devices, site.per_device).astype(MASK_DTYPE)
                if not np.isin(arr, (0, 1)).all():
                    raise BundleFormatError(
                        f"mask bytes must be 0/1 (layer {layer}, site {site.name})")
                masks[(layer, site.name)] = arr
        prune = PruneSpec(devices=cfg.devices, layer_count=cfg.layers,
                          sites=sites, masks=masks)
    elif flag != 0:
        raise BundleFormatError(f"mask flag must be 0 or 1, got {flag}")

    metadata = {}
    for _ in range(r.u32("metadata count")):
        klen = r.u32("metadata key length")
        key = r.take(klen, "metadata key").decode("utf-8")
        vlen = r.u32("metadata value length")
        metadata[key] = r.take(vlen, "metadata value").decode("utf-8")

    if r.fh.read(1):
        raise BundleFormatError("trailing data after metadata section")

    bundle = ModelBundle(config=cfg, layers=layers, prune=prune, metadata=metadata)
    try:
        bundle.validate()
    except ShapeError as exc:
        raise BundleFormatError(f"inconsistent bundle: {exc}") from exc
    return bundle

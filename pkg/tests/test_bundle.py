import io

import numpy as np
import pytest

from meshinfer.bundle import MAGIC, read_bundle, write_bundle
from meshinfer.config import TransformerConfig
from meshinfer.errors import (
    BundleFormatError,
    BundleMagicError,
    BundleTruncatedError,
    BundleVersionError,
)
from meshinfer.model import random_bundle
from meshinfer.partition import build_partition, build_pruned_spec


def roundtrip(bundle):
    buf = io.BytesIO()
    write_bundle(bundle, buf)
    buf.seek(0)
    return read_bundle(buf), buf.getvalue()


def assert_bundles_equal(a, b):
    assert a.config == b.config
    assert a.metadata == b.metadata
    assert len(a.layers) == len(b.layers)
    for la, lb in zip(a.layers, b.layers):
        for name in ("w_q", "w_k", "w_v", "w_o", "ln1_gamma", "ln1_beta",
                     "ln2_gamma", "ln2_beta"):
            assert np.array_equal(getattr(la, name), getattr(lb, name))
        for wa, wb in zip(la.mlp, lb.mlp):
            assert np.array_equal(wa, wb)
    assert (a.prune is None) == (b.prune is None)
    if a.prune is not None:
        assert set(a.prune.masks) == set(b.prune.masks)
        for key in a.prune.masks:
            assert np.array_equal(a.prune.masks[key], b.prune.masks[key])


class TestRoundTrip:
    def test_plain_bundle(self):
        cfg = TransformerConfig(layers=2, features=8, heads=2, tokens=4)
        bundle = random_bundle(cfg, seed=1)
        bundle.metadata["note"] = "smoke"
        back, _ = roundtrip(bundle)
        assert_bundles_equal(bundle, back)

    def test_bundle_with_masks(self):
        cfg = TransformerConfig(layers=2, features=16, heads=4, tokens=4,
                                mlp_layers=2, devices=4)
        bundle = random_bundle(cfg, seed=2)
        bundle.prune = build_pruned_spec(bundle, build_partition(cfg), 0.5)
        back, _ = roundtrip(bundle)
        assert_bundles_equal(bundle, back)

    def test_paper_scale_header(self):
        # six layers, feature width 128 survives the header round trip
        cfg = TransformerConfig(layers=6, features=128, heads=8, tokens=16,
                                devices=8)
        bundle = random_bundle(cfg, seed=3)
        back, _ = roundtrip(bundle)
        assert back.config == cfg

    def test_metadata_unicode(self):
        cfg = TransformerConfig(layers=1, features=8, heads=2, tokens=2)
        bundle = random_bundle(cfg, seed=4)
        bundle.metadata = {"desc": "sinusoïde 数据", "empty": ""}
        back, _ = roundtrip(bundle)
        assert back.metadata == bundle.metadata

    def test_file_path_round_trip(self, tmp_path):
        cfg = TransformerConfig(layers=1, features=8, heads=2, tokens=2)
        bundle = random_bundle(cfg, seed=5)
        path = tmp_path / "model.bundle"
        write_bundle(bundle, path)
        assert_bundles_equal(bundle, read_bundle(path))


class TestErrors:
    def make_bytes(self):
        cfg = TransformerConfig(layers=1, features=8, heads=2, tokens=2)
        _, raw = roundtrip(random_bundle(cfg, seed=6))
        return raw

    def test_bad_magic(self):
        raw = bytearray(self.make_bytes())
        raw[:4] = b"NOPE"
        with pytest.raises(BundleMagicError):
            read_bundle(bytes(raw))

    def test_version_mismatch(self):
        raw = bytearray(self.make_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(BundleVersionError):
            read_bundle(bytes(raw))

    def test_truncated(self):
        raw = self.make_bytes()
        with pytest.raises(BundleTruncatedError):
            read_bundle(raw[: len(raw) // 2])

    def test_truncated_header(self):
        raw = self.make_bytes()
        with pytest.raises(BundleTruncatedError):
            read_bundle(raw[:10])

    def test_dimension_inconsistency(self):
        raw = bytearray(self.make_bytes())
        # features=8 -> 6, which heads=2 divides but breaks the stored sizes
        raw[12:16] = (6).to_bytes(4, "little")
        with pytest.raises((BundleFormatError, BundleTruncatedError)):
            read_bundle(bytes(raw))

    def test_invalid_config_value(self):
        raw = bytearray(self.make_bytes())
        raw[16:20] = (3).to_bytes(4, "little")  # heads=3 does not divide features=8
        with pytest.raises(BundleFormatError):
            read_bundle(bytes(raw))

    def test_trailing_data(self):
        raw = self.make_bytes() + b"x"
        with pytest.raises(BundleFormatError, match="trailing"):
            read_bundle(raw)

    def test_magic_constant(self):
        assert self.make_bytes()[:4] == MAGIC

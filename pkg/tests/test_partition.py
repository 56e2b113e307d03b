import numpy as np
import pytest

from meshinfer.config import TransformerConfig
from meshinfer.errors import ConfigError, PruneError
from meshinfer.model import random_bundle
from meshinfer.partition import (
    PruneSpec,
    apply_pruning,
    build_partition,
    build_pruned_spec,
    column_scores,
    expand_mask,
    gather_sites,
    rank_columns,
    reassemble_shards,
    shard_weights,
    site_rankings,
    stepwise_schedule,
)

F32 = np.float32


class TestBuildPartition:
    def test_block_formula(self):
        cfg = TransformerConfig(layers=1, features=128, heads=8, tokens=4, devices=4)
        part = build_partition(cfg)
        assert part.cols_per_device == 32
        assert part.head_map[1] == (2, 3)
        assert part.col_ranges[1] == (32, 64)

    def test_single_device_holds_everything(self):
        cfg = TransformerConfig(layers=1, features=16, heads=4, tokens=4, devices=1)
        part = build_partition(cfg)
        assert part.head_map == ((0, 1, 2, 3),)
        assert part.col_ranges == ((0, 16),)

    def test_more_devices_than_heads_rejected(self):
        with pytest.raises(ConfigError, match="divide heads"):
            TransformerConfig(layers=1, features=128, heads=8, tokens=4, devices=16)

    def test_head_map_partitions_all_heads(self):
        cfg = TransformerConfig(layers=1, features=32, heads=8, tokens=4, devices=4)
        part = build_partition(cfg)
        seen = [h for dev in part.head_map for h in dev]
        assert seen == list(range(8))


class TestGatherSites:
    def test_site_order_and_widths(self):
        cfg = TransformerConfig(layers=1, features=16, heads=4, tokens=4,
                                mlp_hidden=32, mlp_layers=2, devices=2)
        sites = gather_sites(cfg)
        assert [s.name for s in sites] == ["x", "h", "mlp0", "mlp1", "mlp2"]
        assert [s.width for s in sites] == [16, 16, 16, 32, 32]
        assert [s.per_device for s in sites] == [8, 8, 8, 16, 16]


class TestShardWeights:
    def test_single_device_equals_full_weights(self):
        cfg = TransformerConfig(layers=2, features=8, heads=2, tokens=4, devices=1)
        bundle = random_bundle(cfg, seed=1)
        shard = shard_weights(bundle, build_partition(cfg))[0]
        for i, lw in enumerate(bundle.layers):
            assert np.array_equal(shard.layers[i].w_q, lw.w_q)
            assert np.array_equal(shard.layers[i].mlp[1], lw.mlp[1])

    def test_w_o_slice_is_col_range(self):
        cfg = TransformerConfig(layers=1, features=4, heads=2, tokens=2, devices=2)
        bundle = random_bundle(cfg, seed=2)
        shards = shard_weights(bundle, build_partition(cfg))
        assert np.array_equal(shards[1].layers[0].w_o, bundle.layers[0].w_o[:, 2:4])

    def test_qkv_slices_cover_assigned_heads(self):
        cfg = TransformerConfig(layers=1, features=16, heads=4, tokens=2, devices=2)
        bundle = random_bundle(cfg, seed=3)
        shards = shard_weights(bundle, build_partition(cfg))
        # device 1 owns heads {2,3}: q columns [8,16)
        assert np.array_equal(shards[1].layers[0].w_q, bundle.layers[0].w_q[:, 8:16])

    @pytest.mark.parametrize("devices", [1, 2, 4])
    def test_reassemble_round_trip_bit_exact(self, devices):
        cfg = TransformerConfig(layers=2, features=16, heads=4, tokens=4,
                                mlp_layers=2, devices=devices)
        bundle = random_bundle(cfg, seed=devices)
        shards = shard_weights(bundle, build_partition(cfg))
        rebuilt = reassemble_shards(shards)
        for orig, back in zip(bundle.layers, rebuilt):
            assert np.array_equal(orig.w_q, back.w_q)
            assert np.array_equal(orig.w_k, back.w_k)
            assert np.array_equal(orig.w_v, back.w_v)
            assert np.array_equal(orig.w_o, back.w_o)
            for a, b in zip(orig.mlp, back.mlp):
                assert np.array_equal(a, b)
            assert np.array_equal(orig.ln1_gamma, back.ln1_gamma)


class TestExpandMask:
    def cfg(self, devices=2, features=4):
        return TransformerConfig(layers=1, features=features, heads=devices,
                                 tokens=2, devices=devices)

    def test_no_pruning_all_ones(self):
        prune = PruneSpec.all_ones(self.cfg())
        assert np.array_equal(expand_mask(prune, 0, "x"), np.ones((4, 4), F32))

    def test_hand_expanded_block_formula(self):
        prune = PruneSpec.all_ones(self.cfg())
        prune.masks[(0, "x")][0] = [1, 0]
        prune.masks[(0, "x")][1] = [0, 1]
        expected = np.array([
            [1, 1, 1, 1],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [1, 1, 1, 1],
        ], dtype=F32)
        assert np.array_equal(expand_mask(prune, 0, "x"), expected)

    def test_single_device_all_ones(self):
        cfg = TransformerConfig(layers=1, features=4, heads=2, tokens=2, devices=1)
        prune = PruneSpec.all_ones(cfg)
        prune.masks[(0, "x")][0] = [0, 0, 1, 0]
        assert np.array_equal(expand_mask(prune, 0, "x"), np.ones((4, 4), F32))

    def test_structure_for_random_masks(self):
        rng = np.random.default_rng(0)
        cfg = TransformerConfig(layers=2, features=16, heads=4, tokens=2, devices=4)
        for _ in range(20):
            prune = PruneSpec.all_ones(cfg)
            for key in prune.masks:
                prune.masks[key] = rng.integers(0, 2, prune.masks[key].shape).astype(np.uint8)
            for site in ("x", "h", "mlp0", "mlp1"):
                p = expand_mask(prune, 1, site)
                per = p.shape[0] // 4
                for d in range(4):
                    lo = d * per
                    block = p[lo:lo + per, lo:lo + per]
                    assert (block == 1).all()
                    for e in range(4):
                        if e == d:
                            continue
                        off = p[lo:lo + per, e * per:(e + 1) * per]
                        # every column within an off-diagonal block is identical
                        assert (off == off[:, :1]).all()


class TestRankColumns:
    def make_partition(self, devices, features):
        cfg = TransformerConfig(layers=1, features=features, heads=devices,
                                tokens=2, devices=devices)
        return build_partition(cfg)

    def test_zero_weights_tie_break_by_index(self):
        part = self.make_partition(2, 4)
        ranking = rank_columns(np.zeros((4, 4), F32), part)
        assert np.array_equal(ranking, [[0, 1], [0, 1]])

    def test_off_diagonal_score_only(self):
        # D=2, S=1: only the off-device entry counts
        part = self.make_partition(2, 2)
        w = np.array([[1, -3], [2, 0.5]], dtype=F32)
        scores = column_scores(w, part)
        assert scores[0, 0] == pytest.approx(3.0)
        assert scores[1, 0] == pytest.approx(2.0)

    def test_scaling_leaves_ranking_unchanged(self):
        rng = np.random.default_rng(4)
        part = self.make_partition(4, 16)
        w = rng.standard_normal((16, 16)).astype(F32)
        assert np.array_equal(rank_columns(w, part), rank_columns(2.0 * w, part))

    def test_multiple_matrices_sum_scores(self):
        part = self.make_partition(2, 2)
        w1 = np.array([[0, 1], [1, 0]], dtype=F32)
        w2 = np.array([[0, 2], [3, 0]], dtype=F32)
        scores = column_scores([w1, w2], part)
        assert scores[0, 0] == pytest.approx(3.0)
        assert scores[1, 0] == pytest.approx(4.0)


class TestStepwiseSchedule:
    def test_even_spacing_to_target(self):
        assert np.allclose(stepwise_schedule(0.9, 3), [0.3, 0.6, 0.9])

    def test_zero_target(self):
        assert stepwise_schedule(0.0, 4) == [0.0, 0.0, 0.0, 0.0]

    def test_half_in_two(self):
        assert np.allclose(stepwise_schedule(0.5, 2), [0.25, 0.5])

    def test_rejects_ratio_one(self):
        with pytest.raises(PruneError):
            stepwise_schedule(1.0, 2)


class TestApplyPruning:
    def setup_method(self):
        self.cfg = TransformerConfig(layers=2, features=16, heads=4, tokens=4,
                                     devices=4)
        self.bundle = random_bundle(self.cfg, seed=0)
        self.part = build_partition(self.cfg)
        self.rankings = site_rankings(self.bundle, self.part)

    def test_zero_ratio_unchanged(self):
        spec = apply_pruning(PruneSpec.all_ones(self.cfg), 0.0, self.rankings)
        assert spec.sparsity() == 0.0

    def test_floor_count(self):
        spec = apply_pruning(PruneSpec.all_ones(self.cfg), 0.5, self.rankings)
        for mask in spec.masks.values():
            s = mask.shape[1]
            for dev in range(4):
                assert mask[dev].sum() == s - s // 2

    def test_stepwise_equals_direct(self):
        stepped = PruneSpec.all_ones(self.cfg)
        for ratio in (0.3, 0.6):
            stepped = apply_pruning(stepped, ratio, self.rankings)
        direct = apply_pruning(PruneSpec.all_ones(self.cfg), 0.6, self.rankings)
        for key in stepped.masks:
            assert np.array_equal(stepped.masks[key], direct.masks[key])

    def test_non_nested_rejected(self):
        spec = apply_pruning(PruneSpec.all_ones(self.cfg), 0.6, self.rankings)
        with pytest.raises(PruneError, match="non-nested"):
            apply_pruning(spec, 0.3, self.rankings)

    def test_off_diagonal_zero_fraction_tracks_ratio(self):
        for ratio in (0.25, 0.5, 0.75):
            spec = build_pruned_spec(self.bundle, self.part, ratio)
            for (layer, site), mask in spec.masks.items():
                s = mask.shape[1]
                frac = 1.0 - mask.sum() / mask.size
                assert abs(frac - ratio) <= 1.0 / s + 1e-9

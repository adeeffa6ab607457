"""Deep and Reduction block contracts: channel algebra, extent behavior,
zero-weight annihilation, gradient checks."""
import numpy as np
import pytest

from uception.blocks import (
    DeepBlock,
    DeepBlockCfg,
    ReductionBlock,
    ReductionBlockCfg,
    deep_block,
    reduction_block,
)
from uception.errors import ShapeError
from uception.gradcheck import _check_deep_block, _check_reduction_block
from uception.layers import Context


def rng(seed=0):
    return np.random.default_rng(seed)


class TestDeepBlock:
    def test_channel_algebra_and_extent_preserved(self):
        cfg = DeepBlockCfg(in_channels=1, branch_depth=2)
        x = rng(1).standard_normal((1, 1, 8, 8, 8))
        y = deep_block(cfg, x, rng=rng(2))
        assert y.shape == (1, 8, 8, 8, 8)  # 4 * D channels

    def test_all_zero_weights_annihilate(self):
        cfg = DeepBlockCfg(in_channels=2, branch_depth=3)
        block = DeepBlock("deep", cfg, dtype=np.float64)
        x = rng(3).standard_normal((1, 2, 6, 6, 6))
        y, _ = block.forward(x, Context())
        assert not y.any()

    def test_channel_mismatch_rejected(self):
        block = DeepBlock("deep", DeepBlockCfg(in_channels=2, branch_depth=2))
        with pytest.raises(ShapeError):
            block.forward(np.zeros((1, 3, 4, 4, 4)), Context())

    def test_branch_structure_parameter_names(self):
        block = DeepBlock("blk", DeepBlockCfg(in_channels=2, branch_depth=2))
        names = set(block.parameters())
        assert names == {
            "blk.a.conv1.w", "blk.a.conv1.b",
            "blk.b.conv1.w", "blk.b.conv1.b", "blk.b.conv5.w", "blk.b.conv5.b",
            "blk.c.conv1.w", "blk.c.conv1.b", "blk.c.conv7.w", "blk.c.conv7.b",
            "blk.d.conv1.w", "blk.d.conv1.b",
        }
        assert block.parameters()["blk.b.conv5.w"].shape == (2, 2, 5, 5, 5)
        assert block.parameters()["blk.c.conv7.w"].shape == (2, 2, 7, 7, 7)

    def test_gradient_against_finite_differences(self):
        assert _check_deep_block() <= 1e-4


class TestReductionBlock:
    def test_channel_algebra_and_halved_extents(self):
        cfg = ReductionBlockCfg(in_channels=4, branch_depth=3)
        x = rng(4).standard_normal((1, 4, 16, 16, 16))
        y = reduction_block(cfg, x, rng=rng(5))
        assert y.shape == (1, 10, 8, 8, 8)  # in + 2 * D channels

    def test_three_reductions_reach_bottleneck(self):
        x = rng(6).standard_normal((1, 2, 64, 64, 64)).astype(np.float32)
        ch = 2
        for lv in range(3):
            cfg = ReductionBlockCfg(in_channels=ch, branch_depth=1)
            x = reduction_block(cfg, x, rng=rng(7))
            ch = cfg.out_channels
        assert x.shape[2:] == (8, 8, 8)

    def test_odd_extent_rejected(self):
        block = ReductionBlock("red", ReductionBlockCfg(in_channels=1, branch_depth=1))
        with pytest.raises(ShapeError) as err:
            block.forward(np.zeros((1, 1, 5, 4, 4)), Context())
        assert "odd" in str(err.value) or "depth" in str(err.value)

    def test_pool_branch_passes_channels_through(self):
        cfg = ReductionBlockCfg(in_channels=3, branch_depth=2)
        block = ReductionBlock("red", cfg, dtype=np.float64)
        x = rng(8).standard_normal((1, 3, 4, 4, 4))
        y, _ = block.forward(x, Context())
        # conv branches have zero weights; the first 3 channels are the pool
        pooled = y[:, :3]
        assert pooled.any()
        assert not y[:, 3:].any()

    def test_gradient_against_finite_differences(self):
        assert _check_reduction_block() <= 1e-4

"""Tests for CBAM, the moving-window variant, and the fusion block."""
import numpy as np
import pytest

from panoseg.fusion import (
    FusionBlockConfig,
    MCBAMConfig,
    cbam,
    cbam_channel_attention,
    cbam_spatial_attention,
    fusion_block,
    init_attention_params,
    init_fusion_params,
    mcbam,
)
from panoseg.tensor import Tensor, grad_check
from panoseg.verify import cbam_oracle, channel_attention_oracle, mcbam_oracle


def make_params(c, cfg, seed=0):
    return init_attention_params(c, cfg, np.random.default_rng(seed),
                                 dtype=np.float64)


def np_params(params):
    return {k: v.data for k, v in params.items()}


class TestCBAM:
    def test_channel_attention_matches_oracle(self):
        cfg = MCBAMConfig()
        for seed in range(5):
            x = np.random.default_rng(seed).standard_normal((2, 8, 5, 6))
            params = make_params(8, cfg, seed)
            got = cbam_channel_attention(Tensor(x), params).data
            want = channel_attention_oracle(x, np_params(params))
            np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_channel_attention_in_unit_interval(self):
        cfg = MCBAMConfig()
        x = np.random.default_rng(9).standard_normal((1, 16, 4, 4)) * 10
        att = cbam_channel_attention(Tensor(x), make_params(16, cfg)).data
        assert (att > 0).all() and (att < 1).all()

    def test_full_cbam_matches_oracle(self):
        cfg = MCBAMConfig()
        for seed in range(5):
            x = np.random.default_rng(seed + 20).standard_normal((2, 6, 7, 9))
            params = make_params(6, cfg, seed)
            got = cbam(Tensor(x), params).data
            np.testing.assert_allclose(got, cbam_oracle(x, np_params(params)),
                                       rtol=1e-9, atol=1e-12)

    def test_spatial_attention_shape(self):
        cfg = MCBAMConfig()
        x = Tensor(np.random.default_rng(3).standard_normal((2, 6, 5, 5)))
        assert cbam_spatial_attention(x, make_params(6, cfg)).shape == (2, 1, 5, 5)


class TestMCBAM:
    def test_matches_bruteforce_oracle(self):
        cfg = MCBAMConfig(window=(4, 4), stride=(2, 2))
        for seed in range(5):
            x = np.random.default_rng(seed + 40).standard_normal((1, 6, 9, 10))
            params = make_params(6, cfg, seed)
            got = mcbam(Tensor(x), cfg, params).data
            want = mcbam_oracle(x, cfg, np_params(params))
            np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-12)

    def test_degenerate_single_window_equals_cbam_bitwise(self):
        cfg = MCBAMConfig(window=(6, 8), stride=(6, 8))
        x = Tensor(np.random.default_rng(7).standard_normal((2, 5, 6, 8)))
        params = make_params(5, cfg, 7)
        got = mcbam(x, cfg, params).data
        want = cbam(x, params).data
        assert (got == want).all()

    def test_oversized_window_rejected(self):
        cfg = MCBAMConfig(window=(8, 8), stride=(4, 4))
        with pytest.raises(ValueError):
            mcbam(Tensor(np.zeros((1, 2, 4, 4))), cfg, make_params(2, cfg))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MCBAMConfig(window=(4, 4), stride=(5, 4))  # coverage gap
        with pytest.raises(ValueError):
            MCBAMConfig(spatial_kernel=4)
        with pytest.raises(ValueError):
            MCBAMConfig(window=(3, 3), stride=(1, 1), spatial_kernel=5)

    def test_gradients(self):
        cfg = MCBAMConfig(window=(3, 3), stride=(2, 2), spatial_kernel=3)
        params = make_params(4, cfg, 11)

        def f(x):
            return mcbam(x, cfg, params).sum()

        x = Tensor(np.random.default_rng(12).standard_normal((1, 4, 5, 5)),
                   requires_grad=True)
        assert grad_check(f, [x], max_coords=12) < 1e-5


class TestFusionBlock:
    def test_output_is_upscaled_2x(self):
        for att in ("none", "channel", "cbam", "mcbam"):
            cfg = FusionBlockConfig(attention=att,
                                    mcbam=MCBAMConfig(window=(2, 2), stride=(1, 1),
                                                      spatial_kernel=1))
            params = init_fusion_params(5, cfg, np.random.default_rng(1),
                                        dtype=np.float64)
            x = Tensor(np.random.default_rng(2).standard_normal((1, 5, 4, 6)))
            assert fusion_block(x, cfg, params).shape == (1, 5, 8, 12)

    def test_unknown_attention_rejected(self):
        with pytest.raises(ValueError):
            FusionBlockConfig(attention="simba")

"""Tests for the all-MLP decoder and spherical-attention view blending."""
import numpy as np
import pytest

from panoseg.decoder import (
    DecoderConfig,
    blend_views,
    init_decoder_params,
    init_spherical_params,
    mlp_decode,
    spherical_attention,
)
from panoseg.encoder import horizontal_positional_encoding
from panoseg.tensor import Tensor


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


class TestMlpDecode:
    def _setup(self, branch_channels, seed=0):
        cfg = DecoderConfig(embed=16, n_classes=5,
                            branch_channels=branch_channels)
        params = init_decoder_params(cfg, np.random.default_rng(seed),
                                     dtype=np.float64)
        return cfg, params

    def test_output_shape_single_branch(self):
        cfg, params = self._setup((6,))
        pe = horizontal_positional_encoding(8, 6).pe
        out = mlp_decode([Tensor(rand((1, 6, 4, 8), 1))], pe, cfg, params, 16, 32)
        assert out.shape == (1, 5, 16, 32)

    def test_mixed_resolutions_resized_to_largest(self):
        cfg, params = self._setup((6, 6))
        pe = horizontal_positional_encoding(8, 12).pe
        # both branches share one token width for the shared encoding, but
        # differ in height; decoding must align them
        branches = [Tensor(rand((1, 6, 2, 8), 2)), Tensor(rand((1, 6, 4, 8), 3))]
        with pytest.raises(Exception):
            # heights differ only; concat along channels requires equal dims
            mlp_decode(branches, pe, cfg, params, 16, 32)

    def test_positional_encoding_shape_enforced(self):
        cfg, params = self._setup((6,))
        pe = horizontal_positional_encoding(10, 6).pe  # wrong width
        with pytest.raises(ValueError):
            mlp_decode([Tensor(rand((1, 6, 4, 8), 4))], pe, cfg, params, 16, 32)

    def test_positional_encoding_shifts_logits(self):
        """The two pe variants must yield different logits on equal input."""
        cfg, params = self._setup((6,))
        table = horizontal_positional_encoding(8, 6)
        x = [Tensor(rand((1, 6, 4, 8), 5))]
        a = mlp_decode(x, table.pe, cfg, params, 16, 32).data
        b = mlp_decode(x, table.pe_shifted, cfg, params, 16, 32).data
        assert np.abs(a - b).max() > 1e-8


class TestSphericalAttention:
    def _params(self, n_classes=4, kernel=3, seed=0):
        return init_spherical_params(n_classes, np.random.default_rng(seed),
                                     kernel=kernel, dtype=np.float64)

    def test_output_in_unit_interval_and_same_shape(self):
        p = self._params()
        x1 = Tensor(rand((1, 4, 6, 12), 1))
        x2 = Tensor(rand((1, 4, 6, 12), 2))
        alpha = spherical_attention(x1, x2, p).data
        assert alpha.shape == (1, 4, 6, 12)
        assert (alpha > 0).all() and (alpha < 1).all()

    def test_roll_equivariance(self):
        p = self._params()
        x1 = rand((1, 4, 6, 12), 3)
        x2 = rand((1, 4, 6, 12), 4)
        base = spherical_attention(Tensor(x1), Tensor(x2), p).data
        for s in (1, 3, 6):
            rolled = spherical_attention(Tensor(np.roll(x1, s, axis=-1)),
                                         Tensor(np.roll(x2, s, axis=-1)), p).data
            np.testing.assert_allclose(rolled, np.roll(base, s, axis=-1),
                                       atol=1e-12)

    def test_mismatched_shapes_rejected(self):
        p = self._params()
        with pytest.raises(ValueError):
            spherical_attention(Tensor(rand((1, 4, 6, 12), 5)),
                                Tensor(rand((1, 4, 6, 10), 6)), p)


class TestBlendViews:
    def test_convex_combination(self):
        x1 = Tensor(np.full((1, 2, 2, 2), 4.0))
        x2 = Tensor(np.full((1, 2, 2, 2), 8.0))
        alpha = Tensor(np.full((1, 2, 2, 2), 0.25))
        np.testing.assert_allclose(blend_views(x1, x2, alpha).data,
                                   np.full((1, 2, 2, 2), 7.0))

    def test_extremes_select_single_view(self):
        x1 = Tensor(rand((1, 2, 3, 4), 7))
        x2 = Tensor(rand((1, 2, 3, 4), 8))
        ones = Tensor(np.ones((1, 2, 3, 4)))
        np.testing.assert_array_equal(blend_views(x1, x2, ones).data, x1.data)

    def test_out_of_range_alpha_rejected(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            blend_views(x, x, Tensor(np.full((1, 1, 2, 2), 1.5)))

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import cell_means, check_module, loop_weighted_tokens, projection_loss
from tokenlearner.errors import ConfigError, DimensionError
from tokenlearner.learner import (
    AltTokenizer,
    TokenLearnerLayer,
    alt_tokenize,
    grid_factors,
    learn_tokens,
    learn_tokens_video,
    read_pgm,
    write_pgm,
)


def _zero(layer):
    layer.load_state({k: np.zeros(v.shape) for k, v in layer.state_dict().items()})
    return layer


def _randomize(layer, rng, scale=0.5):
    layer.load_state({k: rng.standard_normal(v.shape) * scale for k, v in layer.state_dict().items()})
    return layer


@pytest.mark.parametrize("variant", ["conv4", "mlp"])
def test_zero_alpha_gives_half_mean(variant):
    layer = _zero(TokenLearnerLayer(1, 3, variant))
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        z = learn_tokens(x, layer).data
    np.testing.assert_array_equal(z, [[1.25]] * 3)


def test_token_shape():
    layer = TokenLearnerLayer(64, 8, "conv4", np.random.default_rng(0))
    assert learn_tokens(np.zeros((32, 32, 64)), layer).shape == (8, 64)


def test_too_many_tokens_warns():
    layer = TokenLearnerLayer(2, 4, "mlp")
    with pytest.warns(UserWarning):
        layer(np.ones((2, 2, 2)))


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        TokenLearnerLayer(4, 2)(np.ones((3, 3, 5)))


def test_indicator_map_picks_one_pixel():
    # mlp variant with hand-set weights: logit +40 at pixel (0,0), -40 elsewhere;
    # the hidden unit is gelu(80) = 80 or gelu(-80) = 0
    h, w, c = 3, 4, 2
    x = np.random.default_rng(0).standard_normal((h, w, c + 1))
    x[..., -1] = -1.0
    x[0, 0, -1] = 1.0
    layer = TokenLearnerLayer(c + 1, 1, "mlp", hidden=1)
    w1 = np.zeros((c + 1, 1))
    w1[-1, 0] = 80.0
    layer.load_state({"fc1/weight": w1, "fc1/bias": np.zeros(1),
                      "fc2/weight": np.ones((1, 1)), "fc2/bias": np.array([-40.0])})
    z, maps = layer.tokens_and_maps(x)
    np.testing.assert_allclose(z.data, loop_weighted_tokens(x, maps.data), rtol=0, atol=1e-12)
    np.testing.assert_allclose(z.data[0], x[0, 0] / (h * w), rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("variant", ["conv4", "mlp"])
def test_matches_weighted_sum_oracle(variant, seed):
    rng = np.random.default_rng(seed)
    layer = _randomize(TokenLearnerLayer(3, 2, variant, rng), rng)
    x = rng.standard_normal((3, 4, 3))
    z, maps = layer.tokens_and_maps(x)
    np.testing.assert_allclose(z.data, loop_weighted_tokens(x, maps.data), rtol=0, atol=1e-12)


class TestVideo:
    def test_shape(self):
        layer = TokenLearnerLayer(64, 8, "conv4", np.random.default_rng(0))
        assert learn_tokens_video(np.zeros((4, 6, 6, 64)), layer).shape == (32, 64)

    def test_frame_slices_are_per_frame_tokens(self):
        rng = np.random.default_rng(1)
        layer = TokenLearnerLayer(4, 3, "conv4", rng)
        x = rng.standard_normal((3, 4, 4, 4))
        z = learn_tokens_video(x, layer).data
        for t in range(3):
            np.testing.assert_allclose(z[3 * t:3 * t + 3], learn_tokens(x[t], layer).data, atol=1e-14)

    def test_duplicated_frame_duplicates_tokens(self):
        rng = np.random.default_rng(2)
        layer = TokenLearnerLayer(4, 2, "mlp", rng)
        frame = rng.standard_normal((4, 4, 4))
        z = learn_tokens_video(np.stack([frame, frame]), layer).data
        np.testing.assert_array_equal(z[:2], z[2:])

    def test_rank_too_low(self):
        with pytest.raises(DimensionError):
            learn_tokens_video(np.ones((4, 4, 2)), TokenLearnerLayer(2, 2))


class TestAltTokenizers:
    def test_grid_factors(self):
        assert grid_factors(4) == (2, 2)
        assert grid_factors(8) == (2, 4)
        assert grid_factors(7) == (1, 7)
        assert grid_factors(16) == (4, 4)

    def test_fixed_grid_quadrants(self):
        x = np.arange(1.0, 17.0).reshape(4, 4, 1)
        alt = AltTokenizer("fixed_grid", 1, 4)
        out = alt_tokenize(x, alt).data[:, 0]
        assert out.tolist() == [3.5, 5.5, 11.5, 13.5]
        np.testing.assert_array_equal(out, cell_means(x, 2, 2)[:, 0])

    def test_fixed_grid_constant(self):
        out = AltTokenizer("fixed_grid", 3, 8)(np.full((4, 8, 3), 2.5)).data
        assert out.shape == (8, 3)
        assert (out == 2.5).all()

    def test_fixed_grid_indivisible(self):
        with pytest.raises(ConfigError):
            AltTokenizer("fixed_grid", 1, 4)(np.ones((3, 4, 1)))
        with pytest.raises(ConfigError):
            AltTokenizer("fixed_grid", 1, 4, 3, 4)

    def test_direct_dense_bias(self):
        alt = AltTokenizer("direct_dense", 2, 3, 2, 2, np.random.default_rng(0))
        b = np.arange(6.0)
        alt.load_state({"dense/weight": np.zeros((8, 6)), "dense/bias": b})
        out = alt(np.random.default_rng(1).standard_normal((2, 2, 2))).data
        np.testing.assert_array_equal(out, b.reshape(3, 2))

    def test_pool_mlp_shape_and_invariance(self):
        rng = np.random.default_rng(3)
        alt = AltTokenizer("pool_mlp", 4, 5, rng=rng)
        x = rng.standard_normal((4, 4, 4))
        out = alt(x).data
        assert out.shape == (5, 4)
        # only the spatial mean matters
        np.testing.assert_allclose(alt(x[::-1, ::-1]).data, out, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AltTokenizer("random", 4, 4)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(2, 7), w=st.integers(2, 7), s=st.integers(1, 4), seed=st.integers(0, 10_000),
       variant=st.sampled_from(["conv4", "mlp"]))
def test_output_shape_independent_of_grid(h, w, s, seed, variant):
    rng = np.random.default_rng(seed)
    layer = TokenLearnerLayer(3, s, variant, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        z, maps = layer.tokens_and_maps(rng.standard_normal((h, w, 3)) * 4)
    assert z.shape == (s, 3)
    assert maps.shape == (h, w, s)
    assert ((maps.data > 0) & (maps.data < 1)).all()


@settings(max_examples=20, deadline=None)
@given(lam=st.floats(-10, 10), seed=st.integers(0, 10_000))
def test_linearity_with_constant_maps(lam, seed):
    rng = np.random.default_rng(seed)
    layer = _zero(TokenLearnerLayer(3, 2, "conv4"))
    x = rng.standard_normal((3, 3, 3))
    np.testing.assert_allclose(layer(lam * x).data, lam * layer(x).data, rtol=1e-14, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("variant", ["conv4", "mlp"])
def test_gradients(variant, seed):
    rng = np.random.default_rng(seed)
    layer = _randomize(TokenLearnerLayer(3, 2, variant, rng), rng)
    x = rng.standard_normal((2, 3, 4, 3))
    r = rng.standard_normal((2, 2, 3))
    errs = check_module(layer, lambda: projection_loss(layer(x), r))
    assert max(errs.values()) < 1e-6, errs


def test_pgm_round_trip(tmp_path):
    w = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 0.1]])
    write_pgm(tmp_path / "m.pgm", w)
    blob = (tmp_path / "m.pgm").read_bytes()
    assert blob.startswith(b"P5\n3 2\n255\n")
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[0, 128, 255], [64, 191, 26]]

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import check_module, loop_fuse, loop_mix, projection_loss
from tokenlearner.errors import ConfigError, ContractError, DimensionError
from tokenlearner.fuser import AltFuser, TokenFuserLayer, alt_fuse, fuse_remap, remap_weights, tokenwise_mix
from tokenlearner.layers import Module
from tokenlearner.learner import TokenLearnerLayer


class TestMix:
    def test_identity(self):
        y = np.random.default_rng(0).standard_normal((6, 3))
        np.testing.assert_array_equal(tokenwise_mix(y, np.eye(6)).data, y)

    def test_all_ones(self):
        out = tokenwise_mix(np.full((4, 2), 1.5), np.ones((4, 4))).data
        assert (out == 6.0).all()

    @pytest.mark.parametrize("seed", range(20))
    def test_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        y, m = rng.standard_normal((5, 3)), rng.standard_normal((5, 5))
        np.testing.assert_allclose(tokenwise_mix(y, m).data, loop_mix(y, m), rtol=0, atol=1e-12)

    def test_size_mismatch(self):
        with pytest.raises(DimensionError):
            tokenwise_mix(np.ones((4, 2)), np.eye(3))


def _fuser(width, tokens, frames=1, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    f = TokenFuserLayer(width, tokens, frames, rng)
    if scale is not None:
        f.load_state({k: rng.standard_normal(v.shape) * scale for k, v in f.state_dict().items()})
    return f


class TestRemap:
    def test_zero_tokens_is_residual(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 3, 4))
        np.testing.assert_array_equal(fuse_remap(np.zeros((2, 4)), x, _fuser(4, 2, scale=1.0)).data, x)

    def test_zero_beta_single_token(self):
        f = _fuser(3, 1)
        f.load_state({"beta/weight": np.zeros((3, 1))}, strict=False)
        x = np.random.default_rng(2).standard_normal((2, 2, 3))
        v = np.array([[1.0, -2.0, 4.0]])
        np.testing.assert_allclose(fuse_remap(v, x, f).data, x + 0.5 * v[0], atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_per_pixel_oracle(self, seed):
        rng = np.random.default_rng(seed)
        f = _fuser(3, 2, seed=seed, scale=1.0)
        y, x = rng.standard_normal((2, 3)), rng.standard_normal((2, 2, 3))
        expected = loop_fuse(y, x, f.state_dict()["beta/weight"], f.state_dict()["beta/bias"])
        np.testing.assert_allclose(fuse_remap(y, x, f).data, expected, rtol=0, atol=1e-12)

    def test_weights_in_unit_interval(self):
        f = _fuser(4, 3, scale=1.0)
        w = remap_weights(np.random.default_rng(3).standard_normal((5, 5, 4)) * 2, f.beta).data
        assert ((w > 0) & (w < 1)).all()

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_remap(np.ones((2, 3)), np.ones((2, 2, 4)), _fuser(4, 2))


@settings(max_examples=20, deadline=None)
@given(frames=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5), s=st.integers(1, 4),
       seed=st.integers(0, 10_000))
def test_fuser_identity_and_shape(frames, h, w, s, seed):
    rng = np.random.default_rng(seed)
    f = _fuser(3, s, frames, seed, scale=1.0)
    f.load_state({"mix": np.eye(frames * s)}, strict=False)
    x = rng.standard_normal((frames, h, w, 3))
    np.testing.assert_array_equal(f(np.zeros((frames * s, 3)), x).data, x)
    assert f(rng.standard_normal((frames * s, 3)), x).shape == x.shape


def test_mix_spans_frames_remap_is_per_frame():
    rng = np.random.default_rng(4)
    f = _fuser(2, 2, 2, scale=1.0)
    mix = np.zeros((4, 4))
    mix[0, 3] = 1.0  # token 0 of frame 0 feeds token 1 of frame 1
    f.load_state({"mix": mix}, strict=False)
    x = rng.standard_normal((2, 3, 3, 2))
    y = np.zeros((4, 2))
    y[0] = [1.0, 1.0]
    out = f(y, x).data
    np.testing.assert_array_equal(out[0], x[0])
    assert not np.allclose(out[1], x[1])


class TestAlt:
    def test_unpool_zero_maps(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 3, 2))
        out = alt_fuse(rng.standard_normal((4, 2)), x, AltFuser("unpool", 2), np.zeros((3, 3, 4)))
        np.testing.assert_array_equal(out.data, x)

    def test_unpool_one_hot(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 2, 3))
        y = rng.standard_normal((4, 3))
        maps = np.eye(4).reshape(2, 2, 4)
        out = alt_fuse(y, x, AltFuser("unpool", 3), maps).data
        np.testing.assert_allclose(out, y.reshape(2, 2, 3) + x, atol=1e-15)

    def test_unpool_without_maps(self):
        with pytest.raises(ContractError):
            alt_fuse(np.ones((2, 2)), np.ones((2, 2, 2)), AltFuser("unpool", 2))

    def test_reproject_zero_values(self):
        rng = np.random.default_rng(7)
        alt = AltFuser("reproject", 4, 2, rng)
        alt.load_state({"xattn/wv": np.zeros((4, 4)), "xattn/bo": np.zeros(4)}, strict=False)
        x = rng.standard_normal((3, 2, 4))
        np.testing.assert_array_equal(alt(rng.standard_normal((5, 4)), x).data, x)

    def test_reproject_shape(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 3, 4))
        assert AltFuser("reproject", 4, 2, rng)(rng.standard_normal((2, 5, 4)), x).shape == x.shape

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AltFuser("mean", 4)


class _Pipeline(Module):
    def __init__(self, seed):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.tl = self.add_child("tl", TokenLearnerLayer(3, 2, "conv4", rng))
        self.fu = self.add_child("fu", TokenFuserLayer(3, 2, 2, rng))
        self.load_state({k: v + rng.standard_normal(v.shape) * 0.5 for k, v in self.state_dict().items()})

    def __call__(self, x):
        y = self.tl(x)  # [T, S, C]
        return self.fu(y.reshape((4, 3)), x)


@pytest.mark.parametrize("seed", range(5))
def test_pipeline_gradients(seed):
    rng = np.random.default_rng(seed)
    pipe = _Pipeline(seed)
    x = rng.standard_normal((2, 3, 3, 3))
    r = rng.standard_normal(x.shape)
    errs = check_module(pipe, lambda: projection_loss(pipe(x), r))
    assert max(errs.values()) < 1e-6, errs


@pytest.mark.parametrize("seed", range(5))
def test_reproject_gradients(seed):
    rng = np.random.default_rng(seed)
    alt = AltFuser("reproject", 4, 2, rng)
    alt.load_state({k: v + rng.standard_normal(v.shape) * 0.5 for k, v in alt.state_dict().items()})
    y, x = rng.standard_normal((3, 4)), rng.standard_normal((2, 2, 4))
    r = rng.standard_normal(x.shape)
    errs = check_module(alt, lambda: projection_loss(alt(y, x), r))
    assert max(errs.values()) < 1e-6, errs

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from earface.errors import ConfigError, DimensionError
from earface.fusion import channel_fuse, fuse, intensity_fuse, spatial_fuse
from earface.imageops import resize_bilinear


def unit_images(h_max=24, w_max=24):
    shape = st.tuples(st.integers(1, h_max), st.integers(1, w_max), st.just(3))
    return shape.flatmap(
        lambda s: st.tuples(
            arrays(np.float32, s, elements=st.floats(0, 1, width=32)),
            arrays(np.float32, s, elements=st.floats(0, 1, width=32)),
        )
    )


def rand_img(rng, h=16, w=16):
    return rng.random((h, w, 3), dtype=np.float32)


def test_intensity_hand_values():
    a = np.full((2, 2, 3), 100 / 255, dtype=np.float32)
    b = np.full((2, 2, 3), 200 / 255, dtype=np.float32)
    np.testing.assert_allclose(intensity_fuse(a, b), 150 / 255, rtol=1e-6)
    np.testing.assert_array_equal(intensity_fuse(np.zeros((3, 3, 3), np.float32), np.ones((3, 3, 3), np.float32)), 0.5)


@settings(max_examples=60)
@given(unit_images())
def test_intensity_commutative_idempotent_bounded(pair):
    a, b = pair
    ab = intensity_fuse(a, b)
    np.testing.assert_array_equal(ab, intensity_fuse(b, a))
    np.testing.assert_array_equal(intensity_fuse(a, a), a)
    assert np.all(ab >= np.minimum(a, b)) and np.all(ab <= np.maximum(a, b))
    assert ab.shape == a.shape


def test_intensity_shape_mismatch_names_both():
    with pytest.raises(DimensionError, match=r"\(4, 4, 3\).*\(4, 5, 3\)"):
        intensity_fuse(np.zeros((4, 4, 3), np.float32), np.zeros((4, 5, 3), np.float32))


@settings(max_examples=60)
@given(unit_images())
def test_channel_slices_recover_inputs(pair):
    a, b = pair
    out = channel_fuse(a, b)
    assert out.shape == a.shape[:2] + (6,)
    np.testing.assert_array_equal(out[..., :3], a)
    np.testing.assert_array_equal(out[..., 3:], b)


def test_channel_full_size_shape():
    z = np.zeros((224, 224, 3), np.float32)
    assert channel_fuse(z, z).shape == (224, 224, 6)
    with pytest.raises(DimensionError):
        channel_fuse(z, z[:, :100])


def test_spatial_halves_are_the_resized_inputs():
    rng = np.random.default_rng(0)
    p, e = rand_img(rng, 224, 224), rand_img(rng, 224, 224)
    out = spatial_fuse(p, e, (224, 224))
    assert out.shape == (224, 224, 3)
    np.testing.assert_array_equal(out[:, :112], resize_bilinear(p, (224, 112)))
    np.testing.assert_array_equal(out[:, 112:], resize_bilinear(e, (224, 112)))


def test_spatial_constant_halves_and_identity_resize():
    zero, one = np.zeros((8, 4, 3), np.float32), np.ones((8, 4, 3), np.float32)
    out = spatial_fuse(zero, one, (8, 8))
    assert np.all(out[:, :4] == 0) and np.all(out[:, 4:] == 1)
    rng = np.random.default_rng(1)
    p, e = rand_img(rng, 8, 4), rand_img(rng, 8, 4)
    np.testing.assert_array_equal(spatial_fuse(p, e, (8, 8)), np.concatenate([p, e], axis=1))


@settings(max_examples=40, deadline=None)
@given(unit_images(), st.integers(1, 20), st.integers(1, 12))
def test_spatial_halves_isolated(pair, h, half):
    a, b = pair
    out = spatial_fuse(a, b, (h, 2 * half))
    # replacing the ear must leave the profile half untouched, and vice versa
    out_other = spatial_fuse(a, 1.0 - b, (h, 2 * half))
    np.testing.assert_array_equal(out[:, :half], out_other[:, :half])
    out_other = spatial_fuse(1.0 - a, b, (h, 2 * half))
    np.testing.assert_array_equal(out[:, half:], out_other[:, half:])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_spatial_odd_width_rejected():
    z = np.zeros((4, 4, 3), np.float32)
    with pytest.raises(ConfigError):
        spatial_fuse(z, z, (4, 5))


def test_fuse_dispatch():
    rng = np.random.default_rng(2)
    p, e = rand_img(rng), rand_img(rng)
    assert fuse("spatial", p, e).shape == p.shape
    assert fuse("channel", p, e).shape == (16, 16, 6)
    with pytest.raises(ConfigError):
        fuse("feature", p, e)

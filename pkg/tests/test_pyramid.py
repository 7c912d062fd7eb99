import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edunet.data import synth_generate
from edunet.pyramid import build_pyramid, edge_attention, gaussian_blur, gaussian_kernel1d
from edunet.tensor import Tensor


def test_kernel_normalised_and_symmetric():
    k = gaussian_kernel1d(1.0, 5)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])
    assert k.argmax() == 2


@pytest.mark.parametrize("sigma,ksize", [(0.0, 5), (1.0, 4), (1.0, 0)])
def test_kernel_rejects_bad_args(sigma, ksize):
    with pytest.raises(ValueError):
        gaussian_kernel1d(sigma, ksize)


def test_blur_of_constant_is_constant():
    out = gaussian_blur(np.full((1, 1, 9, 7), 0.4, np.float32)).data
    np.testing.assert_allclose(out, 0.4, atol=1e-7)


def test_blur_impulse_gives_separable_kernel():
    img = np.zeros((1, 1, 11, 11), np.float32)
    img[0, 0, 5, 5] = 1.0
    k = gaussian_kernel1d(1.0, 5)
    out = gaussian_blur(img).data[0, 0]
    np.testing.assert_allclose(out[3:8, 3:8], np.outer(k, k), atol=1e-7)
    assert out.sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.sampled_from([8, 16, 24]), w=st.sampled_from([8, 16, 40]))
def test_blur_plus_detail_reconstructs_input_exactly(seed, h, w):
    img = (np.random.default_rng(seed).integers(0, 256, (2, 1, h, w)) / 255.0).astype(np.float32)
    pyr = build_pyramid(img, 4)
    recon = pyr.blurred.data.astype(np.float64) + pyr.levels[0].data
    assert np.array_equal(recon.astype(np.float32), img)


@pytest.mark.parametrize("value", [0.0, 0.5, 1.0])
def test_constant_image_has_zero_pyramid(value):
    pyr = build_pyramid(np.full((1, 1, 32, 32), value, np.float32), 4)
    for lvl in pyr.levels:
        assert np.abs(lvl.data).max() < 1e-7


def test_step_edge_responds_only_near_edge():
    img = np.zeros((1, 1, 16, 16), np.float32)
    img[..., 8:] = 1.0
    lvl = build_pyramid(img, 1).levels[0].data[0, 0]
    cols = np.abs(lvl).max(axis=0)
    assert cols[6:10].min() > 0.05
    assert cols[:5].max() < 1e-7 and cols[12:].max() < 1e-7
    assert lvl[:, 7].max() < 0 < lvl[:, 8].min()


def test_level_extents_halve():
    pyr = build_pyramid(np.zeros((1, 1, 64, 48), np.float32), 4)
    assert [lvl.shape[2:] for lvl in pyr.levels] == [(64, 48), (32, 24), (16, 12), (8, 6)]
    assert len(pyr) == 4


@pytest.mark.parametrize(
    "shape,levels", [((1, 1, 8, 8), 0), ((1, 3, 8, 8), 2), ((8, 8), 2), ((1, 1, 4, 4), 4)]
)
def test_invalid_inputs(shape, levels):
    with pytest.raises(ValueError):
        build_pyramid(np.zeros(shape, np.float32), levels)


def test_synthetic_images_have_small_mean_detail():
    imgs = np.stack([s.image for s in synth_generate(4, 64, 0)])[:, None]
    lvl = build_pyramid(imgs, 4).levels[0].data
    assert abs(lvl.mean()) < 0.02
    assert np.abs(lvl).max() > 0.05


def test_edge_attention_resizes():
    pyr = build_pyramid(np.random.default_rng(0).random((1, 1, 32, 32), np.float32), 2)
    assert edge_attention(pyr.level(1), 8, 8).shape == (1, 1, 8, 8)
    assert pyr.level(0) is pyr.level(0)
    assert isinstance(pyr.level(0, np.float64), Tensor)


def test_edge_attention_identity_and_zero():
    lvl = Tensor(np.random.default_rng(0).random((1, 1, 8, 8)))
    np.testing.assert_array_equal(edge_attention(lvl, 8, 8).data, lvl.data)
    assert not edge_attention(Tensor(np.zeros((1, 1, 4, 4))), 8, 8).data.any()

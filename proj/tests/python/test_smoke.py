import numpy as np
import pytest

import fel


def test_enhance_preserves_shape():
    img = np.random.default_rng(0).uniform(0.0, 1.0, size=(3, 32, 32))
    enh = fel.Enhancer(seed=3)
    out = enh.enhance(img)
    assert out.shape == (3, 32, 32)
    assert np.isfinite(out).all()


def test_enhance_is_deterministic_for_a_seed():
    img = np.random.default_rng(1).uniform(0.0, 1.0, size=(3, 16, 16))
    a = fel.Enhancer(seed=7, channels=8, blocks=2).enhance(img)
    b = fel.Enhancer(seed=7, channels=8, blocks=2).enhance(img)
    assert np.array_equal(a, b)


def test_feature_output_when_projection_disabled():
    img = np.random.default_rng(2).uniform(0.0, 1.0, size=(3, 16, 16))
    enh = fel.Enhancer(seed=1, channels=8, blocks=2, projection="none")
    out = enh.enhance(img)
    assert out.shape == (8, 16, 16)


def test_param_count_default_config():
    assert fel.param_count() == 153264
    assert fel.Enhancer(seed=1).param_count == 153264


def test_indivisible_input_is_rejected():
    img = np.zeros((3, 30, 30))
    with pytest.raises(ValueError):
        fel.Enhancer(seed=1).enhance(img)


def test_bad_config_is_rejected():
    with pytest.raises(ValueError):
        fel.Enhancer(channels=10, blocks=3)  # width not divisible by blocks


def test_render_and_darken():
    bright = fel.render_shape(label=2, size=24, seed=9)
    assert bright.shape == (3, 24, 24)
    dark = fel.darken(bright, gamma=4.0, brightness=0.1, noise_sigma=0.0,
                      noise_seed=1)
    assert dark.max() <= bright.max() + 1e-12
    assert len(fel.class_names()) == 4


def test_gradcheck_tiny_config():
    report = fel.gradcheck(size=8, seed=5, tol=1e-4, channels=4, blocks=2,
                           scale_pair=(2, 4))
    assert report["pass"], report
    assert report["worst_err"] < 1e-4

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbdmp.corruption import (
    CorruptionConfig,
    bezier_lut,
    compose_with_log,
    local_pixel_shuffle,
    nonlinear_transform,
    paint,
    random_compose,
    rescale_unit,
)

CFG = CorruptionConfig(shuffle_window_max=(4, 4, 4), shuffle_repeats=50)


def _patch(seed, shape=(8, 12, 10)):
    return np.random.default_rng(seed).random(shape).astype(np.float32)


def test_diagonal_control_points_give_identity():
    x = _patch(0)
    out = nonlinear_transform(x, np.random.default_rng(0), control_points=((1 / 3, 1 / 3), (2 / 3, 2 / 3)), increasing=True)
    # LUT quantisation over 1024 bins
    np.testing.assert_allclose(out, x, atol=1.0 / 1023)


def test_zero_patch_increasing_stays_zero():
    out = nonlinear_transform(np.zeros((4, 4, 4)), np.random.default_rng(0), increasing=True)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(p=st.lists(st.floats(0, 1), min_size=4, max_size=4), inc=st.booleans())
def test_bezier_lut_monotone_and_bounded(p, inc):
    lut = bezier_lut(p[:2], p[2:], increasing=inc)
    assert lut.min() >= 0 and lut.max() <= 1
    d = np.diff(lut)
    assert np.all(d >= -1e-12) if inc else np.all(d <= 1e-12)


def test_nonlinear_is_voxelwise():
    x = np.repeat(_patch(1, (4, 4, 1)), 3, axis=2)
    out = nonlinear_transform(x, np.random.default_rng(5))
    np.testing.assert_array_equal(out[..., 0], out[..., 1])
    np.testing.assert_array_equal(out[..., 0], out[..., 2])


def test_nonlinear_rejects_out_of_range():
    with pytest.raises(ValueError):
        nonlinear_transform(np.full((2, 2, 2), 1.1), np.random.default_rng(0))
    # tolerance admits rounding noise
    nonlinear_transform(np.full((2, 2, 2), 1.0 + 1e-7), np.random.default_rng(0))


def test_shuffle_examples():
    x = _patch(2)
    zero = CorruptionConfig(shuffle_window_max=(4, 4, 4), shuffle_repeats=0)
    np.testing.assert_array_equal(local_pixel_shuffle(x, np.random.default_rng(0), zero), x)
    c = np.full((8, 8, 8), 0.25)
    np.testing.assert_array_equal(local_pixel_shuffle(c, np.random.default_rng(0), CFG), c)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_shuffle_preserves_multiset(seed):
    x = _patch(seed)
    out = local_pixel_shuffle(x, np.random.default_rng(seed), CFG)
    np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(x.ravel()))
    assert not np.array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), mode=st.sampled_from(["in", "out"]))
def test_paint_locality(seed, mode):
    x = _patch(seed)
    out, info = paint(x, np.random.default_rng(seed), CFG, mode)
    inside = np.zeros(x.shape, bool)
    for sl in info["blocks"]:
        inside[sl] = True
    untouched = ~inside if mode == "in" else inside
    np.testing.assert_array_equal(out[untouched], x[untouched])
    assert info["modified_fraction"] == pytest.approx((~untouched).mean())
    assert out.min() >= 0 and out.max() <= 1


def test_paint_identity_cases():
    x = _patch(3)
    none = CorruptionConfig(paint_block_count_range=(0, 0))
    out, info = paint(x, np.random.default_rng(0), none, "in")
    np.testing.assert_array_equal(out, x)
    assert info["modified_fraction"] == 0
    whole = CorruptionConfig(outpaint_block_count_range=(1, 1), outpaint_block_size_range=((1.0, 1.0),) * 3)
    out, _ = paint(x, np.random.default_rng(0), whole, "out")
    np.testing.assert_array_equal(out, x)


def test_compose_zero_probabilities_is_identity():
    cfg = CorruptionConfig(p_nonlinear=0, p_shuffle=0, p_paint=0)
    x = _patch(4)
    out, clean = random_compose(x, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out, x)
    np.testing.assert_array_equal(clean, x)


def test_compose_paint_mutually_exclusive():
    cfg = CorruptionConfig(shuffle_window_max=(4, 4, 4), shuffle_repeats=5, p_paint=1.0)
    seen = set()
    for seed in range(200):
        _, _, applied = compose_with_log(_patch(seed, (8, 8, 8)), np.random.default_rng(seed), cfg)
        painted = [a for a in applied if a.endswith("paint")]
        assert len(painted) == 1
        seen.add(painted[0])
    assert seen == {"inpaint", "outpaint"}


def test_compose_deterministic_and_clean_target():
    x = _patch(5)
    a, ca = random_compose(x, np.random.default_rng(9), CFG)
    b, cb = random_compose(x, np.random.default_rng(9), CFG)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ca, x)
    assert a.min() >= 0 and a.max() <= 1


def test_config_validation():
    with pytest.raises(ValueError):
        CorruptionConfig(p_shuffle=1.5)
    with pytest.raises(ValueError):
        CorruptionConfig(shuffle_window_max=(8, 8, 4)).check_patch((16, 16, 4))


def test_rescale_unit():
    x = np.array([[[-3.0, 1.0, 5.0]]])
    np.testing.assert_allclose(rescale_unit(x), [[[0, 0.5, 1]]])
    assert not rescale_unit(np.full((2, 2, 2), 4.0)).any()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from objcomposer.attnmask import (average_attention, average_records, binarize, iou, make_masks,
                                  otsu_threshold, resample_bilinear, resample_nearest, select_tokens)
from objcomposer.compose import ObjectSpec
from objcomposer.denoise import AttentionCenter, Conditioning, PatternDenoiser, SyntheticAttentionDenoiser
from objcomposer.errors import DegenerateHistogramError, PipelineError
from objcomposer.invert import AttentionRecord
from objcomposer.schedule import make_linear_schedule
from objcomposer.text import tokenize
from oracles import brute_iou, otsu_exhaustive

PROMPT = "a dog with a teapot on the beach"
TOKENS = tokenize(PROMPT)


def record_from(maps_per_step, tokens=("dog",)):
    return AttentionRecord(list(tokens), np.stack([np.stack(m) for m in maps_per_step]))


def synthetic_record(centers, grid=(16, 16), noise=0.1, seed=0, steps=10):
    s = make_linear_schedule(1000, 1e-4, 0.02, steps)
    inner = PatternDenoiser(np.zeros((1, 4, 4)), 0.1, s)
    d = SyntheticAttentionDenoiser(inner, centers, grid, noise=noise, seed=seed)
    cond = Conditioning.background(PROMPT)
    maps = [d.predict(np.zeros((1, 4, 4)), t, cond).attention for t in s.inference_steps]
    return AttentionRecord(TOKENS, np.stack(maps), list(s.inference_steps))


# -- average_attention ---------------------------------------------------------

def test_average_identical_steps(rng):
    a = rng.uniform(0, 1, (5, 6))
    rec = record_from([[a]] * 4)
    np.testing.assert_allclose(average_attention(rec, [0]), a / a.max(), rtol=1e-15)


def test_average_scale_invariant_per_step(rng):
    a = rng.uniform(0, 1, (5, 6))
    rec = record_from([[a], [3 * a]])
    np.testing.assert_allclose(average_attention(rec, [0]), a / a.max(), rtol=1e-15)


def test_average_over_tokens(rng):
    a, b = rng.uniform(0, 1, (2, 4, 4))
    rec = record_from([[a, b]], tokens=("x", "y"))
    np.testing.assert_allclose(average_attention(rec, [0, 1]), (a / a.max() + b / b.max()) / 2, rtol=1e-14)


def test_average_permutation_invariant(rng):
    maps = rng.uniform(0, 1, (7, 2, 5, 5))
    rec = AttentionRecord(["x", "y"], maps)
    ref = average_attention(rec, [0, 1])
    for _ in range(5):
        perm = AttentionRecord(["x", "y"], maps[rng.permutation(7)])
        np.testing.assert_array_equal(average_attention(perm, [0, 1]), ref)


def test_average_zero_map_stays_zero():
    rec = record_from([[np.zeros((3, 3))]])
    np.testing.assert_array_equal(average_attention(rec, [0]), np.zeros((3, 3)))


def test_average_errors(rng):
    with pytest.raises(ValueError, match="empty"):
        average_attention(AttentionRecord.empty(["x"]), [0])
    rec = record_from([[rng.uniform(size=(3, 3))]])
    with pytest.raises(ValueError):
        average_attention(rec, [])
    with pytest.raises(ValueError):
        average_attention(rec, [1])


def test_average_synthetic_center():
    rec = synthetic_record([AttentionCenter(1, 5, 10, 2.0)])
    heat = average_attention(rec, [1])
    peak = np.unravel_index(heat.argmax(), heat.shape)
    assert abs(peak[0] - 5) <= 1 and abs(peak[1] - 10) <= 1


def test_average_records_multi_layer(rng):
    a = rng.uniform(0, 1, (4, 4))
    r1 = record_from([[a]])
    r2 = record_from([[resample_bilinear(a, 7, 7)]])
    out = average_records([r1, r2], [0], 7, 7)
    assert out.shape == (7, 7)
    np.testing.assert_allclose(out, resample_bilinear(a / a.max(), 7, 7), atol=1e-12)


# -- select_tokens -------------------------------------------------------------

def test_select_tokens_examples():
    assert select_tokens(TOKENS, "a dog") == [1]
    assert select_tokens(TOKENS, "a teapot") == [4]
    assert select_tokens(TOKENS, "The Beach") == [7]
    assert select_tokens(tokenize("a red ball near a red ball"), "red ball") == [1, 2]
    with pytest.raises(ValueError, match="class phrase absent from prompt"):
        select_tokens(TOKENS, "a cat")
    with pytest.raises(ValueError):
        select_tokens(TOKENS, "the")


# -- resampling ----------------------------------------------------------------

def test_resample_constant():
    np.testing.assert_allclose(resample_bilinear(np.full((3, 5), 2.5), 7, 4), np.full((7, 4), 2.5), rtol=1e-15)


def test_resample_midpoint():
    h = np.array([[1.0, 2.0], [4.0, 9.0]])
    out = resample_bilinear(h, 3, 3)
    assert out[1, 1] == pytest.approx(4.0)
    np.testing.assert_array_equal(out[[0, 0, 2, 2], [0, 2, 0, 2]], [1.0, 2.0, 4.0, 9.0])


def test_resample_bump_argmax():
    yy, xx = np.mgrid[:8, :8]
    h = np.exp(-((yy - 2) ** 2 + (xx - 5) ** 2) / 4.0)
    out = resample_bilinear(h, 16, 16)
    py, px = np.unravel_index(out.argmax(), out.shape)
    assert abs(py - 4) <= 1 and abs(px - 10) <= 1


def test_resample_bilinear_matches_direct_evaluation(rng):
    h = rng.uniform(size=(4, 6))
    out = resample_bilinear(h, 5, 9)
    for i in range(5):
        for j in range(9):
            y, x = i * 3 / 4, j * 5 / 8
            y0, x0 = min(int(y), 2), min(int(x), 4)
            fy, fx = y - y0, x - x0
            ref = (h[y0, x0] * (1 - fy) * (1 - fx) + h[y0, x0 + 1] * (1 - fy) * fx
                   + h[y0 + 1, x0] * fy * (1 - fx) + h[y0 + 1, x0 + 1] * fy * fx)
            assert out[i, j] == pytest.approx(ref, abs=1e-14)


def test_resample_errors():
    with pytest.raises(ValueError):
        resample_bilinear(np.ones((2, 2)), 0, 3)


def test_resample_nearest_keeps_binary():
    m = np.zeros((4, 4), np.uint8)
    m[:, :2] = 1
    out = resample_nearest(m, 8, 8)
    assert out.shape == (8, 8) and set(np.unique(out)) == {0, 1}
    assert out[:, :4].all() and not out[:, 4:].any()


# -- Otsu ----------------------------------------------------------------------

def test_otsu_two_spikes():
    v = np.array([1, 1, 1, 9, 9, 9], dtype=float).reshape(2, 3)
    assert otsu_exhaustive(v, 8) == 2.0
    assert otsu_threshold(v, 8) == 2.0


def test_otsu_half_and_half():
    v = np.array([[0.0, 0.0], [1.0, 1.0]])
    th = otsu_threshold(v, 2)
    assert th == 0.5
    np.testing.assert_array_equal(binarize(v, th), [[0, 0], [1, 1]])


def test_otsu_degenerate():
    with pytest.raises(DegenerateHistogramError, match="degenerate histogram"):
        otsu_threshold(np.full((4, 4), 0.3), 16)
    with pytest.raises(ValueError):
        otsu_threshold(np.arange(4.0), 1)


@pytest.mark.parametrize("bins", [2, 7, 64, 256])
def test_otsu_matches_exhaustive_random(rng, bins):
    for _ in range(50):
        h = rng.gamma(rng.uniform(0.3, 3), size=(rng.integers(2, 20), rng.integers(2, 20)))
        assert otsu_threshold(h, bins) == otsu_exhaustive(h, bins)


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
              elements=st.floats(0, 100, allow_nan=False)),
       st.integers(2, 64))
@settings(max_examples=100, deadline=None)
def test_otsu_matches_exhaustive_property(h, bins):
    if h.min() == h.max():
        return
    assert otsu_threshold(h, bins) == otsu_exhaustive(h, bins)


@pytest.mark.parametrize("a,b", [(2.0, 0.0), (0.5, 3.0), (1000.0, -7.0), (4.0, 0.25)])
def test_otsu_mask_affine_invariant(rng, a, b):
    for _ in range(30):
        h = rng.uniform(size=(12, 12)) ** 2
        m = binarize(h, otsu_threshold(h, 256))
        h2 = a * h + b
        np.testing.assert_array_equal(binarize(h2, otsu_threshold(h2, 256)), m)


# -- binarize / IoU ------------------------------------------------------------

def test_binarize_bounds(rng):
    h = rng.uniform(size=(5, 5))
    assert binarize(h, h.min() - 1).all()
    assert not binarize(h, h.max()).any()
    assert binarize(h, 0.5).dtype == np.uint8


def test_iou_matches_brute(rng):
    a, b = rng.uniform(size=(2, 9, 9)) > 0.5
    assert iou(a, b) == pytest.approx(brute_iou(a, b))


# -- make_masks ----------------------------------------------------------------

def obj(phrase, mask=None, den="o"):
    return ObjectSpec(np.zeros(8), phrase, den, mask)


def test_make_masks_user_passthrough():
    m1 = np.zeros((8, 8), np.uint8)
    m1[:4] = 1
    m2 = np.zeros((4, 4), np.uint8)
    m2[:, 2:] = 1
    masks = make_masks(None, [obj("a dog", m1, "a"), obj("a teapot", m2, "b")], PROMPT, 8, 8)
    np.testing.assert_array_equal(masks[0], m1)
    np.testing.assert_array_equal(masks[1], resample_nearest(m2, 8, 8))


def test_make_masks_opposite_corners_disjoint():
    rec = synthetic_record([AttentionCenter(1, 3, 3, 2.0), AttentionCenter(4, 12, 12, 2.0)])
    heat = []
    masks = make_masks(rec, [obj("a dog", den="a"), obj("a teapot", den="b")], PROMPT, 32, 32, heatmaps=heat)
    assert [m.shape for m in masks] == [(32, 32), (32, 32)]
    assert not np.logical_and(*masks).any()
    assert masks[0].any() and masks[1].any()
    assert len(heat) == 2 and heat[0].shape == (32, 32)


def test_make_masks_constant_attention_names_object():
    rec = AttentionRecord(TOKENS, np.ones((3, len(TOKENS), 4, 4)))
    with pytest.raises(PipelineError, match="object 0.*degenerate histogram"):
        make_masks(rec, [obj("a dog")], PROMPT, 8, 8)


def test_make_masks_missing_phrase_and_source():
    rec = synthetic_record([AttentionCenter(1, 3, 3, 2.0)])
    with pytest.raises(PipelineError, match="object 0.*absent"):
        make_masks(rec, [obj("a cat")], PROMPT, 8, 8)
    with pytest.raises(PipelineError, match="no attention"):
        make_masks(None, [obj("a dog")], PROMPT, 8, 8)


@given(st.integers(2, 40), st.integers(2, 40))
@settings(max_examples=25, deadline=None)
def test_make_masks_shape(h, w):
    rec = synthetic_record([AttentionCenter(1, 5, 5, 2.0)], steps=2)
    user = np.ones((3, 5), np.uint8)
    masks = make_masks(rec, [obj("dog", den="a"), obj("beach", user, den="b")], PROMPT, h, w, bins=32)
    assert all(m.shape == (h, w) for m in masks)

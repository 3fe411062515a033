"""Randomized invariants checked with hypothesis."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mucan import cncam, tmcam
from mucan import tensor_core as tc
from mucan.tensor_core import WeightStore

finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 3), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))
def test_pixel_shuffle_round_trip(seed, c, r, h, w):
    x = np.random.default_rng(seed).standard_normal((c * r * r, h, w))
    y = tc.pixel_shuffle(x, r)
    assert y.shape == (c, h * r, w * r)
    np.testing.assert_array_equal(tc.space_to_depth(y, r), x)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8)), elements=finite))
def test_bilinear_preserves_range(x):
    y = tc.bilinear_upsample2(x)
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite), arrays(np.float64, st.integers(1, 12), elements=finite),
       st.floats(0.01, 100))
def test_correlate_bounded_and_scale_invariant(a, b, alpha):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    c = tmcam.correlate(a, b)
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12
    assert abs(tmcam.correlate(alpha * a, b) - c) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 10), st.integers(4, 10), st.sampled_from([1, 2, 3]),
       st.sampled_from([1, 2, 4]))
def test_top_k_volume_agrees_with_point_search(seed, h, w, d, k):
    rng = np.random.default_rng(seed)
    ref, nbr = rng.standard_normal((2, 3, h, w))
    _, offsets, scores = tmcam.top_k_all(ref, nbr, 3, d, k)
    p = (int(rng.integers(h)), int(rng.integers(w)))
    cs = tmcam.top_k_search(ref, nbr, p, 3, d, k)
    np.testing.assert_array_equal(offsets[p][:len(cs)], cs.offsets)
    assert np.all(np.diff(scores[p]) <= 1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 9), st.integers(2, 9))
def test_nn_search_agrees_with_naive(seed, h, w):
    pyr = cncam.build_pyramid(np.random.default_rng(seed).standard_normal((3, h, w)))
    for a, b in zip(cncam.nn_search(pyr)[0], cncam.nn_search_naive(pyr)[0]):
        np.testing.assert_array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(st.characters(codec="utf-8"), min_size=1, max_size=12),
                       arrays(np.float32, st.lists(st.integers(1, 4), max_size=3).map(tuple),
                              elements=st.floats(-1e6, 1e6, width=32)),
                       max_size=5))
def test_weight_store_round_trip(tensors):
    store = WeightStore(tensors)
    back = WeightStore.from_bytes(store.to_bytes())
    assert list(back) == list(store)
    for k in store:
        np.testing.assert_array_equal(back[k], store[k])

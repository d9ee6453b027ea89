"""Binary convolution: reference oracle, packed equivalence, range law."""

import numpy as np
import pytest

from ditherbnn.bitconv import (BinaryKernel, conv_naive, conv_packed,
                               conv_packed_fallback, conv_range)
from ditherbnn.planes import pack


def rand_plane(rng, h, w):
    return rng.choice([-1, 1], size=(h, w)).astype(np.int32)


def test_conv_range_values():
    assert conv_range(1) == [-1, 1]
    assert conv_range(2) == [-4, -2, 0, 2, 4]
    assert conv_range(3) == [-9, -7, -5, -3, -1, 1, 3, 5, 7, 9]
    with pytest.raises(ValueError):
        conv_range(0)


def test_all_ones_kernel_counts_window_sum():
    x = np.array([[1, 1, -1], [1, -1, -1], [-1, -1, -1]], dtype=np.int32)
    kern = BinaryKernel.from_array(np.ones((2, 2), dtype=np.int32))
    out = conv_naive(pack(x), kern).values
    # window sums of the +/-1 entries
    expected = np.array([[2, -2], [-2, -4]])
    np.testing.assert_array_equal(out, expected)


def test_matched_kernel_hits_maximum():
    rng = np.random.default_rng(0)
    v = rand_plane(rng, 3, 3)
    kern = BinaryKernel.from_array(v)
    out = conv_packed(pack(v), kern).values
    assert out.shape == (1, 1)
    assert out[0, 0] == 9


def test_negated_input_negates_output():
    rng = np.random.default_rng(1)
    v = rand_plane(rng, 10, 12)
    kern = BinaryKernel.from_array(rand_plane(rng, 3, 3))
    a = conv_packed(pack(v), kern).values
    b = conv_packed(pack(-v), kern).values
    np.testing.assert_array_equal(a, -b)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_packed_matches_naive(k):
    rng = np.random.default_rng(10 + k)
    for _ in range(8):
        h = int(rng.integers(k, 70))
        w = int(rng.integers(k, 70))
        x = pack(rand_plane(rng, h, w))
        kern = BinaryKernel.from_array(rand_plane(rng, k, k))
        ref = conv_naive(x, kern).values
        np.testing.assert_array_equal(conv_packed(x, kern).values, ref)
        np.testing.assert_array_equal(conv_packed_fallback(x, kern).values, ref)


def test_word_boundary_widths():
    # widths straddling the 64-bit word edges exercise the two-word fetch
    rng = np.random.default_rng(2)
    kern = BinaryKernel.from_array(rand_plane(rng, 3, 3))
    for w in (63, 64, 65, 66, 127, 128, 129):
        x = pack(rand_plane(rng, 4, w))
        np.testing.assert_array_equal(conv_packed(x, kern).values,
                                      conv_naive(x, kern).values)


def test_outputs_stay_in_range():
    rng = np.random.default_rng(3)
    k = 3
    allowed = set(conv_range(k))
    x = pack(rand_plane(rng, 20, 20))
    kern = BinaryKernel.from_array(rand_plane(rng, k, k))
    out = conv_packed(x, kern).values
    assert set(np.unique(out)).issubset(allowed)


def test_rejects_small_input():
    kern = BinaryKernel.from_array(np.ones((3, 3), dtype=np.int32))
    x = pack(np.ones((2, 5), dtype=np.int32))
    with pytest.raises(ValueError):
        conv_packed(x, kern)


def test_kernel_must_be_square():
    with pytest.raises(ValueError):
        BinaryKernel.from_array(np.ones((2, 3), dtype=np.int32))

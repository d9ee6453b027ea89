# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: XNOR-popcount convolution over bit-packed planes
and the float32 im2col / col2im / max-pool loops of the trainer."""

import numpy as np

cimport numpy as cnp

cdef extern from *:
    int __builtin_popcountll(unsigned long long) nogil


def conv_packed_words(const cnp.uint64_t[:, ::1] words, int h, int w,
                      const cnp.uint64_t[::1] krows, int k):
    """XNOR-popcount convolution of a packed plane with packed kernel rows.

    words: (h, words_per_row) packed input rows.
    krows: k entries, kernel row r packed into the low k bits.
    Returns an int32 (h-k+1, w-k+1) array of {-1,+1} dot products.
    """
    cdef int H = h - k + 1
    cdef int W = w - k + 1
    cdef unsigned long long mask
    if k == 64:
        mask = <unsigned long long> 0xFFFFFFFFFFFFFFFFULL
    else:
        mask = (<unsigned long long> 1 << k) - 1
    out_arr = np.empty((H, W), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] out = out_arr
    cdef int i, j, r, wi, off, acc
    cdef int kk = k * k
    cdef unsigned long long f, x
    with nogil:
        for i in range(H):
            for j in range(W):
                wi = j >> 6
                off = j & 63
                acc = 0
                for r in range(k):
                    f = words[i + r, wi] >> off
                    if off + k > 64:
                        f |= words[i + r, wi + 1] << (64 - off)
                    f &= mask
                    x = (~(f ^ krows[r])) & mask
                    acc += __builtin_popcountll(x)
                out[i, j] = 2 * acc - kk
    return out_arr


def im2col_f32(const float[:, :, :, ::1] x, int k, float pad_value):
    """(C, B, H, W) -> (C*k*k, B*H*W) patch matrix with same-size padding."""
    cdef int c = x.shape[0], b = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int p = k // 2
    out_arr = np.empty((c * k * k, b * h * w), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef int bi, ci, di, dj, i, j, row, col0, src_i, src_j
    cdef float v
    with nogil:
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    row = (ci * k + di) * k + dj
                    for bi in range(b):
                        for i in range(h):
                            src_i = i + di - p
                            col0 = (bi * h + i) * w
                            if src_i < 0 or src_i >= h:
                                for j in range(w):
                                    out[row, col0 + j] = pad_value
                                continue
                            for j in range(w):
                                src_j = j + dj - p
                                if src_j < 0 or src_j >= w:
                                    v = pad_value
                                else:
                                    v = x[ci, bi, src_i, src_j]
                                out[row, col0 + j] = v
    return out_arr


def col2im_f32(const float[:, ::1] dcols, int c, int b, int h, int w, int k):
    """Adjoint of im2col_f32: scatter-add patch gradients back to (C, B, H, W)."""
    cdef int p = k // 2
    out_arr = np.zeros((c, b, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef int bi, ci, di, dj, i, j, row, col0, src_i, src_j
    with nogil:
        for ci in range(c):
            for di in range(k):
                for dj in range(k):
                    row = (ci * k + di) * k + dj
                    for bi in range(b):
                        for i in range(h):
                            src_i = i + di - p
                            if src_i < 0 or src_i >= h:
                                continue
                            col0 = (bi * h + i) * w
                            for j in range(w):
                                src_j = j + dj - p
                                if 0 <= src_j < w:
                                    out[ci, bi, src_i, src_j] += dcols[row, col0 + j]
    return out_arr


def maxpool2_fwd_f32(const float[:, :, :, ::1] x):
    """2x2 max pool; returns (out, argmax) with argmax in 0..3 (row-major)."""
    cdef int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = h // 2, wo = w // 2
    out_arr = np.empty((b, c, ho, wo), dtype=np.float32)
    idx_arr = np.empty((b, c, ho, wo), dtype=np.uint8)
    cdef float[:, :, :, ::1] out = out_arr
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef int bi, ci, i, j
    cdef float v00, v01, v10, v11, best
    cdef unsigned char which
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        v00 = x[bi, ci, 2 * i, 2 * j]
                        v01 = x[bi, ci, 2 * i, 2 * j + 1]
                        v10 = x[bi, ci, 2 * i + 1, 2 * j]
                        v11 = x[bi, ci, 2 * i + 1, 2 * j + 1]
                        best = v00
                        which = 0
                        if v01 > best:
                            best = v01; which = 1
                        if v10 > best:
                            best = v10; which = 2
                        if v11 > best:
                            best = v11; which = 3
                        out[bi, ci, i, j] = best
                        idx[bi, ci, i, j] = which
    return out_arr, idx_arr


def maxpool2_bwd_f32(const float[:, :, :, ::1] g,
                     const unsigned char[:, :, :, ::1] idx, int h, int w):
    cdef int b = g.shape[0], c = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    out_arr = np.zeros((b, c, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef int bi, ci, i, j
    cdef unsigned char which
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for i in range(ho):
                    for j in range(wo):
                        which = idx[bi, ci, i, j]
                        out[bi, ci, 2 * i + (which >> 1), 2 * j + (which & 1)] = g[bi, ci, i, j]
    return out_arr

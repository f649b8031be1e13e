# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled 3D convolution kernels (forward, input/weight gradients).

Direct-loop cross-correlation over pre-padded inputs; the inner loop runs
along the contiguous fastest axis so the compiler can vectorize it. Float32
and float64 variants come from the fused type.
"""

from cython.parallel import prange

ctypedef fused real_t:
    float
    double


def conv3d_forward(real_t[:, :, :, :, ::1] xp,
                   real_t[:, :, :, :, ::1] w,
                   real_t[::1] b,
                   Py_ssize_t stride,
                   real_t[:, :, :, :, ::1] out):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t OD = out.shape[2], OH = out.shape[3], OW = out.shape[4]
    cdef Py_ssize_t nk, n, k, c, od, oh, ow, zd, zh, zw, ib, ih
    cdef real_t wv

    with nogil:
        for nk in prange(N * K, schedule="static"):
            n = nk // K
            k = nk % K
            for od in range(OD):
                for oh in range(OH):
                    for ow in range(OW):
                        out[n, k, od, oh, ow] = b[k]
                    for c in range(C):
                        for zd in range(KD):
                            ib = od * stride + zd
                            for zh in range(KH):
                                ih = oh * stride + zh
                                for zw in range(KW):
                                    wv = w[k, c, zd, zh, zw]
                                    for ow in range(OW):
                                        out[n, k, od, oh, ow] = out[n, k, od, oh, ow] + wv * xp[n, c, ib, ih, ow * stride + zw]


def conv3d_input_grad(real_t[:, :, :, :, ::1] grad_out,
                      real_t[:, :, :, :, ::1] w,
                      Py_ssize_t stride,
                      real_t[:, :, :, :, ::1] gxp):
    cdef Py_ssize_t N = gxp.shape[0], C = gxp.shape[1]
    cdef Py_ssize_t K = w.shape[0]
    cdef Py_ssize_t KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t OD = grad_out.shape[2], OH = grad_out.shape[3], OW = grad_out.shape[4]
    cdef Py_ssize_t n, k, c, od, oh, ow, zd, zh, zw, ib, ih
    cdef real_t wv

    with nogil:
        for n in prange(N, schedule="static"):
            for k in range(K):
                for c in range(C):
                    for zd in range(KD):
                        for zh in range(KH):
                            for zw in range(KW):
                                wv = w[k, c, zd, zh, zw]
                                for od in range(OD):
                                    ib = od * stride + zd
                                    for oh in range(OH):
                                        ih = oh * stride + zh
                                        for ow in range(OW):
                                            gxp[n, c, ib, ih, ow * stride + zw] = gxp[n, c, ib, ih, ow * stride + zw] + wv * grad_out[n, k, od, oh, ow]


def conv3d_weight_grad(real_t[:, :, :, :, ::1] grad_out,
                       real_t[:, :, :, :, ::1] xp,
                       Py_ssize_t stride,
                       real_t[:, :, :, :, ::1] gw):
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t K = gw.shape[0]
    cdef Py_ssize_t KD = gw.shape[2], KH = gw.shape[3], KW = gw.shape[4]
    cdef Py_ssize_t OD = grad_out.shape[2], OH = grad_out.shape[3], OW = grad_out.shape[4]
    cdef Py_ssize_t n, k, c, od, oh, ow, zd, zh, zw, ib, ih
    cdef real_t acc

    with nogil:
        for k in prange(K, schedule="static"):
            for n in range(N):
                for c in range(C):
                    for zd in range(KD):
                        for zh in range(KH):
                            for zw in range(KW):
                                acc = 0
                                for od in range(OD):
                                    ib = od * stride + zd
                                    for oh in range(OH):
                                        ih = oh * stride + zh
                                        for ow in range(OW):
                                            acc = acc + grad_out[n, k, od, oh, ow] * xp[n, c, ib, ih, ow * stride + zw]
                                gw[k, c, zd, zh, zw] += acc

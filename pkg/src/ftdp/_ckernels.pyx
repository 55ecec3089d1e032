# cython: boundscheck=False, wraparound=False, nonecheck=False
"""Hot data-plane kernels: accumulate received chunk bytes into a float32
view and copy chunk bytes over a view. Semantics are bit-identical to the
numpy fallback (same IEEE single adds, elementwise, in order)."""

from libc.string cimport memcpy


def accumulate(float[::1] dst, const unsigned char[::1] src):
    """dst[i] += src_as_f32[i] for the full length of dst."""
    cdef Py_ssize_t n = dst.shape[0]
    if src.shape[0] != n * 4:
        raise ValueError("accumulate: src byte length does not match dst")
    cdef const float* s = <const float*> &src[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            dst[i] += s[i]


def copy_into(float[::1] dst, const unsigned char[::1] src):
    """dst[:] = src interpreted as float32."""
    cdef Py_ssize_t n = dst.shape[0]
    if src.shape[0] != n * 4:
        raise ValueError("copy_into: src byte length does not match dst")
    with nogil:
        memcpy(&dst[0], &src[0], n * 4)

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: exact truncated-normal sums and even-odd containment."""
import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport sqrt, log, exp
from libc.stdint cimport int64_t
from numpy.random cimport bitgen_t

cnp.import_array()


cdef struct _NormalState:
    bitgen_t *bg
    int has_spare
    double spare


cdef inline double _std_normal(_NormalState *st) noexcept nogil:
    cdef double u, v, s, f
    if st.has_spare:
        st.has_spare = 0
        return st.spare
    while True:
        u = 2.0 * st.bg.next_double(st.bg.state) - 1.0
        v = 2.0 * st.bg.next_double(st.bg.state) - 1.0
        s = u * u + v * v
        if 0.0 < s < 1.0:
            break
    f = sqrt(-2.0 * log(s) / s)
    st.spare = v * f
    st.has_spare = 1
    return u * f


cdef inline double _tn_above(double a, _NormalState *st) noexcept nogil:
    # Z ~ N(0, 1) conditioned on Z > a
    cdef double z, lam, u1, u2
    if a <= 0.0:
        while True:
            z = _std_normal(st)
            if z > a:
                return z
    lam = 0.5 * (a + sqrt(a * a + 4.0))
    while True:
        u1 = st.bg.next_double(st.bg.state)
        u2 = st.bg.next_double(st.bg.state)
        if u1 <= 0.0 or u2 <= 0.0:
            continue
        z = a - log(u1) / lam
        if log(u2) <= -0.5 * (z - lam) * (z - lam):
            return z


def tn_sum_exact(double[::1] mu, int64_t[::1] n_pos, int64_t[::1] n_neg, bit_generator):
    """Sum of per-trial probit latents, drawn one trial at a time.

    Successes are ``N(mu, 1)`` truncated to ``(0, inf)``, failures to
    ``(-inf, 0]``.
    """
    cdef Py_ssize_t n = mu.shape[0]
    cdef Py_ssize_t i
    cdef int64_t k
    cdef double acc, m
    cdef _NormalState st
    out = np.zeros(n, dtype=np.float64)
    cdef double[::1] out_v = out
    capsule = bit_generator.capsule
    st.bg = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    st.has_spare = 0
    with bit_generator.lock, nogil:
        for i in range(n):
            m = mu[i]
            acc = 0.0
            for k in range(n_pos[i]):
                acc += m + _tn_above(-m, &st)
            for k in range(n_neg[i]):
                acc += m - _tn_above(m, &st)
            out_v[i] = acc
    return out


def points_in_rings(double[:, ::1] pts, double[:, ::1] verts, int64_t[::1] ring_start):
    """Even-odd containment of ``pts`` in the polygon formed by all rings.

    ``verts`` stacks every closed ring; ring ``k`` occupies rows
    ``ring_start[k]:ring_start[k + 1]``.
    """
    cdef Py_ssize_t npts = pts.shape[0]
    cdef Py_ssize_t nring = ring_start.shape[0] - 1
    cdef Py_ssize_t p, r, e
    cdef double x, y, x1, y1, x2, y2
    cdef int inside
    out = np.zeros(npts, dtype=np.bool_)
    cdef cnp.npy_bool[::1] out_v = out
    with nogil:
        for p in range(npts):
            x = pts[p, 0]
            y = pts[p, 1]
            inside = 0
            for r in range(nring):
                for e in range(ring_start[r], ring_start[r + 1] - 1):
                    x1 = verts[e, 0]
                    y1 = verts[e, 1]
                    x2 = verts[e + 1, 0]
                    y2 = verts[e + 1, 1]
                    if (y1 > y) != (y2 > y):
                        if x < (x2 - x1) * (y - y1) / (y2 - y1) + x1:
                            inside = 1 - inside
            out_v[p] = inside
    return out

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: nodal gathers and the exact transportation solver."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def gather_accumulate(double[::1] out, const double[::1] f, const long[:, ::1] idx,
                      const double[:, ::1] w, double scale):
    """``out[i] += scale * sum_k w[i, k] * f[idx[i, k]]`` skipping ``idx < 0``."""
    cdef Py_ssize_t n = idx.shape[0], k = idx.shape[1], i, c
    cdef long t
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for c in range(k):
                t = idx[i, c]
                if t >= 0:
                    acc = acc + w[i, c] * f[t]
            out[i] += scale * acc


def transport_ssp(cost, a, b, double tol=1e-15):
    """Exact transportation problem by successive shortest paths.

    Returns ``(plan, u, v)`` with ``u_i + v_j <= cost_ij``, equality on the
    support of ``plan``.
    """
    cdef double[:, ::1] C = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1]
    supply_arr = np.array(a, dtype=np.float64)
    demand_arr = np.array(b, dtype=np.float64)
    plan_arr = np.zeros((n, m))
    p_src_arr = np.zeros(n)
    p_snk_arr = np.asarray(cost, dtype=np.float64).min(axis=0) if n else np.zeros(m)
    p_snk_arr = np.ascontiguousarray(p_snk_arr)
    cdef double[::1] supply = supply_arr, demand = demand_arr
    cdef double[:, ::1] plan = plan_arr
    cdef double[::1] p_src = p_src_arr, p_snk = p_snk_arr
    cdef double[::1] d_src = np.empty(n), d_snk = np.empty(m)
    cdef long[::1] pred_snk = np.empty(m, dtype=np.int64), pred_src = np.empty(n, dtype=np.int64)
    cdef char[::1] done_src = np.empty(n, dtype=np.int8), done_snk = np.empty(m, dtype=np.int8)
    cdef double thresh = tol * max(float(supply_arr.sum()), 1.0)
    cdef Py_ssize_t i, j, bi, bj, target, src, jb
    cdef double best_s, best_k, cand, dist, delta
    cdef bint any_s, any_d
    while True:
        any_s = False
        any_d = False
        for i in range(n):
            if supply[i] > thresh:
                any_s = True
        for j in range(m):
            if demand[j] > thresh:
                any_d = True
        if not (any_s and any_d):
            break
        with nogil:
            for i in range(n):
                d_src[i] = -p_src[i] if supply[i] > thresh else INFINITY
                pred_src[i] = -1
                done_src[i] = 0
            for j in range(m):
                d_snk[j] = INFINITY
                pred_snk[j] = -1
                done_snk[j] = 0
            target = -1
            while True:
                best_s = INFINITY
                bi = -1
                for i in range(n):
                    if not done_src[i] and d_src[i] < best_s:
                        best_s = d_src[i]
                        bi = i
                best_k = INFINITY
                bj = -1
                for j in range(m):
                    if not done_snk[j] and d_snk[j] < best_k:
                        best_k = d_snk[j]
                        bj = j
                if bi < 0 and bj < 0:
                    break
                if bi >= 0 and best_s <= best_k:
                    done_src[bi] = 1
                    for j in range(m):
                        if not done_snk[j]:
                            cand = C[bi, j] + p_src[bi] - p_snk[j]
                            if cand < 0:
                                cand = 0
                            cand = best_s + cand
                            if cand < d_snk[j]:
                                d_snk[j] = cand
                                pred_snk[j] = bi
                else:
                    done_snk[bj] = 1
                    if demand[bj] > thresh:
                        target = bj
                        break
                    for i in range(n):
                        if plan[i, bj] > 0 and not done_src[i]:
                            cand = p_snk[bj] - C[i, bj] - p_src[i]
                            if cand < 0:
                                cand = 0
                            cand = best_k + cand
                            if cand < d_src[i]:
                                d_src[i] = cand
                                pred_src[i] = bj
        if target < 0:
            raise RuntimeError("transport residual graph disconnected")
        with nogil:
            dist = d_snk[target]
            for i in range(n):
                p_src[i] += d_src[i] if (done_src[i] and d_src[i] < dist) else dist
            for j in range(m):
                p_snk[j] += d_snk[j] if (done_snk[j] and d_snk[j] < dist) else dist
            # bottleneck along the path
            j = target
            delta = demand[target]
            while True:
                i = pred_snk[j]
                jb = pred_src[i]
                if jb < 0:
                    src = i
                    break
                if plan[i, jb] < delta:
                    delta = plan[i, jb]
                j = jb
            if supply[src] < delta:
                delta = supply[src]
            j = target
            while True:
                i = pred_snk[j]
                plan[i, j] += delta
                jb = pred_src[i]
                if jb < 0:
                    break
                plan[i, jb] -= delta
                if plan[i, jb] <= thresh:
                    plan[i, jb] = 0.0
                j = jb
            supply[src] -= delta
            demand[target] -= delta
    return plan_arr, -p_src_arr, p_snk_arr

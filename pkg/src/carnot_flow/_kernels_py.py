"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or when
``CARNOT_FLOW_PURE_PYTHON=1`` is set.  Semantics match ``_kernels.pyx``.
"""
from __future__ import annotations

import numpy as np


def gather_accumulate(out, f, idx, w, scale):
    """``out[i] += scale * sum_k w[i, k] * f[idx[i, k]]`` skipping ``idx < 0``."""
    valid = idx >= 0
    vals = np.where(valid, f[np.where(valid, idx, 0)], 0.0)
    out += scale * np.sum(vals * w, axis=1)


def transport_ssp(cost, a, b, tol=1e-15):
    """Exact transportation problem by successive shortest paths.

    Dijkstra runs on reduced costs from a virtual source linked to every
    source with remaining supply; each augmentation stops at the first sink
    with remaining demand.

    Parameters
    ----------
    cost : ndarray (n, m)
    a, b : ndarray
        Supplies and demands with equal totals.

    Returns
    -------
    plan : ndarray (n, m)
    u, v : ndarray
        Dual potentials, ``u_i + v_j <= cost_ij`` with equality on the support.
    """
    cost = np.ascontiguousarray(cost, dtype=float)
    n, m = cost.shape
    supply = np.array(a, dtype=float)
    demand = np.array(b, dtype=float)
    plan = np.zeros((n, m))
    # node potentials; forward reduced cost c_ij + p_src[i] - p_snk[j] >= 0
    p_src = np.zeros(n)
    p_snk = cost.min(axis=0) if n else np.zeros(m)
    inf = np.inf
    thresh = tol * max(float(supply.sum()), 1.0)
    while (supply > thresh).any() and (demand > thresh).any():
        active = supply > thresh
        d_src = np.where(active, -p_src, inf)
        d_snk = np.full(m, inf)
        pred_snk = np.full(m, -1)
        pred_src = np.full(n, -1)
        done_src = np.zeros(n, bool)
        done_snk = np.zeros(m, bool)
        target = -1
        while True:
            ds = np.where(done_src, inf, d_src)
            dk = np.where(done_snk, inf, d_snk)
            i = int(np.argmin(ds))
            j = int(np.argmin(dk))
            if ds[i] == inf and dk[j] == inf:
                break
            if ds[i] <= dk[j]:
                done_src[i] = True
                cand = d_src[i] + np.maximum(cost[i] + p_src[i] - p_snk, 0.0)
                better = (~done_snk) & (cand < d_snk)
                d_snk[better] = cand[better]
                pred_snk[better] = i
            else:
                done_snk[j] = True
                if demand[j] > thresh:
                    target = j
                    break
                cand = d_snk[j] + np.maximum(p_snk[j] - cost[:, j] - p_src, 0.0)
                better = (plan[:, j] > 0) & (~done_src) & (cand < d_src)
                d_src[better] = cand[better]
                pred_src[better] = j
        if target < 0:
            raise RuntimeError("transport residual graph disconnected")
        dist = d_snk[target]
        p_src += np.where(done_src, np.minimum(d_src, dist), dist)
        p_snk += np.where(done_snk, np.minimum(d_snk, dist), dist)
        # walk back to the originating source
        fwd, bwd = [], []
        j = target
        while True:
            i = int(pred_snk[j])
            fwd.append((i, j))
            jb = int(pred_src[i])
            if jb < 0:
                break
            bwd.append((i, jb))
            j = jb
        src = fwd[-1][0]
        delta = min(supply[src], demand[target])
        for i, jb in bwd:
            delta = min(delta, plan[i, jb])
        for i, jj in fwd:
            plan[i, jj] += delta
        for i, jb in bwd:
            plan[i, jb] -= delta
            if plan[i, jb] <= thresh:
                plan[i, jb] = 0.0
        supply[src] -= delta
        demand[target] -= delta
    return plan, -p_src, p_snk.copy()

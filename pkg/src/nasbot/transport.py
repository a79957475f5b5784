"""Exact solver for balanced transportation problems.

The solver is a primal transportation simplex (the network simplex specialised
to complete bipartite graphs).  The basis is a spanning tree of ``m + n - 1``
cells, potentials are recomputed from the tree after every pivot, and pricing
uses the most negative reduced cost; during a long run of degenerate pivots it
switches to Bland's smallest-index rule until the next nondegenerate pivot.

The numba kernels are also used directly by :mod:`nasbot.otmann`, which solves
many instances that share supplies and demands and warm-starts each solve from
the previous optimal basis.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "TransportInstance",
    "TransportPlan",
    "TransportError",
    "solve_exact",
]

BALANCE_RTOL = 1e-9
_DEGENERATE_SWITCH = 50


class TransportError(ValueError):
    """Raised for malformed or unbalanced transportation instances."""


@dataclass(frozen=True)
class TransportInstance:
    supplies: np.ndarray
    demands: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.supplies, dtype=float)
        b = np.asarray(self.demands, dtype=float)
        c = np.asarray(self.cost, dtype=float)
        if a.ndim != 1 or b.ndim != 1:
            raise TransportError("supplies and demands must be vectors")
        if c.shape != (a.size, b.size):
            raise TransportError(
                f"cost has shape {c.shape}, expected {(a.size, b.size)}"
            )
        if a.size == 0 or b.size == 0:
            raise TransportError("empty supplies or demands")
        if np.any(a < 0) or np.any(b < 0):
            raise TransportError("negative supply or demand")
        if not np.all(np.isfinite(c)):
            raise TransportError("cost matrix has non-finite entries")
        total = max(a.sum(), b.sum(), 1e-300)
        if abs(a.sum() - b.sum()) > BALANCE_RTOL * total:
            raise TransportError(
                f"unbalanced instance: sum(supplies)={a.sum()!r}, "
                f"sum(demands)={b.sum()!r}"
            )
        object.__setattr__(self, "supplies", a)
        object.__setattr__(self, "demands", b)
        object.__setattr__(self, "cost", c)


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    objective: float


def solve_exact(instance: TransportInstance) -> TransportPlan:
    """Return an optimal coupling of ``instance`` and its objective."""
    a = instance.supplies
    b = instance.demands
    c = np.ascontiguousarray(instance.cost)
    bi, bj, flow = row_minimum(a, b, c)
    obj = simplex(a.size, b.size, c, bi, bj, flow)
    coupling = np.zeros_like(c)
    coupling[bi, bj] = flow
    return TransportPlan(coupling=coupling, objective=float(obj))


@njit(cache=True)
def northwest_corner(a, b):
    """Initial basic feasible solution with exactly ``m + n - 1`` basic cells."""
    m = a.shape[0]
    n = b.shape[0]
    k = m + n - 1
    bi = np.empty(k, dtype=np.int64)
    bj = np.empty(k, dtype=np.int64)
    flow = np.empty(k, dtype=np.float64)
    ra = a.copy()
    rb = b.copy()
    i = 0
    j = 0
    for t in range(k):
        x = min(ra[i], rb[j])
        if x < 0.0:
            x = 0.0
        bi[t] = i
        bj[t] = j
        flow[t] = x
        ra[i] -= x
        rb[j] -= x
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif ra[i] <= rb[j]:
            i += 1
        else:
            j += 1
    return bi, bj, flow


@njit(cache=True)
def row_minimum(a, b, c):
    """Initial basis from the row-minimum rule.

    Rows are filled in order, each time into the cheapest open column.  Every
    allocation closes one row or column (both only on the final allocation),
    so the ``m + n - 1`` chosen cells always form a spanning tree.
    """
    m = a.shape[0]
    n = b.shape[0]
    k = m + n - 1
    bi = np.empty(k, dtype=np.int64)
    bj = np.empty(k, dtype=np.int64)
    flow = np.empty(k, dtype=np.float64)
    _row_minimum(a, b, c, bi, bj, flow, np.empty(m), np.empty(n), np.empty(n, dtype=np.bool_))
    return bi, bj, flow


@njit(cache=True)
def _row_minimum(a, b, c, bi, bj, flow, ra, rb, col_open):
    m = a.shape[0]
    n = b.shape[0]
    k = m + n - 1
    ra[:m] = a
    rb[:n] = b
    col_open[:n] = True
    rows_left = m
    cols_left = n
    i = 0
    for t in range(k):
        j = -1
        best = np.inf
        for jj in range(n):
            if col_open[jj] and c[i, jj] < best:
                best = c[i, jj]
                j = jj
        x = min(ra[i], rb[j])
        if x < 0.0:
            x = 0.0
        bi[t] = i
        bj[t] = j
        flow[t] = x
        ra[i] -= x
        rb[j] -= x
        if rows_left == 1 and cols_left == 1:
            break
        if cols_left == 1 or (rows_left > 1 and ra[i] <= rb[j]):
            rows_left -= 1
            i += 1
        else:
            col_open[j] = False
            cols_left -= 1


@njit(cache=True)
def workspace(m, n):
    nn = m + n
    k = nn - 1
    return (np.zeros((m, n), dtype=np.bool_), np.empty(nn, dtype=np.int64),
            np.empty(nn + 1, dtype=np.int64), np.empty(nn, dtype=np.int64),
            np.empty(2 * k, dtype=np.int64), np.empty(nn, dtype=np.float64),
            np.empty(nn, dtype=np.int64), np.empty(nn, dtype=np.int64),
            np.empty(nn, dtype=np.int64), np.empty(nn, dtype=np.int64),
            np.empty(nn, dtype=np.int64), np.empty(nn, dtype=np.int64))


@njit(cache=True)
def simplex(m, n, c, bi, bj, flow):
    """Pivot the basis ``(bi, bj, flow)`` to optimality in place.

    Returns the optimal objective.  The basis arrays are modified so that a
    later call with a different cost matrix (same marginals) can warm-start.
    """
    return simplex_ws(m, n, c, bi, bj, flow, workspace(m, n))


@njit(cache=True)
def simplex_ws(m, n, c, bi, bj, flow, ws):
    """:func:`simplex` with caller-provided scratch arrays (see :func:`workspace`)."""
    is_basic, deg, start, fill, adj_cell, pot, parent, pcell, depth, queue, path, tail = ws
    k = m + n - 1
    nn = m + n
    cmax = 0.0
    for i in range(m):
        for j in range(n):
            if abs(c[i, j]) > cmax:
                cmax = abs(c[i, j])
    tol = 1e-11 * (1.0 + cmax)
    # is_basic is all False on entry and is cleared again before returning
    for t in range(k):
        is_basic[bi[t], bj[t]] = True

    bland = False
    degenerate_run = 0
    max_iter = 50 * (m * n + nn) + 1000
    for _ in range(max_iter):
        # adjacency of the basis tree (rows are nodes 0..m-1, columns m..m+n-1)
        for v in range(nn):
            deg[v] = 0
        for t in range(k):
            deg[bi[t]] += 1
            deg[m + bj[t]] += 1
        start[0] = 0
        for v in range(nn):
            start[v + 1] = start[v] + deg[v]
            fill[v] = start[v]
        for t in range(k):
            r = bi[t]
            s = m + bj[t]
            adj_cell[fill[r]] = t
            fill[r] += 1
            adj_cell[fill[s]] = t
            fill[s] += 1

        # potentials u_i + v_j = c_ij on basic cells, rooted at row 0
        for v in range(nn):
            parent[v] = -2
        parent[0] = -1
        pcell[0] = -1
        depth[0] = 0
        pot[0] = 0.0
        head = 0
        qlen = 1
        queue[0] = 0
        while head < qlen:
            v = queue[head]
            head += 1
            for p in range(start[v], start[v + 1]):
                t = adj_cell[p]
                w = m + bj[t] if v < m else bi[t]
                if parent[w] != -2:
                    continue
                parent[w] = v
                pcell[w] = t
                depth[w] = depth[v] + 1
                pot[w] = c[bi[t], bj[t]] - pot[v]
                queue[qlen] = w
                qlen += 1
        if qlen != nn:
            raise RuntimeError("transport basis is not a spanning tree")

        # pricing
        ei = -1
        ej = -1
        best = -tol
        for i in range(m):
            ui = pot[i]
            for j in range(n):
                if is_basic[i, j]:
                    continue
                rc = c[i, j] - ui - pot[m + j]
                if rc < best:
                    ei = i
                    ej = j
                    if bland:
                        break
                    best = rc
            if bland and ei >= 0:
                break
        if ei < 0:
            break

        # cycle: entering cell plus the tree path from column ej back to row ei
        a_node = ei
        b_node = m + ej
        plen = 0
        tlen = 0
        while depth[b_node] > depth[a_node]:
            path[plen] = pcell[b_node]
            plen += 1
            b_node = parent[b_node]
        while depth[a_node] > depth[b_node]:
            tail[tlen] = pcell[a_node]
            tlen += 1
            a_node = parent[a_node]
        while a_node != b_node:
            path[plen] = pcell[b_node]
            plen += 1
            b_node = parent[b_node]
            tail[tlen] = pcell[a_node]
            tlen += 1
            a_node = parent[a_node]
        for q in range(tlen - 1, -1, -1):
            path[plen] = tail[q]
            plen += 1

        # leaving cell: minimum flow on the odd (decreasing) positions,
        # ties broken by smallest cell index
        theta = np.inf
        leave = -1
        leave_key = 0
        for q in range(0, plen, 2):
            t = path[q]
            key = bi[t] * n + bj[t]
            if flow[t] < theta or (flow[t] == theta and key < leave_key):
                theta = flow[t]
                leave = t
                leave_key = key
        if theta < 0.0:
            theta = 0.0

        # Bland's rule only inside long degenerate streaks: it cannot cycle
        # there, and every nondegenerate pivot strictly lowers the objective
        if theta == 0.0:
            degenerate_run += 1
            if degenerate_run > _DEGENERATE_SWITCH:
                bland = True
        else:
            degenerate_run = 0
            bland = False

        for q in range(plen):
            t = path[q]
            if q % 2 == 0:
                flow[t] -= theta
            else:
                flow[t] += theta
        is_basic[bi[leave], bj[leave]] = False
        bi[leave] = ei
        bj[leave] = ej
        flow[leave] = theta
        is_basic[ei, ej] = True
    else:
        raise RuntimeError("transport simplex did not converge")

    obj = 0.0
    for t in range(k):
        is_basic[bi[t], bj[t]] = False
        if flow[t] < 0.0:
            flow[t] = 0.0
        obj += flow[t] * c[bi[t], bj[t]]
    return obj

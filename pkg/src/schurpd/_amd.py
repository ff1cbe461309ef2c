"""Approximate-minimum-degree ordering on a symmetric sparsity pattern.

Quotient-graph AMD in the style of the classic column-ordering codes:
element absorption, external-degree approximation, hash-based supernode
detection, and a postorder of the assembly tree. Runs under numba on flat
int64 arrays.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numba import njit


@njit(cache=True)
def _wclear(mark, lemax, w, n):
    if mark < 2 or mark + lemax < 0:
        for k in range(n):
            if w[k] != 0:
                w[k] = 1
        mark = 2
    return mark


@njit(cache=True)
def _tdfs(j, k, head, nxt, post, stack):
    # depth-first postorder of the tree rooted at j
    top = 0
    stack[0] = j
    while top >= 0:
        p = stack[top]
        i = head[p]
        if i == -1:
            top -= 1
            post[k] = p
            k += 1
        else:
            head[p] = nxt[i]
            top += 1
            stack[top] = i
    return k


@njit(cache=True)
def _amd_core(n, Cp, Ci, nzmax, cnz):  # noqa: C901  (faithful port, intentionally monolithic)
    FLIP = -2  # flip(i) = -i + FLIP

    dense = 10 * int(np.sqrt(n)) + 1
    if dense < 16:
        dense = 16
    if dense > n - 2:
        dense = n - 2

    # workspaces, one slot per node plus the virtual element n
    ln = np.empty(n + 1, np.int64)
    nv = np.empty(n + 1, np.int64)
    nxt = np.empty(n + 1, np.int64)
    head = np.empty(n + 1, np.int64)
    elen = np.empty(n + 1, np.int64)
    degree = np.empty(n + 1, np.int64)
    w = np.empty(n + 1, np.int64)
    hhead = np.empty(n + 1, np.int64)
    last = np.empty(n + 1, np.int64)

    for k in range(n):
        ln[k] = Cp[k + 1] - Cp[k]
    ln[n] = 0
    for i in range(n + 1):
        head[i] = -1
        last[i] = -1
        nxt[i] = -1
        hhead[i] = -1
        nv[i] = 1
        w[i] = 1
        elen[i] = 0
        degree[i] = ln[i]
    nel = 0
    mindeg = 0
    lemax = 0
    mark = _wclear(0, 0, w, n)
    elen[n] = -2  # n is a dead element
    Cp[n] = -1  # n is a root of the assembly tree
    w[n] = 0

    for i in range(n):
        d = degree[i]
        if d == 0:  # node i is empty
            elen[i] = -2
            nel += 1
            Cp[i] = -1
            w[i] = 0
        elif d > dense:  # node i is dense: absorb into element n
            nv[i] = 0
            elen[i] = -1
            nel += 1
            Cp[i] = -(n) + FLIP
            nv[n] += 1
        else:
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            head[d] = i

    while nel < n:
        # select node of minimum approximate degree
        while mindeg < n and head[mindeg] == -1:
            mindeg += 1
        k = head[mindeg]
        if nxt[k] != -1:
            last[nxt[k]] = -1
        head[mindeg] = nxt[k]
        elenk = elen[k]
        nvk = nv[k]
        nel += nvk

        # garbage collection: compact live objects to the front of Ci
        if elenk > 0 and cnz + mindeg >= nzmax:
            for j in range(n):
                p = Cp[j]
                if p >= 0:
                    Cp[j] = Ci[p]
                    Ci[p] = -(j) + FLIP
            q = 0
            p = 0
            while p < cnz:
                j = -(Ci[p]) + FLIP
                p += 1
                if j >= 0:
                    Ci[q] = Cp[j]
                    Cp[j] = q
                    q += 1
                    for _ in range(ln[j] - 1):
                        Ci[q] = Ci[p]
                        q += 1
                        p += 1
            cnz = q

        # construct new element Lk from the nodes of k and of k's elements
        dk = 0
        nv[k] = -nvk
        p = Cp[k]
        pk1 = p if elenk == 0 else cnz
        pk2 = pk1
        for k1 in range(1, elenk + 2):
            if k1 > elenk:
                e = k
                pj = p
                ln2 = ln[k] - elenk
            else:
                e = Ci[p]
                p += 1
                pj = Cp[e]
                ln2 = ln[e]
            for _ in range(ln2):
                i = Ci[pj]
                pj += 1
                nvi = nv[i]
                if nvi <= 0:
                    continue
                dk += nvi
                nv[i] = -nvi
                Ci[pk2] = i
                pk2 += 1
                if nxt[i] != -1:
                    last[nxt[i]] = last[i]
                if last[i] != -1:
                    nxt[last[i]] = nxt[i]
                else:
                    head[degree[i]] = nxt[i]
            if e != k:
                Cp[e] = -(k) + FLIP  # absorb e into k
                w[e] = 0
        if elenk != 0:
            cnz = pk2
        degree[k] = dk
        Cp[k] = pk1
        ln[k] = pk2 - pk1
        elen[k] = -2  # k is now an element

        # scan 1: |Le \ Lk| for all live elements e adjacent to nodes in Lk
        mark = _wclear(mark, lemax, w, n)
        for pk in range(pk1, pk2):
            i = Ci[pk]
            eln = elen[i]
            if eln <= 0:
                continue
            nvi = -nv[i]
            wnvi = mark - nvi
            for p in range(Cp[i], Cp[i] + eln):
                e = Ci[p]
                if w[e] >= mark:
                    w[e] -= nvi
                elif w[e] != 0:
                    w[e] = degree[e] + wnvi

        # scan 2: approximate external degree of each node in Lk
        for pk in range(pk1, pk2):
            i = Ci[pk]
            p1 = Cp[i]
            p2 = p1 + elen[i] - 1
            pn = p1
            h = 0
            d = 0
            for p in range(p1, p2 + 1):
                e = Ci[p]
                if w[e] != 0:  # e is a live element
                    dext = w[e] - mark
                    if dext > 0:
                        d += dext
                        Ci[pn] = e
                        pn += 1
                        h += e
                    else:
                        Cp[e] = -(k) + FLIP  # aggressive absorption
                        w[e] = 0
            elen[i] = pn - p1 + 1
            p3 = pn
            p4 = p1 + ln[i]
            for p in range(p2 + 1, p4):
                j = Ci[p]
                nvj = nv[j]
                if nvj <= 0:
                    continue
                d += nvj
                Ci[pn] = j
                pn += 1
                h += j
            if d == 0:  # mass elimination: i folds into k
                Cp[i] = -(k) + FLIP
                nvi = -nv[i]
                dk -= nvi
                nvk += nvi
                nel += nvi
                nv[i] = 0
                elen[i] = -1
            else:
                if degree[i] < d:
                    d = degree[i]
                degree[i] = d
                Ci[pn] = Ci[p3]
                Ci[p3] = Ci[p1]
                Ci[p1] = k  # element k becomes the first in Ei
                ln[i] = pn - p1 + 1
                h %= n
                nxt[i] = hhead[h]
                hhead[h] = i
                last[i] = h
        degree[k] = dk
        if lemax < dk:
            lemax = dk
        mark = _wclear(mark + lemax, lemax, w, n)

        # supernode detection via hash buckets
        for pk in range(pk1, pk2):
            i = Ci[pk]
            if nv[i] >= 0:
                continue
            h = last[i]
            i = hhead[h]
            hhead[h] = -1
            while i != -1 and nxt[i] != -1:
                ln2 = ln[i]
                eln = elen[i]
                for p in range(Cp[i] + 1, Cp[i] + ln2):
                    w[Ci[p]] = mark
                jlast = i
                j = nxt[i]
                while j != -1:
                    ok = ln[j] == ln2 and elen[j] == eln
                    p = Cp[j] + 1
                    while ok and p < Cp[j] + ln2:
                        if w[Ci[p]] != mark:
                            ok = False
                        p += 1
                    if ok:  # i and j are identical: absorb j
                        Cp[j] = -(i) + FLIP
                        nv[i] += nv[j]
                        nv[j] = 0
                        elen[j] = -1
                        j = nxt[j]
                        nxt[jlast] = j
                    else:
                        jlast = j
                        j = nxt[j]
                i = nxt[i]
                mark += 1

        # finalize element k
        p = pk1
        for pk in range(pk1, pk2):
            i = Ci[pk]
            nvi = -nv[i]
            if nvi <= 0:
                continue
            nv[i] = nvi
            d = degree[i] + dk - nvi
            dmax = n - nel - nvi
            if d > dmax:
                d = dmax
            if head[d] != -1:
                last[head[d]] = i
            nxt[i] = head[d]
            last[i] = -1
            head[d] = i
            if d < mindeg:
                mindeg = d
            degree[i] = d
            Ci[p] = i
            p += 1
        nv[k] = nvk
        ln[k] = p - pk1
        if ln[k] == 0:
            Cp[k] = -1
            w[k] = 0
        if elenk != 0:
            cnz = p

    # postorder the assembly tree
    for i in range(n + 1):
        Cp[i] = -(Cp[i]) + FLIP
    for j in range(n + 1):
        head[j] = -1
    for j in range(n, -1, -1):  # nodes hang below the element that absorbed them
        if nv[j] > 0:
            continue
        nxt[j] = head[Cp[j]]
        head[Cp[j]] = j
    for e in range(n, -1, -1):  # elements hang below their parent element
        if nv[e] <= 0:
            continue
        if Cp[e] != -1:
            nxt[e] = head[Cp[e]]
            head[Cp[e]] = e
    post = np.empty(n + 1, np.int64)
    stack = np.empty(n + 1, np.int64)
    k = 0
    for i in range(n + 1):
        if Cp[i] == -1:
            k = _tdfs(i, k, head, nxt, post, stack)
    return post


def amd_order(pattern: sp.spmatrix) -> np.ndarray:
    """Fill-reducing permutation of a symmetric pattern.

    Returns perm such that perm[new] = old; factorizing A[perm][:, perm]
    in natural order realizes the ordering.
    """
    n = pattern.shape[0]
    if n != pattern.shape[1]:
        raise ValueError("pattern must be square")
    if n <= 1:
        return np.arange(n, dtype=np.int64)
    B = sp.csc_matrix(pattern, copy=False).astype(bool)
    C = (B + B.T).tocsc()
    C.setdiag(False)
    C.eliminate_zeros()
    C.sort_indices()
    cnz = C.nnz
    nzmax = cnz + cnz // 5 + 2 * n
    Cp = np.empty(n + 2, np.int64)
    Cp[: n + 1] = C.indptr
    Cp[n + 1] = 0  # slot for the virtual element
    Ci = np.empty(max(nzmax, 1), np.int64)
    Ci[:cnz] = C.indices
    post = _amd_core(n, Cp, Ci, nzmax, cnz)
    perm = post[post < n][:n]
    return np.ascontiguousarray(perm, dtype=np.int64)

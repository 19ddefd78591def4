"""
Compiled inner loops: CART growth on presorted columns and weighted
coordinate-descent lasso.

Trees keep, for every node, a contiguous segment ``[start, end)`` in each
row of a ``(p, m)`` index table; each row lists the node's training rows
sorted by that feature. Splitting stably partitions every row, so one
presort per design matrix serves all trees grown on it (boosting rounds,
forest trees via bootstrap weights).
"""

from __future__ import annotations

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def presort(XT):
    p, n = XT.shape
    out = np.empty((p, n), dtype=np.int64)
    for j in range(p):
        out[j, :] = np.argsort(XT[j], kind="mergesort")
    return out


@njit(cache=True)
def build_tree(XT, y, w, order, max_depth, min_leaf, mtry, seed):
    """Grow one regression tree on weighted rows (``w == 0`` rows are ignored).

    Split score is the weighted SSE reduction; for 0/1 targets this equals
    half the weighted Gini decrease, so the same kernel grows probability
    trees. Candidate thresholds are midpoints between consecutive distinct
    values. Ties keep the first candidate found: lowest feature index,
    then smallest threshold. ``XT`` is the feature-major (p, n) design.
    """
    p, n = XT.shape
    m = 0
    for i in range(n):
        if w[i] > 0.0:
            m += 1
    work = np.empty((p, m), dtype=np.int64)
    if m == n:
        work[:, :] = order
    else:
        for j in range(p):
            c = 0
            for t in range(n):
                r = order[j, t]
                if w[r] > 0.0:
                    work[j, c] = r
                    c += 1

    cap = 2 * m + 1
    if max_depth < 30:
        full = (1 << (max_depth + 1)) - 1
        if full < cap:
            cap = full
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros(cap)
    weight = np.zeros(cap)

    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = m
    st_depth[0] = 0
    top = 1
    n_nodes = 1

    goes_left = np.zeros(n, dtype=np.bool_)
    wd = np.empty(n)
    tmp = np.empty(m, dtype=np.int64)
    feats = np.arange(p)
    use_all = mtry <= 0 or mtry >= p
    np.random.seed(seed)
    chosen = np.empty(p, dtype=np.int64)

    # root statistics; children get theirs when created
    sw = 0.0
    swy = 0.0
    for t in range(m):
        r = work[0, t]
        sw += w[r]
        swy += w[r] * y[r]
    value[0] = swy / sw
    weight[0] = sw

    while top > 0:
        top -= 1
        node = st_node[top]
        s = st_start[top]
        e = st_end[top]
        depth = st_depth[top]
        sw = weight[node]
        mean = value[node]

        if depth >= max_depth or sw < 2.0 * min_leaf or e - s < 2:
            continue
        sse = 0.0
        for t in range(s, e):
            r = work[0, t]
            dlt = y[r] - mean
            wd[r] = w[r] * dlt
            sse += w[r] * dlt * dlt
        if sse <= 1e-24 * sw * (1.0 + mean * mean):
            continue

        if use_all:
            nf = p
            for j in range(p):
                chosen[j] = j
        else:
            # partial Fisher-Yates, then ascending order for the tie rule
            for j in range(mtry):
                k = j + np.random.randint(0, p - j)
                tmpf = feats[j]
                feats[j] = feats[k]
                feats[k] = tmpf
            nf = mtry
            for j in range(mtry):
                chosen[j] = feats[j]
            chosen[:mtry].sort()

        # gain = syl^2 * sw / (swl * swr); compared as a fraction num/den
        best_num = 0.0
        best_den = 1.0
        best_feat = -1
        best_thr = 0.0
        best_nl = 0
        for q in range(nf):
            j = chosen[q]
            xrow = XT[j]
            swl = 0.0
            syl = 0.0
            xn = xrow[work[j, s]]
            for t in range(s, e - 1):
                r = work[j, t]
                swl += w[r]
                syl += wd[r]
                xv = xn
                xn = xrow[work[j, t + 1]]
                if xv < xn:
                    swr = sw - swl
                    if swl >= min_leaf and swr >= min_leaf:
                        num = syl * syl
                        den = swl * swr
                        if num * best_den > best_num * den:
                            best_num = num
                            best_den = den
                            best_feat = j
                            thr = 0.5 * (xv + xn)
                            if thr >= xn:
                                thr = xv
                            best_thr = thr
                            best_nl = t - s + 1
        if best_feat < 0 or best_num * sw / best_den <= 1e-12 * sse:
            continue
        if n_nodes + 2 > cap:
            continue

        swl = 0.0
        swyl = 0.0
        swr = 0.0
        swyr = 0.0
        for t in range(s, e):
            r = work[best_feat, t]
            if t < s + best_nl:
                swl += w[r]
                swyl += w[r] * y[r]
            else:
                swr += w[r]
                swyr += w[r] * y[r]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        value[lid] = swyl / swl
        weight[lid] = swl
        value[rid] = swyr / swr
        weight[rid] = swr
        if depth + 1 >= max_depth:
            continue

        for t in range(s, e):
            goes_left[work[best_feat, t]] = t < s + best_nl
        # branchless stable partition: both cursors write, one advances
        for j in range(p):
            a = s
            b = 0
            for t in range(s, e):
                r = work[j, t]
                g = goes_left[r]
                work[j, a] = r
                tmp[b] = r
                a += g
                b += 1 - g
            for t in range(b):
                work[j, a + t] = tmp[t]

        # right pushed first so the left child is expanded first
        st_node[top] = rid
        st_start[top] = s + best_nl
        st_end[top] = e
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lid
        st_start[top] = s
        st_end[top] = s + best_nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), weight[:n_nodes].copy())


@njit(cache=True)
def predict_tree(X, feature, threshold, left, right, value):
    n = X.shape[0]
    out = np.empty(n)
    for i in range(n):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def tree_leaf_depths(feature, left, right):
    nn = feature.shape[0]
    depth = np.zeros(nn, dtype=np.int64)
    for node in range(nn):
        if feature[node] != LEAF:
            depth[left[node]] = depth[node] + 1
            depth[right[node]] = depth[node] + 1
    return depth


# =============================================================================
# LASSO
# =============================================================================

@njit(cache=True)
def _soft(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@njit(cache=True)
def lasso_cd(XT, z, w, lam, beta, b0, tol, max_sweeps):
    """Minimize ``(1/2n) sum w_i (z_i - b0 - x_i beta)^2 + lam * |beta|_1``.

    ``XT`` is the feature-major (p, n) standardized design.

    ``beta`` is updated in place (warm start). The intercept is unpenalized.
    Returns ``(b0, kkt, sweeps)`` where ``kkt`` is the largest violation of
    the stationarity conditions after the final sweep.
    """
    p, n = XT.shape
    a = np.zeros(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * XT[j, i] * XT[j, i]
        a[j] = acc / n
    sw = 0.0
    for i in range(n):
        sw += w[i]
    r = np.empty(n)
    for i in range(n):
        acc = z[i] - b0
        for j in range(p):
            if beta[j] != 0.0:
                acc -= XT[j, i] * beta[j]
        r[i] = acc
    for j in range(p):
        if a[j] <= 1e-14:
            if beta[j] != 0.0:
                for i in range(n):
                    r[i] += XT[j, i] * beta[j]
            beta[j] = 0.0

    kkt = np.inf
    sweeps = 0
    active = np.zeros(p, dtype=np.bool_)
    while sweeps < max_sweeps:
        sweeps += 1
        # full sweep
        acc = 0.0
        for i in range(n):
            acc += w[i] * r[i]
        d0 = acc / sw
        b0 += d0
        for i in range(n):
            r[i] -= d0
        for j in range(p):
            if a[j] <= 1e-14:
                continue
            g = 0.0
            for i in range(n):
                g += w[i] * XT[j, i] * r[i]
            g /= n
            new = _soft(g + a[j] * beta[j], lam) / a[j]
            dlt = new - beta[j]
            if dlt != 0.0:
                for i in range(n):
                    r[i] -= dlt * XT[j, i]
                beta[j] = new
            active[j] = new != 0.0
        # active-set passes
        inner = 0
        while inner < 1000 and sweeps < max_sweeps:
            inner += 1
            acc = 0.0
            for i in range(n):
                acc += w[i] * r[i]
            d0 = acc / sw
            b0 += d0
            for i in range(n):
                r[i] -= d0
            biggest = abs(d0)
            for j in range(p):
                if not active[j]:
                    continue
                g = 0.0
                for i in range(n):
                    g += w[i] * XT[j, i] * r[i]
                g /= n
                new = _soft(g + a[j] * beta[j], lam) / a[j]
                dlt = new - beta[j]
                if dlt != 0.0:
                    for i in range(n):
                        r[i] -= dlt * XT[j, i]
                    beta[j] = new
                    ch = abs(dlt) * a[j]
                    if ch > biggest:
                        biggest = ch
            if biggest < 0.5 * tol:
                break
        # certificate
        acc = 0.0
        for i in range(n):
            acc += w[i] * r[i]
        kkt = abs(acc) / n
        for j in range(p):
            if a[j] <= 1e-14:
                continue
            g = 0.0
            for i in range(n):
                g += w[i] * XT[j, i] * r[i]
            g /= n
            if beta[j] == 0.0:
                v = abs(g) - lam
            elif beta[j] > 0.0:
                v = abs(g - lam)
            else:
                v = abs(g + lam)
            if v > kkt:
                kkt = v
        if kkt <= tol:
            break
    return b0, kkt, sweeps


@njit(cache=True)
def lasso_cd_gram(G, c, lam, beta, tol, max_sweeps):
    """Covariance-update variant for centred, unit-weight problems.

    With ``G = Xs'Xs/n`` and ``c = Xs'(z - mean z)/n`` the intercept is
    decoupled and the gradient ``g = c - G beta`` is maintained in O(p) per
    coordinate change. Returns ``(kkt, sweeps)``.
    """
    p = G.shape[0]
    g = c - G @ beta
    for j in range(p):
        if G[j, j] <= 1e-14 and beta[j] != 0.0:
            g += beta[j] * G[j]
            beta[j] = 0.0
    active = np.zeros(p, dtype=np.bool_)
    kkt = np.inf
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        for j in range(p):
            a = G[j, j]
            if a <= 1e-14:
                continue
            new = _soft(g[j] + a * beta[j], lam) / a
            dlt = new - beta[j]
            if dlt != 0.0:
                g -= dlt * G[j]
                beta[j] = new
            active[j] = new != 0.0
        inner = 0
        while inner < 1000:
            inner += 1
            biggest = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                a = G[j, j]
                new = _soft(g[j] + a * beta[j], lam) / a
                dlt = new - beta[j]
                if dlt != 0.0:
                    g -= dlt * G[j]
                    beta[j] = new
                    ch = abs(dlt) * a
                    if ch > biggest:
                        biggest = ch
            if biggest < 0.5 * tol:
                break
        g = c - G @ beta
        kkt = 0.0
        for j in range(p):
            if G[j, j] <= 1e-14:
                continue
            if beta[j] == 0.0:
                v = abs(g[j]) - lam
            elif beta[j] > 0.0:
                v = abs(g[j] - lam)
            else:
                v = abs(g[j] + lam)
            if v > kkt:
                kkt = v
        if kkt <= tol:
            break
    return kkt, sweeps

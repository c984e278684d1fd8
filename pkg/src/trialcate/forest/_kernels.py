"""Compiled tree kernels.

Trees are stored as flat node arrays: ``feature`` (-1 marks a leaf),
``threshold``, ``left``/``right`` child ids and per-node leaf values. Rows go
left when ``x[feature] < threshold``.
"""

import numba as nb
import numpy as np

# leaf statistic columns
SUM_WT, SUM_WC, SUM_WTY, SUM_WCY = 0, 1, 2, 3


@nb.njit(cache=True)
def grow(Xs, As, Ys, Ws, Xe, mtry, min_t, min_c, min_e, max_depth, seed):
    """Grow one tree greedily on the split-search rows.

    Only the estimation rows' features enter (for the per-child row minimum);
    their treatment and outcome never reach this function.
    """
    np.random.seed(seed)
    ns, p = Xs.shape
    ne = Xe.shape[0]
    cap = 2 * ns + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    depth = np.zeros(cap, np.int64)
    s_lo = np.zeros(cap, np.int64)
    s_hi = np.zeros(cap, np.int64)
    e_lo = np.zeros(cap, np.int64)
    e_hi = np.zeros(cap, np.int64)
    perm_s = np.arange(ns)
    perm_e = np.arange(ne)
    buf_s = np.empty(ns, np.int64)
    buf_e = np.empty(ne, np.int64)
    feats = np.arange(p)
    chosen = np.empty(mtry, np.int64)

    s_hi[0] = ns
    e_hi[0] = ne
    n_nodes = 1
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if max_depth >= 0 and depth[node] >= max_depth:
            continue
        a = s_lo[node]
        b = s_hi[node]
        c = e_lo[node]
        d = e_hi[node]

        nt = 0
        nc = 0
        wt = 0.0
        wc = 0.0
        wty = 0.0
        wcy = 0.0
        for i in range(a, b):
            r = perm_s[i]
            if As[r] > 0.5:
                nt += 1
                wt += Ws[r]
                wty += Ws[r] * Ys[r]
            else:
                nc += 1
                wc += Ws[r]
                wcy += Ws[r] * Ys[r]
        if nt < 2 * min_t or nc < 2 * min_c or d - c < 2 * min_e:
            continue

        for j in range(mtry):
            k = j + np.random.randint(p - j)
            tmp = feats[j]
            feats[j] = feats[k]
            feats[k] = tmp
        for j in range(mtry):
            chosen[j] = feats[j]
        chosen.sort()

        m = b - a
        me = d - c
        vals = np.empty(m)
        evals = np.empty(me)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for jf in range(mtry):
            f = chosen[jf]
            for i in range(m):
                vals[i] = Xs[perm_s[a + i], f]
            order = np.argsort(vals)
            for i in range(me):
                evals[i] = Xe[perm_e[c + i], f]
            evals.sort()

            lt = 0
            lc = 0
            lwt = 0.0
            lwc = 0.0
            lwty = 0.0
            lwcy = 0.0
            pe = 0
            for i in range(m - 1):
                r = perm_s[a + order[i]]
                if As[r] > 0.5:
                    lt += 1
                    lwt += Ws[r]
                    lwty += Ws[r] * Ys[r]
                else:
                    lc += 1
                    lwc += Ws[r]
                    lwcy += Ws[r] * Ys[r]
                lo_v = vals[order[i]]
                hi_v = vals[order[i + 1]]
                if lo_v == hi_v:
                    continue
                if lt < min_t or lc < min_c:
                    continue
                if nt - lt < min_t or nc - lc < min_c:
                    continue
                thr = 0.5 * (lo_v + hi_v)
                if thr <= lo_v:
                    thr = hi_v
                while pe < me and evals[pe] < thr:
                    pe += 1
                if pe < min_e or me - pe < min_e:
                    continue
                rwt = wt - lwt
                rwc = wc - lwc
                tau_l = lwty / lwt - lwcy / lwc
                tau_r = (wty - lwty) / rwt - (wcy - lwcy) / rwc
                nl = lwt + lwc
                nr = rwt + rwc
                tot = nl + nr
                gain = nl * nr / (tot * tot) * (tau_l - tau_r) ** 2
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_thr = thr

        if best_f < 0:
            continue

        # stable partition of both halves
        nl_s = 0
        for i in range(a, b):
            if Xs[perm_s[i], best_f] < best_thr:
                buf_s[nl_s] = perm_s[i]
                nl_s += 1
        k = nl_s
        for i in range(a, b):
            if not Xs[perm_s[i], best_f] < best_thr:
                buf_s[k] = perm_s[i]
                k += 1
        for i in range(m):
            perm_s[a + i] = buf_s[i]
        nl_e = 0
        for i in range(c, d):
            if Xe[perm_e[i], best_f] < best_thr:
                buf_e[nl_e] = perm_e[i]
                nl_e += 1
        k = nl_e
        for i in range(c, d):
            if not Xe[perm_e[i], best_f] < best_thr:
                buf_e[k] = perm_e[i]
                k += 1
        for i in range(me):
            perm_e[c + i] = buf_e[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        s_lo[lid] = a
        s_hi[lid] = a + nl_s
        s_lo[rid] = a + nl_s
        s_hi[rid] = b
        e_lo[lid] = c
        e_hi[lid] = c + nl_e
        e_lo[rid] = c + nl_e
        e_hi[rid] = d
        depth[lid] = depth[node] + 1
        depth[rid] = depth[node] + 1
        stack[sp] = rid
        stack[sp + 1] = lid
        sp += 2

    return feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(), right[:n_nodes].copy()


@nb.njit(cache=True)
def node_stats(feature, threshold, left, right, Xe, Ae, Ye, We):
    """Accumulate weighted arm statistics of the estimation rows at every node."""
    stats = np.zeros((feature.shape[0], 4))
    for i in range(Xe.shape[0]):
        node = 0
        while True:
            if Ae[i] > 0.5:
                stats[node, SUM_WT] += We[i]
                stats[node, SUM_WTY] += We[i] * Ye[i]
            else:
                stats[node, SUM_WC] += We[i]
                stats[node, SUM_WCY] += We[i] * Ye[i]
            f = feature[node]
            if f < 0:
                break
            if Xe[i, f] < threshold[node]:
                node = left[node]
            else:
                node = right[node]
    return stats


@nb.njit(cache=True)
def repair(feature, left, right, stats):
    """Collapse any parent with a single-arm leaf child into a leaf.

    Children always carry larger ids than their parent, so one reverse sweep
    repairs bottom-up. Returns the new feature array and whether the root
    ends up valid.
    """
    feature = feature.copy()
    for node in range(feature.shape[0] - 1, -1, -1):
        if feature[node] < 0:
            continue
        bad = False
        for child in (left[node], right[node]):
            if feature[child] < 0 and (stats[child, SUM_WT] <= 0.0 or stats[child, SUM_WC] <= 0.0):
                bad = True
        if bad:
            feature[node] = -1
    root_ok = True
    if feature[0] < 0 and (stats[0, SUM_WT] <= 0.0 or stats[0, SUM_WC] <= 0.0):
        root_ok = False
    return feature, root_ok


@nb.njit(cache=True)
def compact(feature, threshold, left, right, stats):
    """Renumber the nodes reachable from the root in depth-first order."""
    n = feature.shape[0]
    new_id = np.full(n, -1, np.int64)
    order = np.empty(n, np.int64)
    stack = np.empty(n, np.int64)
    stack[0] = 0
    sp = 1
    count = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        new_id[node] = count
        order[count] = node
        count += 1
        if feature[node] >= 0:
            stack[sp] = right[node]
            stack[sp + 1] = left[node]
            sp += 2
    f_out = np.empty(count, np.int64)
    t_out = np.zeros(count)
    l_out = np.full(count, -1, np.int64)
    r_out = np.full(count, -1, np.int64)
    s_out = np.zeros((count, 4))
    v_out = np.zeros(count)
    for i in range(count):
        node = order[i]
        f_out[i] = feature[node]
        s_out[i] = stats[node]
        if feature[node] >= 0:
            t_out[i] = threshold[node]
            l_out[i] = new_id[left[node]]
            r_out[i] = new_id[right[node]]
        else:
            v_out[i] = stats[node, SUM_WTY] / stats[node, SUM_WT] - stats[node, SUM_WCY] / stats[node, SUM_WC]
    return f_out, t_out, l_out, r_out, s_out, v_out


@nb.njit(cache=True)
def predict(feature, threshold, left, right, value, roots, X):
    n = X.shape[0]
    T = roots.shape[0]
    out = np.zeros(n)
    for t in range(T):
        root = roots[t]
        for i in range(n):
            node = root
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] += value[node]
    return out / T


@nb.njit(cache=True)
def integrate_shared(feature, threshold, left, right, value, roots, ends, Xq, Xd, k):
    """Average the forest over a shared set of draws for the trailing features.

    Features ``< k`` are read from the query rows ``Xq``; features ``>= k``
    from the draw rows ``Xd`` (column ``f - k``). For each query the result
    equals ``mean_d forest([xq, xd])`` but costs one pass over the draws and
    one over the queries per tree: each leaf is weighted by the share of
    draws that satisfy its constraints on the trailing features.
    """
    Q = Xq.shape[0]
    D = Xd.shape[0]
    T = roots.shape[0]
    out = np.zeros(Q)
    hits = np.zeros(feature.shape[0])
    stack = np.empty(feature.shape[0], np.int64)
    for t in range(T):
        root = roots[t]
        for i in range(root, ends[t]):
            hits[i] = 0.0
        for dd in range(D):
            stack[0] = root
            sp = 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                f = feature[node]
                if f < 0:
                    hits[node] += 1.0
                elif f >= k:
                    if Xd[dd, f - k] < threshold[node]:
                        stack[sp] = left[node]
                    else:
                        stack[sp] = right[node]
                    sp += 1
                else:
                    stack[sp] = left[node]
                    stack[sp + 1] = right[node]
                    sp += 2
        for q in range(Q):
            acc = 0.0
            stack[0] = root
            sp = 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                f = feature[node]
                if f < 0:
                    acc += value[node] * hits[node]
                elif f < k:
                    if Xq[q, f] < threshold[node]:
                        stack[sp] = left[node]
                    else:
                        stack[sp] = right[node]
                    sp += 1
                else:
                    stack[sp] = left[node]
                    stack[sp + 1] = right[node]
                    sp += 2
            out[q] += acc / D
    return out / T


@nb.njit(cache=True)
def integrate_pairs(feature, threshold, left, right, value, roots, Xq, Xc, idx, wts, k):
    """Per-query weighted average ``sum_j wts[q, j] * forest([xq, Xc[idx[q, j]]])``."""
    Q, J = idx.shape
    T = roots.shape[0]
    out = np.zeros(Q)
    for q in range(Q):
        total = 0.0
        for j in range(J):
            w = wts[q, j]
            if w == 0.0:
                continue
            c = idx[q, j]
            acc = 0.0
            for t in range(T):
                node = roots[t]
                while feature[node] >= 0:
                    f = feature[node]
                    if f < k:
                        x = Xq[q, f]
                    else:
                        x = Xc[c, f - k]
                    if x < threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                acc += value[node]
            total += w * acc / T
        out[q] = total
    return out

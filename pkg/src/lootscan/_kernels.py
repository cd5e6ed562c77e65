"""Hot numeric kernels, each with a numba @njit build and a pure-numpy twin.

The active implementation is chosen once at import time: numba when it is
importable and ``LOOTSCAN_DISABLE_NUMBA`` is unset/0, numpy otherwise.
Both twins stay importable so ``benchmarks/bench_kernels.py`` can race them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = _HAVE_NUMBA and os.environ.get("LOOTSCAN_DISABLE_NUMBA", "0").lower() not in (
    "1",
    "true",
    "yes",
)


# ---------------------------------------------------------------------------
# GLCM pair counting


def glcm_counts_numpy(levels, valid, dr, dc, n_levels):
    """Symmetric co-occurrence counts for one displacement (dr, dc).

    Counts ordered pairs (p, p+offset) with both pixels valid, incrementing
    both (a, b) and (b, a).
    """
    h, w = levels.shape
    r0, r1 = max(0, -dr), h - max(0, dr)
    c0, c1 = max(0, -dc), w - max(0, dc)
    if r0 >= r1 or c0 >= c1:
        return np.zeros((n_levels, n_levels), dtype=np.float64)
    a = levels[r0:r1, c0:c1]
    b = levels[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    both = valid[r0:r1, c0:c1] & valid[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    idx = a[both].astype(np.int64) * n_levels + b[both]
    counts = np.bincount(idx, minlength=n_levels * n_levels).reshape(n_levels, n_levels)
    counts = counts + counts.T
    return counts.astype(np.float64)


@njit(cache=True)
def glcm_counts_numba(levels, valid, dr, dc, n_levels):
    h, w = levels.shape
    counts = np.zeros((n_levels, n_levels), dtype=np.float64)
    for r in range(h):
        r2 = r + dr
        if r2 < 0 or r2 >= h:
            continue
        for c in range(w):
            c2 = c + dc
            if c2 < 0 or c2 >= w:
                continue
            if valid[r, c] and valid[r2, c2]:
                a = levels[r, c]
                b = levels[r2, c2]
                counts[a, b] += 1.0
                counts[b, a] += 1.0
    return counts


# ---------------------------------------------------------------------------
# LBP code histogram

# neighbor order: clockwise starting east, in image coordinates (row grows down)
_LBP_DR = np.array([0, 1, 1, 1, 0, -1, -1, -1], dtype=np.int64)
_LBP_DC = np.array([1, 1, 0, -1, -1, -1, 0, 1], dtype=np.int64)


def lbp_histogram_numpy(band, mask):
    """256-bin code counts over pixels whose full 8-neighborhood is masked.

    Returns (histogram, eligible_count).
    """
    m = mask.astype(bool)
    center = band[1:-1, 1:-1]
    eligible = m[1:-1, 1:-1].copy()
    for k in range(8):
        dr, dc = int(_LBP_DR[k]), int(_LBP_DC[k])
        eligible &= m[1 + dr : band.shape[0] - 1 + dr, 1 + dc : band.shape[1] - 1 + dc]
    code = np.zeros(center.shape, dtype=np.int64)
    for k in range(8):
        dr, dc = int(_LBP_DR[k]), int(_LBP_DC[k])
        nb = band[1 + dr : band.shape[0] - 1 + dr, 1 + dc : band.shape[1] - 1 + dc]
        code += (nb >= center).astype(np.int64) << k
    hist = np.bincount(code[eligible], minlength=256).astype(np.float64)
    return hist, int(eligible.sum())


@njit(cache=True)
def lbp_histogram_numba(band, mask):
    h, w = band.shape
    hist = np.zeros(256, dtype=np.float64)
    n = 0
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            if not mask[r, c]:
                continue
            ok = True
            for k in range(8):
                if not mask[r + _LBP_DR[k], c + _LBP_DC[k]]:
                    ok = False
                    break
            if not ok:
                continue
            center = band[r, c]
            code = 0
            for k in range(8):
                if band[r + _LBP_DR[k], c + _LBP_DC[k]] >= center:
                    code |= 1 << k
            hist[code] += 1.0
            n += 1
    return hist, n


# ---------------------------------------------------------------------------
# Sobel gradient magnitude (interior pixels; border row/col left at zero)


def sobel_magnitude_numpy(band):
    h, w = band.shape
    out = np.zeros((h, w), dtype=np.float64)
    p = band
    gx = (
        (p[:-2, 2:] - p[:-2, :-2])
        + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2])
        + (p[2:, 2:] - p[2:, :-2])
    )
    gy = (
        (p[2:, :-2] - p[:-2, :-2])
        + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1])
        + (p[2:, 2:] - p[:-2, 2:])
    )
    out[1:-1, 1:-1] = np.hypot(gx, gy)
    return out


@njit(cache=True)
def sobel_magnitude_numba(band):
    h, w = band.shape
    out = np.zeros((h, w), dtype=np.float64)
    for r in range(1, h - 1):
        for c in range(1, w - 1):
            gx = (
                band[r - 1, c + 1]
                - band[r - 1, c - 1]
                + 2.0 * (band[r, c + 1] - band[r, c - 1])
                + band[r + 1, c + 1]
                - band[r + 1, c - 1]
            )
            gy = (
                band[r + 1, c - 1]
                - band[r - 1, c - 1]
                + 2.0 * (band[r + 1, c] - band[r - 1, c])
                + band[r + 1, c + 1]
                - band[r - 1, c + 1]
            )
            out[r, c] = np.sqrt(gx * gx + gy * gy)
    return out


# ---------------------------------------------------------------------------
# CART split search
#
# All three searchers share conventions: `values` holds the node's rows for the
# candidate features, columns ordered by ascending global feature index; the
# return is (col, threshold, gain) with col == -1 when no split improves.
# Ties resolve to the earliest column, then the lowest threshold, via strict
# greater-than comparisons while scanning ascending.


def split_gini_numpy(values, w1, w0):
    n, m = values.shape
    tot1 = float(w1.sum())
    tot0 = float(w0.sum())
    tot = tot1 + tot0
    parent = tot - (tot1 * tot1 + tot0 * tot0) / tot
    best_col, best_thr, best_gain = -1, 0.0, 0.0
    for j in range(m):
        order = np.argsort(values[:, j])
        v = values[order, j]
        c1 = np.cumsum(w1[order])
        c0 = np.cumsum(w0[order])
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if cut.size == 0:
            continue
        l1, l0 = c1[cut], c0[cut]
        lw = l1 + l0
        r1, r0 = tot1 - l1, tot0 - l0
        rw = tot - lw
        child = (lw - (l1 * l1 + l0 * l0) / lw) + (rw - (r1 * r1 + r0 * r0) / rw)
        gain = parent - child
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_col, best_gain = j, float(gain[i])
            best_thr = float(0.5 * (v[cut[i]] + v[cut[i] + 1]))
    return best_col, best_thr, best_gain


@njit(cache=True)
def split_gini_numba(values, w1, w0):
    n, m = values.shape
    tot1 = 0.0
    tot0 = 0.0
    for i in range(n):
        tot1 += w1[i]
        tot0 += w0[i]
    tot = tot1 + tot0
    parent = tot - (tot1 * tot1 + tot0 * tot0) / tot
    best_col = -1
    best_thr = 0.0
    best_gain = 0.0
    col = np.empty(n, dtype=np.float64)
    for j in range(m):
        for i in range(n):
            col[i] = values[i, j]
        order = np.argsort(col)
        l1 = 0.0
        l0 = 0.0
        for i in range(n - 1):
            o = order[i]
            l1 += w1[o]
            l0 += w0[o]
            vi = col[o]
            vn = col[order[i + 1]]
            if vi >= vn:
                continue
            lw = l1 + l0
            r1 = tot1 - l1
            r0 = tot0 - l0
            rw = tot - lw
            child = (lw - (l1 * l1 + l0 * l0) / lw) + (rw - (r1 * r1 + r0 * r0) / rw)
            gain = parent - child
            if gain > best_gain:
                best_col = j
                best_gain = gain
                best_thr = 0.5 * (vi + vn)
    return best_col, best_thr, best_gain


def split_grad_numpy(values, grad, hess, lam):
    """Second-order gain search: 0.5 * (GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam))."""
    n, m = values.shape
    g_tot = float(grad.sum())
    h_tot = float(hess.sum())
    parent = g_tot * g_tot / (h_tot + lam)
    best_col, best_thr, best_gain = -1, 0.0, 0.0
    for j in range(m):
        order = np.argsort(values[:, j])
        v = values[order, j]
        cg = np.cumsum(grad[order])
        ch = np.cumsum(hess[order])
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if cut.size == 0:
            continue
        gl, hl = cg[cut], ch[cut]
        gr, hr = g_tot - gl, h_tot - hl
        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_col, best_gain = j, float(gain[i])
            best_thr = float(0.5 * (v[cut[i]] + v[cut[i] + 1]))
    return best_col, best_thr, best_gain


@njit(cache=True)
def split_grad_numba(values, grad, hess, lam):
    n, m = values.shape
    g_tot = 0.0
    h_tot = 0.0
    for i in range(n):
        g_tot += grad[i]
        h_tot += hess[i]
    parent = g_tot * g_tot / (h_tot + lam)
    best_col = -1
    best_thr = 0.0
    best_gain = 0.0
    col = np.empty(n, dtype=np.float64)
    for j in range(m):
        for i in range(n):
            col[i] = values[i, j]
        order = np.argsort(col)
        gl = 0.0
        hl = 0.0
        for i in range(n - 1):
            o = order[i]
            gl += grad[o]
            hl += hess[o]
            vi = col[o]
            vn = col[order[i + 1]]
            if vi >= vn:
                continue
            gr = g_tot - gl
            hr = h_tot - hl
            gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
            if gain > best_gain:
                best_col = j
                best_gain = gain
                best_thr = 0.5 * (vi + vn)
    return best_col, best_thr, best_gain


def split_mse_numpy(values, target, weight):
    """Weighted squared-error reduction: SL^2/WL + SR^2/WR - S^2/W."""
    n, m = values.shape
    s_tot = float((weight * target).sum())
    w_tot = float(weight.sum())
    parent = s_tot * s_tot / w_tot
    best_col, best_thr, best_gain = -1, 0.0, 0.0
    for j in range(m):
        order = np.argsort(values[:, j])
        v = values[order, j]
        cs = np.cumsum((weight * target)[order])
        cw = np.cumsum(weight[order])
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if cut.size == 0:
            continue
        sl, wl = cs[cut], cw[cut]
        sr, wr = s_tot - sl, w_tot - wl
        gain = sl * sl / wl + sr * sr / wr - parent
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_col, best_gain = j, float(gain[i])
            best_thr = float(0.5 * (v[cut[i]] + v[cut[i] + 1]))
    return best_col, best_thr, best_gain


@njit(cache=True)
def split_mse_numba(values, target, weight):
    n, m = values.shape
    s_tot = 0.0
    w_tot = 0.0
    for i in range(n):
        s_tot += weight[i] * target[i]
        w_tot += weight[i]
    parent = s_tot * s_tot / w_tot
    best_col = -1
    best_thr = 0.0
    best_gain = 0.0
    col = np.empty(n, dtype=np.float64)
    for j in range(m):
        for i in range(n):
            col[i] = values[i, j]
        order = np.argsort(col)
        sl = 0.0
        wl = 0.0
        for i in range(n - 1):
            o = order[i]
            sl += weight[o] * target[o]
            wl += weight[o]
            vi = col[o]
            vn = col[order[i + 1]]
            if vi >= vn:
                continue
            sr = s_tot - sl
            wr = w_tot - wl
            gain = sl * sl / wl + sr * sr / wr - parent
            if gain > best_gain:
                best_col = j
                best_gain = gain
                best_thr = 0.5 * (vi + vn)
    return best_col, best_thr, best_gain


# ---------------------------------------------------------------------------
# Flattened-ensemble prediction
#
# Trees are concatenated into flat arrays; `offsets[t]` is tree t's root index.
# Internal nodes have feature >= 0 and route x[feature] <= threshold left.
# Leaves have feature == -1 and carry an (already learning-rate-scaled) value.


def ensemble_sum_numpy(feature, threshold, left, right, value, offsets, x_mat):
    n = x_mat.shape[0]
    out = np.zeros(n, dtype=np.float64)
    rows = np.arange(n)
    for t in range(offsets.shape[0]):
        idx = np.full(n, offsets[t], dtype=np.int64)
        active = feature[idx] >= 0
        while active.any():
            cur = idx[active]
            f = feature[cur]
            go_left = x_mat[rows[active], f] <= threshold[cur]
            idx[active] = np.where(go_left, left[cur], right[cur])
            active = feature[idx] >= 0
        out += value[idx]
    return out


@njit(cache=True)
def ensemble_sum_numba(feature, threshold, left, right, value, offsets, x_mat):
    n = x_mat.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for t in range(offsets.shape[0]):
            node = offsets[t]
            while feature[node] >= 0:
                if x_mat[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# Shapley coalition values
#
# For every feature subset S (bit b of `subset_bits[s]` says feature b comes
# from the instance), evaluate the ensemble on hybrid rows built from each
# background row and average: v(S) = mean_b f(hybrid(S, b)).


def shap_coalition_values_numpy(
    feature, threshold, left, right, value, offsets, instance, background, subset_bits
):
    n_subsets = subset_bits.shape[0]
    out = np.empty(n_subsets, dtype=np.float64)
    for s in range(n_subsets):
        take = subset_bits[s].astype(bool)
        hybrid = np.where(take[None, :], instance[None, :], background)
        out[s] = ensemble_sum_numpy(
            feature, threshold, left, right, value, offsets, hybrid
        ).mean()
    return out


@njit(cache=True)
def shap_coalition_values_numba(
    feature, threshold, left, right, value, offsets, instance, background, subset_bits
):
    n_subsets = subset_bits.shape[0]
    n_bg = background.shape[0]
    k = instance.shape[0]
    out = np.empty(n_subsets, dtype=np.float64)
    hybrid = np.empty(k, dtype=np.float64)
    for s in range(n_subsets):
        acc = 0.0
        for b in range(n_bg):
            for j in range(k):
                if subset_bits[s, j]:
                    hybrid[j] = instance[j]
                else:
                    hybrid[j] = background[b, j]
            for t in range(offsets.shape[0]):
                node = offsets[t]
                while feature[node] >= 0:
                    if hybrid[feature[node]] <= threshold[node]:
                        node = left[node]
                    else:
                        node = right[node]
                acc += value[node]
        out[s] = acc / n_bg
    return out


# ---------------------------------------------------------------------------
# Active bindings

if USE_NUMBA:
    glcm_counts = glcm_counts_numba
    lbp_histogram = lbp_histogram_numba
    sobel_magnitude = sobel_magnitude_numba
    split_gini = split_gini_numba
    split_grad = split_grad_numba
    split_mse = split_mse_numba
    ensemble_sum = ensemble_sum_numba
    shap_coalition_values = shap_coalition_values_numba
else:
    glcm_counts = glcm_counts_numpy
    lbp_histogram = lbp_histogram_numpy
    sobel_magnitude = sobel_magnitude_numpy
    split_gini = split_gini_numpy
    split_mse = split_mse_numpy
    split_grad = split_grad_numpy
    ensemble_sum = ensemble_sum_numpy
    shap_coalition_values = shap_coalition_values_numpy

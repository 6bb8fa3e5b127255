"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``im2col``, ``col2im``, ``zhang_suen``, ``label8``,
``chessboard_distance``, ``grow_regions``, ``adam_update``) dispatch to the numba flavour
unless ``MGMICRO_DISABLE_NUMBA`` is set.  Both flavours produce bit-identical
results; col2im accumulates kernel offsets in the same order in both.
"""
from collections import deque

import numpy as np
from scipy import ndimage

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# im2col / col2im
#
# cols layout: (C, kh*kw, N, Ho, Wo) so that a grouped convolution is one
# batched matmul of (G, Og, Cg*kh*kw) @ (G, Cg*kh*kw, N*Ho*Wo).
# ---------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((c, kh * kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            patch = xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                       c0:c0 + stride * (wo - 1) + 1:stride]
            cols[:, i * kw + j] = patch.transpose(1, 0, 2, 3)
    return cols


def col2im_numpy(cols, n, c, hp, wp, kh, kw, stride, dilation):
    ho, wo = cols.shape[3], cols.shape[4]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, i * kw + j].transpose(1, 0, 2, 3)
    return out


@njit
def im2col_numba(xp, kh, kw, stride, dilation, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, kh * kw, n, ho, wo), dtype=xp.dtype)
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                k = i * kw + j
                for b in range(n):
                    for y in range(ho):
                        r = y * stride + i * dilation
                        for x in range(wo):
                            cols[ch, k, b, y, x] = xp[b, ch, r, x * stride + j * dilation]
    return cols


@njit
def col2im_numba(cols, n, c, hp, wp, kh, kw, stride, dilation):
    ho, wo = cols.shape[3], cols.shape[4]
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # offset loops outermost: same accumulation order as the numpy flavour
    for i in range(kh):
        for j in range(kw):
            k = i * kw + j
            for b in range(n):
                for ch in range(c):
                    for y in range(ho):
                        r = y * stride + i * dilation
                        for x in range(wo):
                            out[b, ch, r, x * stride + j * dilation] += cols[ch, k, b, y, x]
    return out


# ---------------------------------------------------------------------------
# Zhang-Suen thinning
# ---------------------------------------------------------------------------


def _zs_neighbours(p):
    # P2..P9 clockwise starting north, on a zero-padded array
    return (p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
            p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2])


def zhang_suen_numpy(mask):
    img = np.ascontiguousarray(mask, dtype=np.uint8).copy()
    while True:
        changed = False
        for step in (0, 1):
            p = np.pad(img, 1)
            nb = _zs_neighbours(p)
            b = sum(v.astype(np.int32) for v in nb)
            a = np.zeros_like(b)
            for k in range(8):
                a += (nb[k] == 0) & (nb[(k + 1) % 8] == 1)
            p2, p3, p4, p5, p6, p7, p8, p9 = nb
            if step == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            kill = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if kill.any():
                img[kill] = 0
                changed = True
        if not changed:
            return img.astype(bool)


@njit
def zhang_suen_numba(mask):
    h, w = mask.shape
    img = np.zeros((h + 2, w + 2), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            img[r + 1, c + 1] = 1 if mask[r, c] else 0
    dr = np.array([-1, -1, 0, 1, 1, 1, 0, -1])
    dc = np.array([0, 1, 1, 1, 0, -1, -1, -1])
    kill = np.zeros((h + 2, w + 2), dtype=np.uint8)
    nb = np.zeros(8, dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for step in range(2):
            kill[:, :] = 0
            for r in range(1, h + 1):
                for c in range(1, w + 1):
                    if img[r, c] == 0:
                        continue
                    b = 0
                    for k in range(8):
                        nb[k] = img[r + dr[k], c + dc[k]]
                        b += nb[k]
                    if b < 2 or b > 6:
                        continue
                    a = 0
                    for k in range(8):
                        if nb[k] == 0 and nb[(k + 1) % 8] == 1:
                            a += 1
                    if a != 1:
                        continue
                    p2, p4, p6, p8 = nb[0], nb[2], nb[4], nb[6]
                    if step == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if ok:
                        kill[r, c] = 1
            for r in range(1, h + 1):
                for c in range(1, w + 1):
                    if kill[r, c]:
                        img[r, c] = 0
                        changed = True
    out = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            out[r, c] = img[r + 1, c + 1] == 1
    return out


# ---------------------------------------------------------------------------
# 8-connected component labelling, labels numbered in raster order of the
# first pixel of each component
# ---------------------------------------------------------------------------


def label8_numpy(mask):
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return lab.astype(np.int32), 0
    # force raster-order numbering regardless of scipy internals
    flat = lab.ravel()
    nz = flat[flat > 0]
    _, first = np.unique(nz, return_index=True)
    order = np.unique(nz)[np.argsort(first)]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order] = np.arange(1, n + 1, dtype=np.int32)
    return remap[lab].astype(np.int32), int(n)


@njit
def _find(parent, x):
    root = x
    while parent[root] != root:
        root = parent[root]
    while parent[x] != root:
        nxt = parent[x]
        parent[x] = root
        x = nxt
    return root


@njit
def _label8_kernel(mask):
    h, w = mask.shape
    lab = np.zeros((h, w), dtype=np.int32)
    parent = np.zeros(h * w + 1, dtype=np.int32)
    nxt = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            best = 0
            # previously visited neighbours: W, NW, N, NE
            for k in range(4):
                if k == 0:
                    rr, cc = r, c - 1
                elif k == 1:
                    rr, cc = r - 1, c - 1
                elif k == 2:
                    rr, cc = r - 1, c
                else:
                    rr, cc = r - 1, c + 1
                if rr < 0 or cc < 0 or cc >= w:
                    continue
                l2 = lab[rr, cc]
                if l2 == 0:
                    continue
                if best == 0:
                    best = l2
                else:
                    ra = _find(parent, best)
                    rb = _find(parent, l2)
                    if ra != rb:
                        if ra < rb:
                            parent[rb] = ra
                        else:
                            parent[ra] = rb
            if best == 0:
                parent[nxt] = nxt
                lab[r, c] = nxt
                nxt += 1
            else:
                lab[r, c] = best
    remap = np.zeros(nxt, dtype=np.int32)
    count = 0
    for r in range(h):
        for c in range(w):
            l0 = lab[r, c]
            if l0 == 0:
                continue
            root = _find(parent, l0)
            if remap[root] == 0:
                count += 1
                remap[root] = count
            lab[r, c] = remap[root]
    return lab, count


def label8_numba(mask):
    lab, n = _label8_kernel(np.ascontiguousarray(mask, dtype=np.bool_))
    return lab, int(n)


# ---------------------------------------------------------------------------
# Chessboard (Chebyshev) distance to the nearest on-pixel
# ---------------------------------------------------------------------------

FAR = np.iinfo(np.int32).max // 2


def chessboard_distance_numpy(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, FAR, dtype=np.int32)
    return ndimage.distance_transform_cdt(~mask, metric="chessboard").astype(np.int32)


@njit
def _chessboard_kernel(mask, far):
    h, w = mask.shape
    d = np.empty((h, w), dtype=np.int32)
    for r in range(h):
        for c in range(w):
            d[r, c] = 0 if mask[r, c] else far
    for r in range(h):
        for c in range(w):
            v = d[r, c]
            if r > 0:
                v = min(v, d[r - 1, c] + 1)
                if c > 0:
                    v = min(v, d[r - 1, c - 1] + 1)
                if c < w - 1:
                    v = min(v, d[r - 1, c + 1] + 1)
            if c > 0:
                v = min(v, d[r, c - 1] + 1)
            d[r, c] = v
    for r in range(h - 1, -1, -1):
        for c in range(w - 1, -1, -1):
            v = d[r, c]
            if r < h - 1:
                v = min(v, d[r + 1, c] + 1)
                if c > 0:
                    v = min(v, d[r + 1, c - 1] + 1)
                if c < w - 1:
                    v = min(v, d[r + 1, c + 1] + 1)
            if c < w - 1:
                v = min(v, d[r, c + 1] + 1)
            d[r, c] = v
    return d


def chessboard_distance_numba(mask):
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if not mask.any():
        return np.full(mask.shape, FAR, dtype=np.int32)
    return _chessboard_kernel(mask, FAR)


# ---------------------------------------------------------------------------
# Region growing from labelled seeds with a running-mean intensity criterion.
# Regions grow one after another in label order; a FIFO queue seeded with
# the region's pixels in raster order fixes the visiting order.
# ---------------------------------------------------------------------------

_DR = (-1, -1, -1, 0, 0, 1, 1, 1)
_DC = (-1, 0, 1, -1, 1, -1, 0, 1)


def grow_regions_numpy(labels, n_labels, image, tol):
    h, w = labels.shape
    out = labels.copy()
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(1, n_labels + 2))
    for lab in range(1, n_labels + 1):
        seeds = order[starts[lab - 1]:starts[lab]]
        total = 0.0
        for s in seeds:  # sequential sum, matches the numba flavour bit for bit
            total += image.flat[s]
        count = len(seeds)
        queue = deque(int(s) for s in seeds)
        while queue:
            p = queue.popleft()
            r, c = divmod(p, w)
            for k in range(8):
                rr, cc = r + _DR[k], c + _DC[k]
                if rr < 0 or cc < 0 or rr >= h or cc >= w or out[rr, cc] != 0:
                    continue
                v = image[rr, cc]
                if abs(v - total / count) <= tol:
                    out[rr, cc] = lab
                    total += v
                    count += 1
                    queue.append(rr * w + cc)
    return out


@njit
def _grow_kernel(labels, n_labels, image, tol):
    h, w = labels.shape
    out = labels.copy()
    # bucket seeds by label, raster order inside each bucket
    counts = np.zeros(n_labels + 2, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            counts[labels[r, c] + 1] += 1
    starts = np.cumsum(counts)
    fill = starts.copy()
    order = np.empty(h * w, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            lab = labels[r, c]
            order[fill[lab]] = r * w + c
            fill[lab] += 1
    queue = np.empty(h * w, dtype=np.int64)
    for lab in range(1, n_labels + 1):
        head = 0
        tail = 0
        total = 0.0
        count = 0
        for q in range(starts[lab], starts[lab + 1]):
            p = order[q]
            total += image[p // w, p % w]
            count += 1
            queue[tail] = p
            tail += 1
        while head < tail:
            p = queue[head]
            head += 1
            r = p // w
            c = p % w
            for k in range(8):
                if k == 0:
                    rr, cc = r - 1, c - 1
                elif k == 1:
                    rr, cc = r - 1, c
                elif k == 2:
                    rr, cc = r - 1, c + 1
                elif k == 3:
                    rr, cc = r, c - 1
                elif k == 4:
                    rr, cc = r, c + 1
                elif k == 5:
                    rr, cc = r + 1, c - 1
                elif k == 6:
                    rr, cc = r + 1, c
                else:
                    rr, cc = r + 1, c + 1
                if rr < 0 or cc < 0 or rr >= h or cc >= w or out[rr, cc] != 0:
                    continue
                v = image[rr, cc]
                if abs(v - total / count) <= tol:
                    out[rr, cc] = lab
                    total += v
                    count += 1
                    queue[tail] = rr * w + cc
                    tail += 1
    return out


def grow_regions_numba(labels, n_labels, image, tol):
    return _grow_kernel(np.ascontiguousarray(labels, dtype=np.int32), int(n_labels),
                        np.ascontiguousarray(image, dtype=np.float64), float(tol))


# ---------------------------------------------------------------------------
# Adam update over flat buffers (in place)
# ---------------------------------------------------------------------------


def adam_update_numpy(p, m, v, g, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v / c2)
    denom += eps
    p -= ((lr / c1) * m) / denom


@njit
def _adam_kernel(p, m, v, g, lr, beta1, beta2, c1, c2, eps):
    a = 1.0 - beta1
    b = 1.0 - beta2
    step = lr / c1
    for i in range(p.size):
        mi = m[i] * beta1 + a * g[i]
        vi = v[i] * beta2 + b * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        p[i] -= (step * mi) / (np.sqrt(vi / c2) + eps)


def adam_update_numba(p, m, v, g, lr, beta1, beta2, c1, c2, eps):
    _adam_kernel(p, m, v, np.ascontiguousarray(g, dtype=np.float64), float(lr), float(beta1),
                 float(beta2), float(c1), float(c2), float(eps))


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    zhang_suen = zhang_suen_numba
    label8 = label8_numba
    chessboard_distance = chessboard_distance_numba
    grow_regions = grow_regions_numba
    adam_update = adam_update_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    zhang_suen = zhang_suen_numpy
    label8 = label8_numpy
    chessboard_distance = chessboard_distance_numpy
    grow_regions = grow_regions_numpy
    adam_update = adam_update_numpy

"""Edge repair: patch broken grain boundaries with image-gradient evidence.

The detector output is thresholded and united with a Sobel/Otsu gradient
mask, small debris is removed, the result is closed and thinned, region
growing sorts the remaining pieces into boundary lines and noise blobs, and a
final thinning pass leaves a one-pixel boundary network.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels

FULL3 = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# gradient mask
# ---------------------------------------------------------------------------


def sobel_magnitude(image):
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def otsu_threshold(values, bins=256):
    """Otsu threshold of ``values`` over a ``bins``-bin histogram on [min, max].

    Returns the upper edge of the last bin in the lower class; values strictly
    above it form the upper class.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    m1 = np.divide(s0[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    between[-1] = -1.0
    k = int(np.argmax(between))
    return float(edges[k + 1])


def gradient_mask(image):
    """Sobel gradient magnitude thresholded by Otsu's criterion."""
    mag = sobel_magnitude(image)
    if mag.max() <= 1e-12:
        return np.zeros(mag.shape, dtype=bool)
    return mag > otsu_threshold(mag)


def combine(edge_prob, mask, threshold=0.5):
    """Union of the thresholded edge map with a binary mask."""
    edge_prob = np.asarray(edge_prob, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if edge_prob.shape != mask.shape:
        raise ValueError(f"combine: size mismatch {edge_prob.shape} vs {mask.shape}")
    return (edge_prob >= threshold) | mask


# ---------------------------------------------------------------------------
# components
# ---------------------------------------------------------------------------


def remove_small(mask, min_area_px, link_px=0):
    """Erase 8-connected components with fewer than ``min_area_px`` pixels.

    With ``link_px > 0`` pieces separated by gaps of up to ``2 * link_px``
    pixels count as one component; only the mask's own pixels are counted.
    """
    if min_area_px < 0:
        raise ValueError("min_area_px must be >= 0")
    if link_px < 0:
        raise ValueError("link_px must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    grouped = mask
    for _ in range(link_px):
        grouped = dilate(grouped)
    labels, n = kernels.label8(grouped)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(labels[mask], minlength=n + 1)
    keep = sizes >= min_area_px
    keep[0] = False
    return keep[labels] & mask


def region_grow(mask, image, similarity_tol=0.15, max_fill_ratio=0.5, min_blob_side=4):
    """Grow every seed component over similar-intensity 8-neighbours.

    A neighbour joins a region when its intensity is within
    ``similarity_tol`` of the region's running mean.  A region that grew,
    whose bounding box is at least ``min_blob_side`` pixels in both
    directions and which fills more than ``max_fill_ratio`` of that box is a
    blob rather than a line and is dropped.  ``max_fill_ratio=None`` keeps
    every region.
    """
    if similarity_tol < 0:
        raise ValueError("similarity_tol must be >= 0")
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if img.shape != mask.shape:
        raise ValueError("region_grow: size mismatch")
    labels, n = kernels.label8(mask)
    if n == 0:
        return mask.copy()
    grown = kernels.grow_regions(labels, n, img, similarity_tol)
    if max_fill_ratio is None:
        return grown > 0
    seeds = np.bincount(labels.ravel(), minlength=n + 1)
    sizes = np.bincount(grown.ravel(), minlength=n + 1)
    keep = np.ones(n + 1, dtype=bool)
    keep[0] = False
    for lab, sl in enumerate(ndimage.find_objects(grown), start=1):
        if sl is None or sizes[lab] == seeds[lab]:
            continue
        bh = sl[0].stop - sl[0].start
        bw = sl[1].stop - sl[1].start
        if min(bh, bw) >= min_blob_side and sizes[lab] / (bh * bw) > max_fill_ratio:
            keep[lab] = False
    return keep[grown]


# ---------------------------------------------------------------------------
# morphology
# ---------------------------------------------------------------------------


def _shifts(se):
    se = np.asarray(se, dtype=bool)
    if se.shape != (3, 3):
        raise ValueError("structuring element must be 3x3")
    return [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if se[dr + 1, dc + 1]]


def dilate(mask, se=FULL3):
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    h, w = m.shape
    out = np.zeros_like(m)
    for dr, dc in _shifts(se):
        out |= p[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
    return out


def erode(mask, se=FULL3):
    # outside the image counts as on, so closing stays extensive at the border
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=True)
    h, w = m.shape
    out = np.ones_like(m)
    for dr, dc in _shifts(se):
        out &= p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    return out


def close(mask, se=FULL3):
    return erode(dilate(mask, se), se)


def _yokoi8(n):
    # 8-connectivity number on the complement; n = P2..P9 clockwise from north
    xb = [1 - v for v in n]
    total = 0
    for k in (0, 2, 4, 6):
        total += xb[k] - xb[k] * xb[(k + 1) % 8] * xb[(k + 2) % 8]
    return total


def _break_blocks(img):
    # delete simple pixels sitting in 2x2 all-on blocks, raster order
    h, w = img.shape
    changed = True
    while changed:
        changed = False
        blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
        if not blocks.any():
            break
        for r0, c0 in zip(*np.nonzero(blocks)):
            if not (img[r0, c0] and img[r0 + 1, c0] and img[r0, c0 + 1] and img[r0 + 1, c0 + 1]):
                continue
            for r, c in ((r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)):
                nb = [int(img[r + dr, c + dc]) if 0 <= r + dr < h and 0 <= c + dc < w else 0
                      for dr, dc in ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))]
                if sum(nb) >= 2 and _yokoi8(nb) == 1:
                    img[r, c] = False
                    changed = True
                    break
    return img


def _restore_lost(mask, out):
    # Zhang-Suen can peel a small blob away completely; keep its deepest pixel
    labels, n = kernels.label8(mask)
    if n == 0:
        return out
    alive = np.zeros(n + 1, dtype=bool)
    alive[labels[out]] = True
    lost = np.nonzero(~alive[1:])[0] + 1
    if lost.size == 0:
        return out
    depth = kernels.chessboard_distance(~np.pad(mask, 1))[1:-1, 1:-1]
    for lab in lost:
        pts = np.flatnonzero(labels == lab)
        out.flat[pts[np.argmax(depth.flat[pts])]] = True
    return out


def thin(mask):
    """Zhang-Suen thinning to a one-pixel, 8-connected skeleton.

    Every 8-connected component of ``mask`` keeps at least one pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    out = np.array(kernels.zhang_suen(mask), dtype=bool)
    return _break_blocks(_restore_lost(mask, out))


def morph(mask, op, kernel=FULL3):
    ops = {"dilate": dilate, "erode": erode, "close": close}
    if op == "thin":
        return thin(mask)
    if op not in ops:
        raise ValueError(f"unknown morphology op {op!r}")
    return ops[op](mask, kernel)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class RepairParams:
    threshold: float = 0.5
    min_area_px: float = 30.0
    similarity_tol: float = 0.15
    max_fill_ratio: float = 0.5
    use_gradient: bool = True
    link_px: int = 1


def repair(image, edge_prob, params=None, grad_mask=None):
    """Repaired one-pixel boundary network from an edge probability map.

    Steps: union with the gradient mask, drop components below
    ``min_area_px``, close, thin, then region-grow every remaining piece and
    keep only the pieces whose growth stayed line-like.  The grown pixels
    themselves are not added back, so the output stays one pixel wide.
    ``grad_mask`` overrides the computed gradient mask.
    """
    prm = params or RepairParams()
    img = np.asarray(getattr(image, "values", image), dtype=np.float64)
    edge_prob = np.asarray(edge_prob, dtype=np.float64)
    if img.shape != edge_prob.shape:
        raise ValueError(f"repair: image {img.shape} and edge map {edge_prob.shape} differ")
    if grad_mask is None:
        grad_mask = gradient_mask(img) if prm.use_gradient else np.zeros(img.shape, dtype=bool)
    m = combine(edge_prob, grad_mask, prm.threshold)
    # a gradient trace along a faint line comes in short pieces; judge the
    # pieces as one component so they are not filtered away one by one
    m = remove_small(close(m), prm.min_area_px, prm.link_px)
    m = thin(m)
    keep = region_grow(m, img, prm.similarity_tol, prm.max_fill_ratio)
    return thin(m & keep)

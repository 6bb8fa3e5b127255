"""Border following on binary images (Suzuki & Abe topological tracing).

Foreground is 8-connected, background 4-connected.  Every border comes back
as a :class:`Contour` with its pixels in tracing order, whether it is a hole
border, and the index of its parent border.
"""
from dataclasses import dataclass

import numpy as np

# clockwise neighbour order with rows growing downward, starting east
_NB = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))
_NB_INDEX = {d: k for k, d in enumerate(_NB)}


@dataclass
class Contour:
    pixels: list
    is_hole: bool
    parent: int  # index into the contour list, -1 for the image frame
    enclosed_area_px: float = 0.0

    def __len__(self):
        return len(self.pixels)

    @property
    def start(self):
        return self.pixels[0]


def shoelace_area(pixels):
    """Polygon area through the pixel centres (0 for fewer than 3 points)."""
    if len(pixels) < 3:
        return 0.0
    p = np.asarray(pixels, dtype=np.float64)
    r, c = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(c, np.roll(r, -1)) - np.dot(r, np.roll(c, -1))))


def trace_contours(mask):
    """All outer and hole borders of ``mask`` with their hierarchy."""
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    f = np.zeros((h + 2, w + 2), dtype=np.int64)
    f[1:-1, 1:-1] = m
    # border 1 is the image frame, treated as a hole border
    kinds = {1: True}
    parents = {1: 0}
    traced = {}
    nbd = 1
    for i in range(1, h + 1):
        lnbd = 1
        row = f[i]
        for j in range(1, w + 1):
            v = row[j]
            if v == 0:
                continue
            if v == 1 and row[j - 1] == 0:
                nbd += 1
                start_from = (i, j - 1)
                hole = False
            elif v >= 1 and row[j + 1] == 0:
                nbd += 1
                start_from = (i, j + 1)
                hole = True
                if v > 1:
                    lnbd = v
            else:
                if v != 1:
                    lnbd = abs(v)
                continue
            prev_hole = kinds[lnbd]
            if hole == prev_hole:
                parents[nbd] = parents[lnbd]
            else:
                parents[nbd] = lnbd
            kinds[nbd] = hole
            traced[nbd] = _follow(f, i, j, start_from, nbd)
            if f[i, j] != 1:
                lnbd = abs(f[i, j])
    out = []
    index = {}
    for label in sorted(traced):
        index[label] = len(out)
        pix = [(r - 1, c - 1) for r, c in traced[label]]
        out.append(Contour(pix, kinds[label], -1, shoelace_area(pix)))
    for label in sorted(traced):
        par = parents[label]
        out[index[label]].parent = index.get(par, -1)
    return out


def _follow(f, i, j, start_from, nbd):
    # (3.1) clockwise from start_from around (i, j) for a non-zero pixel
    k0 = _NB_INDEX[(start_from[0] - i, start_from[1] - j)]
    found = None
    for t in range(8):
        k = (k0 + t) % 8
        di, dj = _NB[k]
        if f[i + di, j + dj] != 0:
            found = (i + di, j + dj)
            break
    if found is None:
        f[i, j] = -nbd
        return [(i, j)]
    i1, j1 = found
    i2, j2 = i1, j1
    i3, j3 = i, j
    pixels = []
    while True:
        pixels.append((i3, j3))
        # (3.3) counter-clockwise from the element after (i2, j2)
        k = _NB_INDEX[(i2 - i3, j2 - j3)]
        east_zero_examined = False
        for t in range(1, 9):
            kk = (k - t) % 8
            di, dj = _NB[kk]
            if f[i3 + di, j3 + dj] != 0:
                i4, j4 = i3 + di, j3 + dj
                break
            if kk == 0:
                east_zero_examined = True
        # (3.4)
        if east_zero_examined:
            f[i3, j3] = -nbd
        elif f[i3, j3] == 1:
            f[i3, j3] = nbd
        # (3.5)
        if (i4, j4) == (i, j) and (i3, j3) == (i1, j1):
            return pixels
        i2, j2 = i3, j3
        i3, j3 = i4, j4

"""Microstructure measurements: linear-intercept size, phase fraction, ECD."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .contours import trace_contours

FEATURE_NAMES = ("gd_at_pct", "grain_size_um", "phase_area_fraction", "phase_ecd_um")


class MeasurementError(ValueError):
    """A measurement is undefined for the given input (e.g. no crossings)."""


@dataclass
class FeatureRow:
    gd_at_pct: float
    grain_size_um: float
    phase_area_fraction: float
    phase_ecd_um: float
    hv: float | None = None
    id: str = ""

    def __post_init__(self):
        if self.gd_at_pct < 0:
            raise ValueError("gd_at_pct must be >= 0")
        if not self.grain_size_um > 0:
            raise ValueError("grain_size_um must be > 0")
        if not 0.0 <= self.phase_area_fraction <= 1.0:
            raise ValueError("phase_area_fraction must lie in [0, 1]")
        if self.phase_ecd_um < 0:
            raise ValueError("phase_ecd_um must be >= 0")

    def vector(self):
        return np.array([self.gd_at_pct, self.grain_size_um, self.phase_area_fraction, self.phase_ecd_um])

    @property
    def labeled(self):
        return self.hv is not None


@dataclass
class InterceptSpec:
    n_h_lines: int = 10
    n_v_lines: int = 10
    margin_px: int = 0

    def __post_init__(self):
        if self.n_h_lines < 1 or self.n_v_lines < 1:
            raise ValueError("intercept line counts must be >= 1")
        if self.margin_px < 0:
            raise ValueError("margin_px must be >= 0")


def line_positions(size, n, margin=0):
    """``n`` evenly spaced line coordinates strictly inside [margin, size-1-margin]."""
    lo, hi = margin, size - 1 - margin
    if hi < lo:
        raise ValueError("margin leaves no room for test lines")
    return np.round(np.linspace(lo, hi, n + 2)[1:-1]).astype(int)


def count_runs(line):
    """Number of maximal runs of on-pixels in a 1-d boolean array."""
    a = np.asarray(line, dtype=np.int8)
    if a.size == 0:
        return 0
    return int(a[0] + np.count_nonzero(np.diff(a) == 1))


def intercept_counts(boundary, spec=None):
    """Total test-line length (px) and total crossings over the line grid."""
    spec = spec or InterceptSpec()
    b = np.asarray(boundary, dtype=bool)
    h, w = b.shape
    m = spec.margin_px
    total_len, total_n = 0, 0
    for r in line_positions(h, spec.n_h_lines, m):
        seg = b[r, m:w - m]
        total_len += seg.size
        total_n += count_runs(seg)
    for c in line_positions(w, spec.n_v_lines, m):
        seg = b[m:h - m, c]
        total_len += seg.size
        total_n += count_runs(seg)
    return total_len, total_n


def linear_intercept(boundary, spec=None, pixel_scale_um=1.0):
    """Mean intercept length sum(L) / sum(n) in micrometres.

    A contiguous run of boundary pixels along a line is one crossing, so a
    thick boundary is not counted twice.
    """
    if not pixel_scale_um > 0:
        raise ValueError("pixel_scale_um must be > 0")
    total_len, total_n = intercept_counts(boundary, spec)
    if total_n == 0:
        raise MeasurementError("linear intercept undefined: no test line crosses a boundary")
    return total_len / total_n * pixel_scale_um


def area_fraction(phase):
    p = np.asarray(phase, dtype=bool)
    return float(p.sum()) / p.size if p.size else 0.0


def ecd(area_px, pixel_scale_um=1.0):
    """Equivalent circle diameter 2*sqrt(A/pi) with A converted to um^2."""
    if area_px < 0:
        raise ValueError("area must be >= 0")
    return 2.0 * np.sqrt(area_px * pixel_scale_um ** 2 / np.pi)


@dataclass
class ParticleStats:
    mean_area_um2: float
    mean_ecd_um: float
    particle_count: int


def particle_areas(phase, exclude_edge=False):
    """Pixel count of every 8-connected particle, one per outer border."""
    p = np.asarray(phase, dtype=bool)
    labels, n = kernels.label8(p)
    if n == 0:
        return np.zeros(0)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    h, w = p.shape
    edge = set()
    if exclude_edge:
        edge = set(np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])).tolist())
    areas = []
    for c in trace_contours(p):
        if c.is_hole:
            continue
        lab = labels[c.start]
        if lab in edge:
            continue
        areas.append(sizes[lab])
    return np.asarray(areas, dtype=np.float64)


def phase_particle_stats(phase, pixel_scale_um=1.0, exclude_edge=False):
    areas = particle_areas(phase, exclude_edge)
    if areas.size == 0:
        return ParticleStats(0.0, 0.0, 0)
    s2 = pixel_scale_um ** 2
    return ParticleStats(float(areas.mean() * s2),
                         float(np.mean([ecd(a, pixel_scale_um) for a in areas])),
                         int(areas.size))


def assemble_features(gd_at_pct, boundary, phase, pixel_scale_um=1.0, hv=None,
                      spec=None, id="", exclude_edge=False):
    stats = phase_particle_stats(phase, pixel_scale_um, exclude_edge)
    return FeatureRow(gd_at_pct=float(gd_at_pct),
                      grain_size_um=linear_intercept(boundary, spec, pixel_scale_um),
                      phase_area_fraction=area_fraction(phase),
                      phase_ecd_um=stats.mean_ecd_um,
                      hv=None if hv is None else float(hv),
                      id=str(id))

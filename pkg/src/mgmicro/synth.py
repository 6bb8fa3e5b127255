"""Synthetic micrographs with exact ground truth.

Grains are Voronoi cells of well-spread random seeds.  Boundaries are drawn
as dark one-pixel lines, a chosen fraction of boundary segments is left out
of the picture (kept in the truth) to mimic weak boundaries, dark elliptical
particles sit on boundaries and inside grains, and straight scratches with
the particle intensity act as confusers.  Feature truth comes from the
generating geometry, not from measuring the rendered masks.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .features import FeatureRow, InterceptSpec, line_positions
from .imageio import GrayImage
from .params import make_rng
from .repair import thin


class GenerationError(RuntimeError):
    pass


HALL_PETCH = {"a": 25.0, "b": 18.0, "c": 30.0, "d": 40.0, "e": 0.5}
LINEAR = {"a": 30.0, "b": 18.0, "c": -0.05, "d": 40.0, "e": 0.5}
GD_RANGE = (0.08, 2.9)


def hardness(gd, grain_um, fraction, ecd_um, law="hall_petch", coef=None):
    """Noise-free synthetic Vickers hardness.

    hall_petch: a + b*Gd + c/sqrt(grain) + d*fraction + e*ecd
    linear:     a + b*Gd + c*grain + d*fraction + e*ecd
    """
    if law == "hall_petch":
        k = {**HALL_PETCH, **(coef or {})}
        size_term = k["c"] / np.sqrt(grain_um)
    elif law == "linear":
        k = {**LINEAR, **(coef or {})}
        size_term = k["c"] * grain_um
    else:
        raise ValueError(f"unknown hardness law {law!r}")
    return k["a"] + k["b"] * gd + size_term + k["d"] * fraction + k["e"] * ecd_um


@dataclass
class SynthSpec:
    height: int = 256
    width: int = 256
    n_grains: int = 30
    weak_boundary_fraction: float = 0.0
    particle_count: int = 50
    particle_radius: tuple = (2.5, 5.0)
    particle_on_boundary: float = 0.5
    scratch_count: int = 3
    scratch_length: tuple = (60.0, 160.0)
    scratch_width: float = 1.5
    noise_sigma: float = 0.02
    blur_sigma: float = 0.6
    pixel_scale_um: float = 1.0
    gd_at_pct: float = 1.0
    law: str = "hall_petch"
    seed: int = 0
    intercept: InterceptSpec = field(default_factory=InterceptSpec)

    def __post_init__(self):
        if isinstance(self.intercept, dict):
            self.intercept = InterceptSpec(**self.intercept)
        self.particle_radius = tuple(float(v) for v in self.particle_radius)
        self.scratch_length = tuple(float(v) for v in self.scratch_length)
        if self.height < 8 or self.width < 8:
            raise ValueError("image must be at least 8x8")
        if self.n_grains < 2:
            raise ValueError("n_grains must be >= 2")
        for name in ("particle_count", "scratch_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("weak_boundary_fraction", "particle_on_boundary"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.particle_radius
        if not 0 < lo <= hi:
            raise ValueError("particle_radius must satisfy 0 < min <= max")
        if not 0 < self.scratch_length[0] <= self.scratch_length[1]:
            raise ValueError("scratch_length must satisfy 0 < min <= max")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur must be >= 0")
        if not self.pixel_scale_um > 0:
            raise ValueError("pixel_scale_um must be > 0")


@dataclass
class GroundTruth:
    boundary: np.ndarray
    phase: np.ndarray
    scratch: np.ndarray
    weak: np.ndarray
    labels: np.ndarray
    mean_intercept_um: float
    phase_fraction: float
    mean_ecd_um: float
    hv: float
    particles: list

    def summary(self):
        return {
            "mean_intercept_um": self.mean_intercept_um,
            "phase_fraction": self.phase_fraction,
            "mean_ecd_um": self.mean_ecd_um,
            "hv": self.hv,
            "n_particles": len(self.particles),
            "particles": [list(p) for p in self.particles],
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# grains
# ---------------------------------------------------------------------------


def spread_points(rng, n, h, w):
    """Dart-throwing seeds with a shrinking minimum spacing."""
    rmin = 0.7 * np.sqrt(h * w / n)
    while True:
        pts = []
        for _ in range(60 * n):
            p = rng.uniform((0, 0), (h - 1, w - 1))
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= rmin * rmin for q in pts):
                pts.append(p)
                if len(pts) == n:
                    return np.array(pts)
        rmin *= 0.9


def voronoi_labels(seeds, h, w):
    rr, cc = np.mgrid[0:h, 0:w]
    _, idx = cKDTree(seeds).query(np.column_stack([rr.ravel(), cc.ravel()]))
    return idx.reshape(h, w).astype(np.int32)


def raw_boundary(labels):
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b


def _envelope_breaks(a, b, x0, x1):
    # breakpoints of min_i (a_i x + b_i) on [x0, x1]
    cur = int(np.argmin(a * x0 + b))
    x = x0
    n = 0
    while True:
        best, nxt = None, None
        for j in range(len(a)):
            if a[j] < a[cur]:
                xj = (b[j] - b[cur]) / (a[cur] - a[j])
                if xj > x and (best is None or xj < best or (xj == best and a[j] < a[nxt])):
                    best, nxt = xj, j
        if best is None or best > x1:
            return n
        n += 1
        cur, x = nxt, best


def analytic_crossings(seeds, h, w, spec):
    """Line length and Voronoi-edge crossings along the intercept grid."""
    m = spec.margin_px
    sr, sc = seeds[:, 0], seeds[:, 1]
    total_len, total_n = 0, 0
    # squared distance minus x^2 is linear in the running coordinate
    for r in line_positions(h, spec.n_h_lines, m):
        total_len += w - 2 * m
        total_n += _envelope_breaks(-2 * sc, sc * sc + (r - sr) ** 2, m, w - 1 - m)
    for c in line_positions(w, spec.n_v_lines, m):
        total_len += h - 2 * m
        total_n += _envelope_breaks(-2 * sr, sr * sr + (c - sc) ** 2, m, h - 1 - m)
    return total_len, total_n


def _neighbour_labels(labels):
    h, w = labels.shape
    p = np.pad(labels, 1, mode="edge")
    return np.stack([p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
                     for dr in (-1, 0, 1) for dc in (-1, 0, 1)])


def grain_adjacency(labels):
    nb = _neighbour_labels(labels)
    pairs = set()
    for k in range(nb.shape[0]):
        d = labels != nb[k]
        for a, b in zip(labels[d].tolist(), nb[k][d].tolist()):
            pairs.add((min(a, b), max(a, b)))
    return sorted(pairs)


def grain_levels(rng, n, pairs, palette=(0.35, 0.47, 0.59, 0.71, 0.83, 0.95)):
    """Greedy tone assignment keeping touching grains far apart in intensity."""
    adj = {i: set() for i in range(n)}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    order = sorted(range(n), key=lambda i: (-len(adj[i]), i))
    level = {}
    pal = np.asarray(palette)
    for i in order:
        used = [pal[level[j]] for j in adj[i] if j in level]
        if used:
            gap = np.min(np.abs(pal[:, None] - np.asarray(used)[None, :]), axis=1)
            cands = np.flatnonzero(gap >= gap.max() - 1e-12)
        else:
            cands = np.arange(len(pal))
        level[i] = int(cands[int(rng.integers(len(cands)))])
    jitter = rng.uniform(-0.02, 0.02, size=n)
    return np.array([pal[level[i]] for i in range(n)]) + jitter


def boundary_segments(boundary, labels):
    """Map each boundary pixel to its grain pair; junction pixels get (-1, -1)."""
    nb = _neighbour_labels(labels)
    seg = {}
    for r, c in zip(*np.nonzero(boundary)):
        labs = np.unique(nb[:, r, c])
        key = (int(labs[0]), int(labs[1])) if labs.size == 2 else (-1, -1)
        seg.setdefault(key, []).append((int(r), int(c)))
    return seg


# ---------------------------------------------------------------------------
# particles and scratches
# ---------------------------------------------------------------------------


def ellipse_mask(h, w, cy, cx, a, b, theta):
    rr, cc = np.mgrid[0:h, 0:w]
    y, x = rr - cy, cc - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = x * ct + y * st
    v = -x * st + y * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def place_particles(rng, spec, boundary, max_tries=2000):
    h, w = spec.height, spec.width
    taken = np.zeros((h, w), dtype=bool)
    blocked = np.zeros((h, w), dtype=bool)
    bpix = np.argwhere(boundary)
    particles = []
    lo, hi = spec.particle_radius
    for k in range(spec.particle_count):
        on_boundary = rng.random() < spec.particle_on_boundary and len(bpix) > 0
        for _ in range(max_tries):
            a = rng.uniform(lo, hi)
            b = rng.uniform(max(lo * 0.6, 1.0), a)
            theta = rng.uniform(0, np.pi)
            if on_boundary:
                cy, cx = bpix[int(rng.integers(len(bpix)))].astype(float)
            else:
                cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
            if cy - a < 1 or cx - a < 1 or cy + a > h - 2 or cx + a > w - 2:
                continue
            m = ellipse_mask(h, w, cy, cx, a, b, theta)
            if not m.any() or (m & blocked).any():
                continue
            taken |= m
            # two-pixel gap keeps particles from merging under 8-connectivity
            blocked |= ndimage.binary_dilation(m, iterations=2)
            particles.append((float(cy), float(cx), float(a), float(b), float(theta)))
            break
        else:
            raise GenerationError(f"could not place particle {k + 1} of {spec.particle_count}")
    return taken, particles


def segment_mask(h, w, p0, p1, width):
    rr, cc = np.mgrid[0:h, 0:w]
    d = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(rr - (p0[0] + t * d[0]), cc - (p0[1] + t * d[1]))
    return dist <= width / 2.0


def draw_scratches(rng, spec):
    h, w = spec.height, spec.width
    out = np.zeros((h, w), dtype=bool)
    for _ in range(spec.scratch_count):
        length = rng.uniform(*spec.scratch_length)
        ang = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        dy, dx = 0.5 * length * np.sin(ang), 0.5 * length * np.cos(ang)
        out |= segment_mask(h, w, (cy - dy, cx - dx), (cy + dy, cx + dx), spec.scratch_width)
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

BOUNDARY_DEPTH = 0.25
PHASE_LEVEL = (0.14, 0.22)


def generate(spec=None):
    """Render one micrograph; returns ``(GrayImage, GroundTruth)``."""
    spec = spec or SynthSpec()
    h, w = spec.height, spec.width
    rng = make_rng(spec.seed, 201)
    seeds = spread_points(rng, spec.n_grains, h, w)
    labels = voronoi_labels(seeds, h, w)
    # thin inside a frame: lines that meet the image edge stay attached to it
    # instead of being pulled in as free ends
    boundary = thin(np.pad(raw_boundary(labels), 1, constant_values=True))[1:-1, 1:-1]

    pairs = grain_adjacency(labels)
    tones = grain_levels(rng, spec.n_grains, pairs)
    img = tones[labels]

    segs = boundary_segments(boundary, labels)
    keys = [k for k in sorted(segs) if k != (-1, -1)]
    n_weak = int(round(spec.weak_boundary_fraction * len(keys)))
    weak = np.zeros((h, w), dtype=bool)
    for i in rng.permutation(len(keys))[:n_weak]:
        for r, c in segs[keys[i]]:
            weak[r, c] = True
    # lines sit below the darker of the two grains they separate
    line = np.maximum(ndimage.minimum_filter(img, size=3) - BOUNDARY_DEPTH, 0.05)
    drawn = boundary & ~weak
    img[drawn] = line[drawn]

    phase, particles = place_particles(rng, spec, boundary)
    scratch = draw_scratches(rng, spec)
    dark = phase | scratch
    img[dark] = rng.uniform(*PHASE_LEVEL, size=int(dark.sum()))

    if spec.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    total_len, total_n = analytic_crossings(seeds, h, w, spec.intercept)
    intercept = total_len / max(total_n, 1) * spec.pixel_scale_um
    areas = np.array([np.pi * a * b for _, _, a, b, _ in particles])
    fraction = float(areas.sum() / (h * w))
    mean_ecd = float(np.mean(2.0 * np.sqrt(areas / np.pi)) * spec.pixel_scale_um) if len(areas) else 0.0
    hv = float(hardness(spec.gd_at_pct, intercept, fraction, mean_ecd, spec.law))

    truth = GroundTruth(boundary=boundary, phase=phase, scratch=scratch & ~phase, weak=weak,
                        labels=labels, mean_intercept_um=float(intercept), phase_fraction=fraction,
                        mean_ecd_um=mean_ecd, hv=hv, particles=particles)
    return GrayImage(img, spec.pixel_scale_um), truth


def spec_dict(spec):
    d = asdict(spec)
    d["particle_radius"] = list(spec.particle_radius)
    d["scratch_length"] = list(spec.scratch_length)
    return d


# ---------------------------------------------------------------------------
# feature tables
# ---------------------------------------------------------------------------


def generate_feature_table(n, law="hall_petch", noise_sigma=2.0, seed=0, coef=None):
    """``n`` labelled rows drawn from the synthetic hardness law.

    Gd ~ U[0.08, 2.9] at%, grain ~ U[40, 120] um, fraction ~ U[0, 0.15],
    ECD ~ U[1, 10] um, HV = law + N(0, noise_sigma).
    """
    if n < 3:
        raise ValueError("feature table needs n >= 3")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = make_rng(seed, 211)
    gd = rng.uniform(*GD_RANGE, size=n)
    grain = rng.uniform(40.0, 120.0, size=n)
    frac = rng.uniform(0.0, 0.15, size=n)
    size = rng.uniform(1.0, 10.0, size=n)
    noise = rng.normal(0.0, noise_sigma, size=n) if noise_sigma > 0 else np.zeros(n)
    rows = []
    for i in range(n):
        hv = hardness(gd[i], grain[i], frac[i], size[i], law, coef) + noise[i]
        rows.append(FeatureRow(float(gd[i]), float(grain[i]), float(frac[i]), float(size[i]),
                               float(hv), id=f"s{i:03d}"))
    return rows

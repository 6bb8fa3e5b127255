"""Image, mask and table I/O (PGM P5, PNG, CSV)."""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass
class GrayImage:
    """Grayscale micrograph, values in [0, 1], with physical pixel size."""

    values: np.ndarray
    pixel_scale_um: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("GrayImage must be 2-d")
        if not self.pixel_scale_um > 0:
            raise ValueError("pixel_scale_um must be > 0")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("GrayImage values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def as_mask(a):
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError("mask must be strictly binary")
    return a.astype(bool)


def read_gray(path):
    """Read an 8-bit grayscale PGM/PNG as float values in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P", "I;16"):
            im = im.convert("L")
        a = np.asarray(im)
    if a.dtype == np.uint16:
        return a.astype(np.float64) / 65535.0
    return a.astype(np.float64) / (1.0 if a.dtype == bool else 255.0)


def write_gray(path, values):
    a = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _save(path, a)


def read_mask(path):
    """Masks are stored with {0, 255}; anything >= 128 counts as on."""
    return read_gray(path) >= 0.5


def write_mask(path, mask):
    _save(path, np.where(as_mask(mask), 255, 0).astype(np.uint8))


def _save(path, a):
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else None
    Image.fromarray(a).save(path, format=fmt)


# ---------------------------------------------------------------------------
# feature table
# ---------------------------------------------------------------------------

FEATURE_HEADER = ["id", "gd_at_pct", "grain_size_um", "phase_area_fraction", "phase_ecd_um", "hv"]


def _fmt(x):
    return repr(float(x))


def write_feature_table(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_HEADER)
        for r in rows:
            w.writerow([r.id, _fmt(r.gd_at_pct), _fmt(r.grain_size_um), _fmt(r.phase_area_fraction),
                        _fmt(r.phase_ecd_um), "" if r.hv is None else _fmt(r.hv)])


def read_feature_table(path):
    from .features import FeatureRow

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(FEATURE_HEADER)}, got {header}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(FEATURE_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(FEATURE_HEADER)} fields")
            rows.append(FeatureRow(
                gd_at_pct=float(rec[1]), grain_size_um=float(rec[2]),
                phase_area_fraction=float(rec[3]), phase_ecd_um=float(rec[4]),
                hv=None if rec[5].strip() == "" else float(rec[5]), id=rec[0]))
    return rows


def write_loss_curve(path, losses):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, _fmt(v)])

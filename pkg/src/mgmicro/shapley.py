"""Exact Shapley attributions over the four input features.

With four features there are only 16 coalitions, so the values are computed
exactly.  The value of a coalition S at point x is the mean model output over
background rows with the features in S replaced by x's values
(interventional value function).
"""
import json
from dataclasses import asdict, dataclass
from itertools import permutations
from math import factorial

import numpy as np

from .features import FEATURE_NAMES


@dataclass
class ShapleyReport:
    phi: list
    base_value: float
    fx: float
    efficiency_residual: float
    row_id: str = ""

    def to_dict(self):
        return asdict(self)


def _as_matrix(rows):
    if len(rows) and hasattr(rows[0], "vector"):
        return np.array([r.vector() for r in rows], dtype=np.float64)
    return np.atleast_2d(np.asarray(rows, dtype=np.float64))


def coalition_values(model, x, background):
    """v(S) for every subset S, indexed by bitmask (bit i = feature i)."""
    x = np.asarray(getattr(x, "vector", lambda: x)(), dtype=np.float64)
    bg = _as_matrix(background)
    if bg.shape[0] == 0:
        raise ValueError("exact_shapley: empty background")
    m = x.size
    batch = []
    for mask in range(1 << m):
        z = bg.copy()
        for i in range(m):
            if mask >> i & 1:
                z[:, i] = x[i]
        batch.append(z)
    out = np.asarray(model(np.concatenate(batch)), dtype=np.float64).reshape(1 << m, bg.shape[0])
    return out.mean(axis=1)


def shapley_from_values(v, m):
    phi = np.zeros(m)
    for i in range(m):
        bit = 1 << i
        for mask in range(1 << m):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            w = factorial(s) * factorial(m - s - 1) / factorial(m)
            phi[i] += w * (v[mask | bit] - v[mask])
    return phi


def permutation_shapley(v, m):
    """Average marginal contribution over all m! orderings (brute force)."""
    phi = np.zeros(m)
    count = 0
    for order in permutations(range(m)):
        mask = 0
        for i in order:
            phi[i] += v[mask | (1 << i)] - v[mask]
            mask |= 1 << i
        count += 1
    return phi / count


def exact_shapley(model, x, background, row_id=""):
    """``model`` maps an (n, 4) array to n predictions."""
    v = coalition_values(model, x, background)
    m = int(np.log2(v.size))
    phi = shapley_from_values(v, m)
    base, fx = float(v[0]), float(v[-1])
    return ShapleyReport(phi.tolist(), base, fx, fx - base - float(phi.sum()), str(row_id))


@dataclass
class Ranking:
    order: list
    mean_abs_phi: list
    degenerate: bool


def importance_ranking(reports, names=FEATURE_NAMES):
    """Features by mean |phi|, descending; ties keep feature order."""
    if not reports:
        raise ValueError("importance_ranking needs at least one report")
    mean_abs = np.mean(np.abs([r.phi for r in reports]), axis=0)
    order = sorted(range(len(mean_abs)), key=lambda i: (-mean_abs[i], i))
    return Ranking([names[i] for i in order], [float(mean_abs[i]) for i in order],
                   bool(np.all(mean_abs == 0)))


@dataclass
class DependenceSeries:
    feature: str
    values: list
    shap: list

    @classmethod
    def from_reports(cls, reports, rows, index, names=FEATURE_NAMES):
        x = _as_matrix(rows)[:, index]
        s = np.array([r.phi[index] for r in reports])
        order = np.argsort(x, kind="stable")
        return cls(names[index], x[order].tolist(), s[order].tolist())


def moving_average3(a):
    """Centred 3-point mean; the two end points average what exists."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    for i in range(a.size):
        lo, hi = max(0, i - 1), min(a.size, i + 2)
        out[i] = a[lo:hi].mean()
    return out


def critical_values(series, min_points=4):
    """Midpoints between consecutive feature values where smoothed SHAP flips sign."""
    x = np.asarray(series.values, dtype=np.float64)
    if x.size < min_points:
        raise ValueError(f"critical_values needs at least {min_points} points")
    sm = moving_average3(series.shap)
    sign = np.sign(sm)
    out = []
    prev = None
    for i in range(x.size):
        if sign[i] == 0:
            continue
        if prev is not None and sign[i] != sign[prev]:
            out.append(float(0.5 * (x[prev] + x[i])))
        prev = i
    return out


def explain_rows(model, rows, background=None):
    bg = rows if background is None else background
    return [exact_shapley(model, r, bg, getattr(r, "id", "")) for r in rows]


def shap_summary(reports, rows, names=FEATURE_NAMES):
    rank = importance_ranking(reports, names)
    thresholds = {}
    for i, name in enumerate(names):
        series = DependenceSeries.from_reports(reports, rows, i, names)
        thresholds[name] = critical_values(series) if len(series.values) >= 4 else []
    return {
        "ranking": [{"feature": f, "mean_abs_phi": v} for f, v in zip(rank.order, rank.mean_abs_phi)],
        "degenerate": rank.degenerate,
        "critical_values": thresholds,
        "rows": [r.to_dict() for r in reports],
    }


def write_shap_json(path, summary):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def _save_svg(plt, fig, path):
    # fixed salt and no date: identical inputs give byte-identical files
    with plt.rc_context({"svg.hashsalt": "mgmicro"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_summary(path, reports, rows, names=FEATURE_NAMES):
    """Strip plot of phi per feature, colour = feature value (low blue, high red)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    x = _as_matrix(rows)
    phi = np.array([r.phi for r in reports])
    rank = importance_ranking(reports, names)
    fig, ax = plt.subplots(figsize=(6, 3))
    for pos, name in enumerate(reversed(rank.order)):
        i = names.index(name)
        span = np.ptp(x[:, i]) or 1.0
        ax.scatter(phi[:, i], np.full(len(phi), pos), c=(x[:, i] - x[:, i].min()) / span,
                   cmap="coolwarm", s=14)
    ax.set_yticks(range(len(names)), list(reversed(rank.order)))
    ax.axvline(0, color="0.6", lw=0.8)
    ax.set_xlabel("SHAP value (HV)")
    fig.tight_layout()
    _save_svg(plt, fig, path)


def plot_dependence(path, series, thresholds=()):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    s = np.asarray(series.shap)
    ax.scatter(series.values, s, c=np.where(s >= 0, "tab:blue", "tab:red"), s=14)
    for t in thresholds:
        ax.axvline(t, color="0.4", ls="--", lw=0.8)
    ax.axhline(0, color="0.6", lw=0.8)
    ax.set_xlabel(series.feature)
    ax.set_ylabel("SHAP value (HV)")
    fig.tight_layout()
    _save_svg(plt, fig, path)

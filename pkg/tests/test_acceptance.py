"""End-to-end acceptance checks on synthetic data with known ground truth.

Each test prints one ``acceptance criterion N: PASS/FAIL`` line (also
collected in the terminal summary).  The heavy ones (edge detector, phase
segmenter, two pipeline runs) take several minutes on one CPU core.
"""
import filecmp
import math
import time
from pathlib import Path

import numpy as np

from mgmicro import edgenet as E
from mgmicro import features as F
from mgmicro import regressor as R
from mgmicro import repair as RP
from mgmicro import shapley as S
from mgmicro import synth as SY
from mgmicro import tensor as T
from mgmicro import unetpp as U
from mgmicro.cli import main

from conftest import leaf
from test_edgenet import direct_pdc

ROOT = Path(__file__).resolve().parents[1]
KINDS = (E.PdcKind.cpdc, E.PdcKind.apdc, E.PdcKind.rpdc)


def small_scene(seed, scratches=1):
    # 128 px scenes at the grain and particle density of the 256 px default
    return SY.SynthSpec(height=128, width=128, n_grains=8, particle_count=12, scratch_count=scratches,
                        scratch_length=(30.0, 80.0), seed=seed)


# ---------------------------------------------------------------------------
# 1. PDC equivalence
# ---------------------------------------------------------------------------


def test_pdc_equivalence(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for kind in KINDS:
        k = E.KERNEL_SIZE[kind]
        for _ in range(50):
            img = rng.standard_normal((9, 9))
            w = rng.standard_normal((k, k))
            got = E.pdc_conv(T.Tensor(img[None, None]), T.Tensor(w[None, None]), kind).data[0, 0]
            worst = max(worst, float(np.abs(got - direct_pdc(img, w, kind)).max()))
    dt = time.perf_counter() - t0
    ok = criterion(1, worst < 1e-10 and dt < 10, f"max |diff| {worst:.2e} over 150 cases, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient suite
# ---------------------------------------------------------------------------


def gradient_cases(rng):
    x = leaf(rng.standard_normal((2, 4, 8, 8)))
    w = leaf(rng.standard_normal((6, 2, 3, 3)))
    b = leaf(rng.standard_normal(6))
    yield "conv2d", lambda: T.tsum(T.square(T.conv2d(x, w, b, stride=2, padding=2, dilation=2, groups=2))), [x, w, b]
    for kind in KINDS:
        kw = leaf(rng.standard_normal((4, 1, E.KERNEL_SIZE[kind], E.KERNEL_SIZE[kind])))
        yield f"pdc_{kind.value}", (lambda kw=kw, kind=kind: T.tsum(T.square(E.pdc_conv(x, kw, kind, groups=4)))), [x, kw]
    wt = rng.standard_normal((2, 4, 11, 5))
    yield "bilinear_resize", lambda: T.tsum(T.mul(T.bilinear_resize(x, 11, 5), wt)), [x]
    yield "max_pool2x2", lambda: T.tsum(T.square(T.max_pool2x2(x))), [x]
    yield "pad_replicate", lambda: T.tsum(T.square(T.pad_replicate(x, 2))), [x]
    g, bb = leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    rm, rv = np.zeros(4), np.ones(4)
    wb = rng.standard_normal(x.shape)
    yield "batch_norm2d", lambda: T.tsum(T.mul(T.batch_norm2d(x, g, bb, rm.copy(), rv.copy(), True), wb)), [x, g, bb]
    a = leaf(rng.standard_normal((3, 5, 8)))
    lg, lb = leaf(rng.standard_normal(8)), leaf(rng.standard_normal(8))
    wl = rng.standard_normal((3, 5, 8))
    yield "layer_norm", lambda: T.tsum(T.mul(T.layer_norm(a, lg, lb), wl)), [a, lg, lb]
    q, k, v = (leaf(rng.standard_normal((2, 5, 4))) for _ in range(3))
    yield "attention", lambda: T.tsum(T.square(T.attention(q, k, v))), [q, k, v]
    m1, m2 = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    yield "matmul", lambda: T.tsum(T.square(T.matmul(m1, m2))), [m1, m2]
    lw, lbias = leaf(rng.standard_normal((6, 8))), leaf(rng.standard_normal(6))
    yield "linear", lambda: T.tsum(T.square(T.linear(a, lw, lbias))), [a, lw, lbias]
    s = leaf(rng.standard_normal((4, 6)))
    yield "softmax/sigmoid", lambda: T.tsum(T.square(T.softmax(T.sigmoid(s), axis=1))), [s]
    p = leaf(rng.uniform(0.05, 0.95, (2, 1, 5, 5)))
    tgt = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    yield "dice_loss", lambda: E.dice_loss(p, tgt), [p]
    yield "bce_loss", lambda: U.bce_loss(p, tgt), [p]
    yield "mse_loss", lambda: R.mse_loss(T.reshape(p, (50,)), tgt.ravel()), [p]

    ecfg = E.EdgeNetConfig(stages=3, blocks_per_stage=1, stage_channels=(4, 4, 4),
                           pdc_schedule=("cpdc", "apdc", "rpdc"), lka_dw_kernel=3, lka_dilated_kernel=3,
                           lka_dilation=2)
    est = E.init_edge_net(ecfg, 3)
    ex = T.Tensor(rng.random((2, 1, 8, 8)))
    ey = (rng.random((2, 1, 8, 8)) > 0.7).astype(float)

    def edge_loss():
        sides, fused = E.edge_net_forward(est, ex, ecfg)
        return E.deep_supervision_loss(sides, fused, ey)[0]

    yield "edge network", edge_loss, list(est.params.values())

    ucfg = U.UnetPPConfig(depth=2, base_channels=2)
    ust = U.init_unetpp(ucfg, 4)
    ux = T.Tensor(rng.random((2, 1, 8, 8)))
    uy = (rng.random((2, 1, 8, 8)) > 0.6).astype(float)
    yield "unet++ network", lambda: U.bce_loss(U.unetpp_forward(ust, ux, ucfg, training=True), uy), \
        list(ust.params.values())

    rcfg = R.RegressorConfig(d_model=8, n_layers=2, n_heads=2)
    rst = R.init_regressor(rcfg, 5)
    rx = T.Tensor(rng.standard_normal((6, 4)))
    ry = rng.standard_normal(6)
    yield "regressor network", lambda: R.mse_loss(R.regressor_forward(rst, rx, rcfg), ry), list(rst.params.values())


def test_gradient_suite(criterion):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errors = {}
    for name, fn, params in gradient_cases(rng):
        errors[name] = T.grad_check(fn, params, eps=1e-6, n_samples=6, rng=np.random.default_rng(0))
    dt = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = criterion(2, worst < 1e-4 and dt < 120,
                   f"{len(errors)} checks, max rel err {worst:.2e} ({name}), {dt:.1f} s")
    assert ok, errors


# ---------------------------------------------------------------------------
# 3. loss and metric oracles
# ---------------------------------------------------------------------------


def loop_dice_loss(p, q, eps=1e-6):
    total = 0.0
    for b in range(p.shape[0]):
        num, sp, sq = 0.0, 0.0, 0.0
        for a, t in zip(p[b].ravel(), q[b].ravel()):
            num += a * t
            sp += a * a
            sq += t * t
        total += (2 * num + eps) / (sp + sq + eps)
    return 1.0 - total / p.shape[0]


def loop_bce(p, y, clamp=1e-7):
    total = 0.0
    for a, t in zip(p.ravel(), y.ravel()):
        a = min(max(a, clamp), 1 - clamp)
        total += t * math.log(a) + (1 - t) * math.log(1 - a)
    return -total / p.size


def loop_mse(p, y):
    return sum((a - b) ** 2 for a, b in zip(p, y)) / len(p)


def loop_regression(y, yh):
    n = len(y)
    mean = sum(y) / n
    mae = sum(abs(a - b) for a, b in zip(y, yh)) / n
    mse = sum((a - b) ** 2 for a, b in zip(y, yh)) / n
    r2 = 1 - sum((a - b) ** 2 for a, b in zip(y, yh)) / sum((a - mean) ** 2 for a in y)
    return mae, mse, math.sqrt(mse), r2


def loop_near(a, b, tol):
    pts_a = list(zip(*np.nonzero(a)))
    pts_b = list(zip(*np.nonzero(b)))
    if not pts_a:
        return 1.0
    hit = sum(any(max(abs(r - s), abs(c - t)) <= tol for s, t in pts_b) for r, c in pts_a)
    return hit / len(pts_a)


def loop_edge(pred, gt, tol):
    p, r = loop_near(pred, gt, tol), loop_near(gt, pred, tol)
    return p, r, (2 * p * r / (p + r) if p + r > 0 else 0.0)


def loop_seg(pred, gt):
    tp = fp = tn = fn = 0
    for a, b in zip(pred.ravel(), gt.ravel()):
        tp += a and b
        fp += a and not b
        tn += (not a) and (not b)
        fn += (not a) and b
    acc = (tp + tn) / pred.size
    prec = 1.0 if tp + fp == 0 else tp / (tp + fp)
    fg = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    return acc, prec, (fg + bg) / 2, fg, bg


def test_loss_and_metric_oracles(criterion):
    rng = np.random.default_rng(3)
    worst = {k: 0.0 for k in ("dice", "bce", "mse", "regression", "edge", "seg")}
    for _ in range(1000):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        p = rng.random(shape)
        q = (rng.random(shape) > 0.5).astype(float)
        worst["dice"] = max(worst["dice"], abs(E.dice_loss(p, q).item() - loop_dice_loss(p, q)))
        worst["bce"] = max(worst["bce"], abs(U.bce_loss(p, q).item() - loop_bce(p, q)))

        n = int(rng.integers(2, 12))
        y = rng.normal(50, 10, n)
        yh = y + rng.normal(0, 3, n)
        worst["mse"] = max(worst["mse"], abs(R.mse_loss(yh, y).item() - loop_mse(yh, y)))
        m = R.regression_metrics(y, yh)
        worst["regression"] = max(worst["regression"],
                                  float(np.max(np.abs(np.array([m.mae, m.mse, m.rmse, m.r2]) - loop_regression(y, yh)))))

        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        a = rng.random((h, w)) > rng.uniform(0.5, 0.95)
        b = rng.random((h, w)) > rng.uniform(0.5, 0.95)
        tol = int(rng.integers(0, 3))
        em = E.edge_metrics(a, b, tol)
        worst["edge"] = max(worst["edge"], float(np.max(np.abs(np.array([em.precision, em.recall, em.f1])
                                                               - loop_edge(a, b, tol)))))
        sm = U.seg_metrics(a, b)
        worst["seg"] = max(worst["seg"], float(np.max(np.abs(
            np.array([sm.accuracy, sm.precision, sm.miou, sm.iou_fg, sm.iou_bg]) - loop_seg(a, b)))))

    actual, predicted = [72.42, 33.0], [78.43, 30.95]
    errors = [round(abs(a - p), 2) for a, p in zip(actual, predicted)]
    quoted = errors == [6.01, 2.05]
    top = max(worst.values())
    ok = criterion(3, top <= 1e-10 and quoted,
                   f"1000 cases, max deviation {top:.1e}; quoted test errors {errors}")
    assert ok, worst


# ---------------------------------------------------------------------------
# 4. measurement accuracy
# ---------------------------------------------------------------------------


def test_measurement_accuracy(criterion):
    t0 = time.perf_counter()
    err_size, err_frac, err_ecd = [], [], []
    for i in range(20):
        spec = SY.SynthSpec(seed=100 + i)
        _, gt = SY.generate(spec)
        size = F.linear_intercept(gt.boundary, spec.intercept, spec.pixel_scale_um)
        frac = F.area_fraction(gt.phase)
        ecd = F.phase_particle_stats(gt.phase, spec.pixel_scale_um).mean_ecd_um
        err_size.append(abs(size - gt.mean_intercept_um) / gt.mean_intercept_um)
        err_frac.append(abs(frac - gt.phase_fraction) / gt.phase_fraction)
        err_ecd.append(abs(ecd - gt.mean_ecd_um) / gt.mean_ecd_um)
    unit = abs(F.ecd(math.pi) - 2.0)
    dt = time.perf_counter() - t0
    ok = max(err_size) <= 0.10 and max(err_frac) <= 0.10 and max(err_ecd) <= 0.05 and unit <= 1e-12 and dt < 60
    ok = criterion(4, ok, f"max rel err: intercept {max(err_size):.3f}, fraction {max(err_frac):.3f}, "
                          f"ECD {max(err_ecd):.3f}; ECD(pi) err {unit:.0e}; {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5. edge detector and repair
# ---------------------------------------------------------------------------


def erase_segments(gt, fraction, seed):
    segs = SY.boundary_segments(gt.boundary, gt.labels)
    keys = [k for k in sorted(segs) if k != (-1, -1)]
    rng = np.random.default_rng(seed)
    erased = np.zeros_like(gt.boundary)
    for i in rng.permutation(len(keys))[:int(round(fraction * len(keys)))]:
        for r, c in segs[keys[i]]:
            erased[r, c] = True
    return erased


def test_edge_pipeline(criterion):
    train = [SY.generate(small_scene(1000 + i)) for i in range(50)]
    imgs, masks, _ = E.augment([im.values for im, _ in train], [gt.boundary for _, gt in train],
                               E.AugmentSpec(crop=64, stride=64, rotations=(0, 90), flips=("none",)))
    t0 = time.perf_counter()
    store, curve = E.train_edge_detector(imgs, masks, E.EdgeNetConfig(), epochs=8, seed=0)
    train_s = time.perf_counter() - t0

    per_image = []
    for i in range(10):
        im, gt = SY.generate(small_scene(9000 + i))
        fused, _ = E.detect_edges(im, store)
        per_image.append(E.edge_metrics(fused >= 0.5, gt.boundary, 2))
    summary = E.summarize_edge_metrics(per_image)

    erased_total, recovered = 0, 0
    for i in range(10):
        im, gt = SY.generate(SY.SynthSpec(seed=500 + i))
        erased = erase_segments(gt, 0.2, 500 + i)
        out = RP.repair(im, (gt.boundary & ~erased).astype(float))
        n = int(erased.sum())
        erased_total += n
        recovered += round(E.edge_metrics(out, erased, 2).recall * n)
    recovery = recovered / erased_total

    ok = summary.mean_f1 >= 0.70 and train_s <= 900 and recovery >= 0.95
    ok = criterion(5, ok, f"fused F1 {summary.mean_f1:.3f} (P {summary.mean_precision:.3f}, "
                          f"R {summary.mean_recall:.3f}, F1 of means {summary.f1_of_means:.3f}), "
                          f"training {train_s / 60:.1f} min on {len(imgs)} crops; "
                          f"repair recovers {recovery:.3f} of {erased_total} erased px")
    assert ok, curve


# ---------------------------------------------------------------------------
# 6. phase segmenter
# ---------------------------------------------------------------------------


def test_phase_segmenter(criterion):
    train = [SY.generate(small_scene(3000 + i, scratches=2)) for i in range(50)]
    cfg = U.UnetPPConfig(depth=4, base_channels=16)
    t0 = time.perf_counter()
    store, curve = U.train_segmenter([im for im, _ in train], [gt.phase for _, gt in train], cfg,
                                     epochs=40, seed=0)
    train_s = time.perf_counter() - t0

    counts = np.zeros(4)  # net intersection, net union, baseline intersection, baseline union
    scratch_px, scratch_hit = 0, 0
    for i in range(10):
        im, gt = SY.generate(small_scene(8000 + i, scratches=2))
        pred = U.segment_phase(im, store, cfg)
        base = U.threshold_segment(im, 0.25)
        counts += [np.sum(pred & gt.phase), np.sum(pred | gt.phase),
                   np.sum(base & gt.phase), np.sum(base | gt.phase)]
        scratch_px += int(gt.scratch.sum())
        scratch_hit += int((pred & gt.scratch).sum())
    iou, base_iou = counts[0] / counts[1], counts[2] / counts[3]
    fpr = scratch_hit / scratch_px
    ok = iou >= 0.6 and fpr < 0.10 and base_iou < iou
    ok = criterion(6, ok, f"foreground IoU {iou:.3f}, scratch FPR {fpr:.3f}, "
                          f"threshold-0.25 baseline IoU {base_iou:.3f}; training {train_s / 60:.1f} min")
    assert ok, curve


# ---------------------------------------------------------------------------
# 7. regressor
# ---------------------------------------------------------------------------


def test_regressor_loocv(criterion):
    rows = SY.generate_feature_table(21, "hall_petch", noise_sigma=2.0, seed=0)
    cfg = R.RegressorConfig()
    runs, times = [], []
    for _ in range(2):
        t0 = time.perf_counter()
        runs.append(R.loocv(rows, cfg, workers=1))
        times.append(time.perf_counter() - t0)
    m = runs[0].metrics
    same = runs[0].predicted == runs[1].predicted and m == runs[1].metrics
    curve = R.train_regressor(rows, cfg).curve
    drop = curve[0] / curve[-1]
    ok = m.r2 >= 0.8 and m.rmse <= 4.0 and drop >= 10 and same and max(times) < 300
    ok = criterion(7, ok, f"LOO R2 {m.r2:.3f}, RMSE {m.rmse:.2f} (bound 4.0), MAE {m.mae:.2f}; "
                          f"loss drop x{drop:.0f}; reruns identical: {same}; {max(times):.0f} s per LOO run")
    assert ok


# ---------------------------------------------------------------------------
# 8. Shapley
# ---------------------------------------------------------------------------


def test_shapley(criterion):
    rows = SY.generate_feature_table(21, "hall_petch", noise_sigma=2.0, seed=0)
    model = R.train_regressor(rows, R.RegressorConfig())

    def f(x):
        return R.predict_matrix(x, model)

    reports = S.explain_rows(f, rows)
    residual = max(abs(r.efficiency_residual) for r in reports)
    bg = S._as_matrix(rows)
    gap = 0.0
    for r in rows[:5]:
        v = S.coalition_values(f, r, bg)
        gap = max(gap, float(np.max(np.abs(S.shapley_from_values(v, 4) - S.permutation_shapley(v, 4)))))
    ranking = S.importance_ranking(reports)

    # SHAP changes sign between the grid points 2.0 and 2.2
    grid = np.round(np.arange(0.0, 4.01, 0.2), 10)
    series = S.DependenceSeries("gd_at_pct", grid.tolist(), (grid - 2.1).tolist())
    crit = S.critical_values(series)
    crit_ok = len(crit) == 1 and abs(crit[0] - 2.1) <= 0.1 + 1e-12

    ok = (residual < 1e-8 and gap < 1e-10 and ranking.order[0] == "gd_at_pct"
          and ranking.order[-1] == "grain_size_um" and crit_ok)
    ok = criterion(8, ok, f"efficiency residual {residual:.1e}, coalition vs permutations {gap:.1e}, "
                          f"ranking {' > '.join(ranking.order)}, critical value {crit}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_pipeline_determinism(criterion, tmp_path, capsys):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["pipeline", "--config", str(ROOT / "configs" / "demo.cfg"), "--out", str(o)]) for o in outs]
    capsys.readouterr()
    files = tree(outs[0])
    _, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], files, shallow=False)
    same_tree = files == tree(outs[1])
    ok = codes == [0, 0] and same_tree and not mismatch and not errors and "run_report.json" in files
    ok = criterion(9, ok, f"{len(files)} artifacts; differing {mismatch + errors}; exit codes {codes}")
    assert ok

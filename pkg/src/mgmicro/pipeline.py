"""Pipeline stages shared by the standalone subcommands and ``pipeline``.

Every stage reads and writes plain files under the output directory so a
stage run on its own with the same config reproduces the artifacts the
full pipeline writes.
"""
import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import edgenet as E
from . import regressor as R
from . import repair as RP
from . import shapley as S
from . import synth as SY
from . import unetpp as U
from .features import FEATURE_NAMES, InterceptSpec, assemble_features
from .imageio import (read_feature_table, read_gray, read_mask, write_feature_table,
                      write_gray, write_loss_curve, write_mask)
from .params import load_mgf, load_store, make_rng, save_store


class StageError(RuntimeError):
    """A stage failed; carries the stage name for the diagnostic."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ids(directory, prefix):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(str(d))
    ids = sorted(p.stem[len(prefix):] for p in d.glob(f"{prefix}*.pgm"))
    if not ids:
        raise FileNotFoundError(f"{d}/{prefix}*.pgm")
    return ids


# ---------------------------------------------------------------------------
# config -> module settings
# ---------------------------------------------------------------------------


def synth_spec(cfg, index):
    s = cfg["synth"]
    return SY.SynthSpec(
        height=s["height"], width=s["width"], n_grains=s["n_grains"],
        weak_boundary_fraction=s["weak_boundary_fraction"], particle_count=s["particle_count"],
        particle_radius=s["particle_radius"], scratch_count=s["scratch_count"],
        scratch_length=s["scratch_length"], scratch_width=s["scratch_width"],
        noise_sigma=s["noise_sigma"], blur_sigma=s["blur_sigma"], pixel_scale_um=s["pixel_scale_um"],
        gd_at_pct=sample_gd(cfg)[index], law=s["law"], seed=cfg["run"]["seed"] * 10007 + index,
        intercept=intercept_spec(cfg))


def sample_gd(cfg):
    lo, hi = cfg["synth"]["gd_range"]
    return make_rng(cfg["run"]["seed"], 502).uniform(lo, hi, size=cfg["synth"]["n_images"])


def intercept_spec(cfg):
    c = cfg["intercept"]
    return InterceptSpec(c["n_h_lines"], c["n_v_lines"], c["margin_px"])


def edge_config(cfg):
    c = cfg["edge"]
    return E.EdgeNetConfig(lr=c["lr"], batch_size=c["batch_size"])


def augment_spec(cfg):
    c = cfg["edge"]
    return E.AugmentSpec(crop=c["crop"], stride=c["crop_stride"],
                         rotations=(0, 90, 180, 270) if c["rotations"] else (0,),
                         flips=("none", "h", "v") if c["rotations"] else ("none",))


def phase_config(cfg):
    c = cfg["phase"]
    return U.UnetPPConfig(depth=c["depth"], base_channels=c["base_channels"], lr=c["lr"],
                          batch_size=c["batch_size"], crop=c["crop"])


def repair_params(cfg):
    c = cfg["repair"]
    return RP.RepairParams(c["threshold"], c["min_area_px"], c["similarity_tol"],
                           c["max_fill_ratio"], c["use_gradient"], c["link_px"])


def regressor_config(cfg):
    c = cfg["regressor"]
    return R.RegressorConfig(d_model=c["d_model"], n_layers=c["n_layers"], n_heads=c["n_heads"],
                             token_mode=c["token_mode"], lr=c["lr"], epochs=c["epochs"],
                             seed=cfg["run"]["seed"])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_synth(cfg, out):
    d = Path(out) / "synth"
    d.mkdir(parents=True, exist_ok=True)
    n = cfg["synth"]["n_images"]
    noise = make_rng(cfg["run"]["seed"], 503).normal(0.0, cfg["synth"]["hv_noise_sigma"], size=n)
    for i in range(n):
        spec = synth_spec(cfg, i)
        img, gt = SY.generate(spec)
        tag = f"{i:03d}"
        write_gray(d / f"img_{tag}.pgm", img.values)
        write_mask(d / f"boundary_{tag}.pgm", gt.boundary)
        write_mask(d / f"phase_{tag}.pgm", gt.phase)
        write_mask(d / f"scratch_{tag}.pgm", gt.scratch)
        info = gt.summary()
        info.update(gd_at_pct=float(spec.gd_at_pct), hv_label=float(gt.hv + noise[i]),
                    pixel_scale_um=spec.pixel_scale_um, seed=spec.seed)
        write_json(d / f"truth_{tag}.json", info)
    return {"n_images": n}


def stage_synth_table(cfg, out, n, law, noise_sigma):
    path = Path(out) / "features.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = SY.generate_feature_table(n, law, noise_sigma, cfg["run"]["seed"])
    write_feature_table(path, rows)
    return {"rows": n}


def load_pairs(images_dir, mask_prefix, ids=None):
    ids = ids if ids is not None else _ids(images_dir, "img_")
    imgs = [read_gray(Path(images_dir) / f"img_{i}.pgm") for i in ids]
    masks = [read_mask(Path(images_dir) / f"{mask_prefix}_{i}.pgm") for i in ids]
    return ids, imgs, masks


def train_ids(cfg, images_dir):
    ids = _ids(images_dir, "img_")
    return ids[:max(1, min(cfg["synth"]["n_train"], len(ids)))]


def stage_augment(cfg, out, images_dir):
    d = Path(out) / "augment"
    d.mkdir(parents=True, exist_ok=True)
    _, imgs, masks = load_pairs(images_dir, "boundary", train_ids(cfg, images_dir))
    ai, am, factor = E.augment(imgs, masks, augment_spec(cfg))
    for k, (a, m) in enumerate(zip(ai, am)):
        write_gray(d / f"img_{k:05d}.pgm", a)
        write_mask(d / f"boundary_{k:05d}.pgm", m)
    return {"crops": len(ai), "factor": factor}


def stage_train_edges(cfg, out, images_dir, log=None):
    d = Path(out) / "edge"
    d.mkdir(parents=True, exist_ok=True)
    _, imgs, masks = load_pairs(images_dir, "boundary", train_ids(cfg, images_dir))
    ai, am, _ = E.augment(imgs, masks, augment_spec(cfg))
    store, curve = E.train_edge_detector(ai, am, edge_config(cfg), cfg["edge"]["epochs"],
                                         cfg["run"]["seed"], log=log)
    save_store(d / "edge_weights.mgf", store)
    write_loss_curve(d / "edge_loss.csv", curve)
    return {"samples": len(ai), "final_loss": curve[-1]}


def load_edge_store(cfg, path):
    store = E.init_edge_net(edge_config(cfg), 0)
    return load_store(path, store)


def stage_detect(cfg, out, images_dir, weights):
    d = Path(out) / "detect"
    d.mkdir(parents=True, exist_ok=True)
    store = load_edge_store(cfg, weights)
    ids = _ids(images_dir, "img_")
    for i in ids:
        fused, _ = E.detect_edges(read_gray(Path(images_dir) / f"img_{i}.pgm"), store, edge_config(cfg))
        write_gray(d / f"edge_{i}.pgm", fused)
    return {"images": len(ids)}


def stage_repair(cfg, out, images_dir, edges_dir):
    d = Path(out) / "repair"
    d.mkdir(parents=True, exist_ok=True)
    ids = _ids(images_dir, "img_")
    prm = repair_params(cfg)
    for i in ids:
        img = read_gray(Path(images_dir) / f"img_{i}.pgm")
        edge = read_gray(Path(edges_dir) / f"edge_{i}.pgm")
        write_mask(d / f"repaired_{i}.pgm", RP.repair(img, edge, prm))
    return {"images": len(ids)}


def stage_train_phase(cfg, out, images_dir, log=None):
    d = Path(out) / "phase"
    d.mkdir(parents=True, exist_ok=True)
    _, imgs, masks = load_pairs(images_dir, "phase", train_ids(cfg, images_dir))
    store, curve = U.train_segmenter(imgs, masks, phase_config(cfg), cfg["phase"]["epochs"],
                                     cfg["run"]["seed"], log=log)
    save_store(d / "phase_weights.mgf", store)
    write_loss_curve(d / "phase_loss.csv", curve)
    return {"final_loss": curve[-1]}


def load_phase_store(cfg, path):
    return load_store(path, U.init_unetpp(phase_config(cfg), 0))


def stage_segment(cfg, out, images_dir, weights):
    d = Path(out) / "segment"
    d.mkdir(parents=True, exist_ok=True)
    store = load_phase_store(cfg, weights)
    ids = _ids(images_dir, "img_")
    for i in ids:
        img = read_gray(Path(images_dir) / f"img_{i}.pgm")
        write_mask(d / f"phase_{i}.pgm",
                   U.segment_phase(img, store, phase_config(cfg), cfg["phase"]["threshold"]))
    return {"images": len(ids)}


def _truth(images_dir, i):
    p = Path(images_dir) / f"truth_{i}.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


def stage_features(cfg, out, images_dir, boundary_dir, phase_dir, gd=None, hv=None):
    ids = _ids(images_dir, "img_")
    rows = []
    scale = cfg["synth"]["pixel_scale_um"]
    for i in ids:
        t = _truth(images_dir, i)
        g = t.get("gd_at_pct", gd)
        if g is None:
            raise ValueError(f"no Gd content for image {i}: pass --gd or provide truth_{i}.json")
        b = read_mask(Path(boundary_dir) / f"repaired_{i}.pgm")
        p = read_mask(Path(phase_dir) / f"phase_{i}.pgm")
        rows.append(assemble_features(g, b, p, t.get("pixel_scale_um", scale), t.get("hv_label", hv),
                                      intercept_spec(cfg), id=i))
    write_feature_table(Path(out) / "features.csv", rows)
    return rows


def _trained_paths(out):
    d = Path(out) / "hv"
    return d / "hv_weights.mgf", d / "hv_stats.json"


def stage_train_hv(cfg, out, table, log=None):
    rows = read_feature_table(table)
    model = R.train_regressor(rows, regressor_config(cfg), log=log)
    w, s = _trained_paths(out)
    w.parent.mkdir(parents=True, exist_ok=True)
    save_store(w, model.store)
    s.write_text(model.stats.to_json() + "\n", encoding="utf-8")
    write_loss_curve(w.parent / "hv_loss.csv", model.curve)
    return model


def load_hv_model(cfg, weights, stats):
    rcfg = regressor_config(cfg)
    store = R.init_regressor(rcfg, rcfg.seed)
    store.load_arrays(load_mgf(weights))
    st = R.StandardizerStats.from_json(Path(stats).read_text(encoding="utf-8"))
    return R.TrainedRegressor(store, st, rcfg)


def write_predictions(path, ids, actual, predicted):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,actual_hv,predicted_hv,abs_error\n")
        for i, a, p in zip(ids, actual, predicted):
            a_s = "" if a is None else repr(float(a))
            e_s = "" if a is None else repr(abs(float(a) - float(p)))
            fh.write(f"{i},{a_s},{float(p)!r},{e_s}\n")


def stage_loocv(cfg, out, table):
    rows = read_feature_table(table)
    res = R.loocv(rows, regressor_config(cfg))
    d = Path(out) / "hv"
    write_predictions(d / "loocv_predictions.csv", res.ids, res.actual, res.predicted)
    write_json(d / "loocv_metrics.json", res.metrics.to_dict())
    return res


def stage_predict(cfg, out, table, weights, stats):
    rows = read_feature_table(table)
    model = load_hv_model(cfg, weights, stats)
    preds = R.predict(rows, model)
    write_predictions(Path(out) / "hv" / "predictions.csv", [r.id for r in rows],
                      [r.hv for r in rows], preds)
    return preds


def stage_explain(cfg, out, table, weights, stats):
    rows = read_feature_table(table)
    model = load_hv_model(cfg, weights, stats)
    reports = S.explain_rows(lambda x: R.predict_matrix(x, model), rows)
    summary = S.shap_summary(reports, rows)
    d = Path(out) / "explain"
    write_json(d / "shap.json", summary)
    if cfg["explain"]["plots"]:
        S.plot_summary(d / "shap_summary.svg", reports, rows)
        for k, name in enumerate(FEATURE_NAMES):
            series = S.DependenceSeries.from_reports(reports, rows, k)
            S.plot_dependence(d / f"dependence_{name}.svg", series, summary["critical_values"][name])
    return summary


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_masks(pred, gt, mode, tol_px=2):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if mode == "edge":
        return asdict(E.edge_metrics(pred, gt, tol_px))
    if mode == "seg":
        return asdict(U.seg_metrics(pred, gt))
    raise ValueError(f"unknown evaluation mode {mode!r}")


def _mean_dict(items):
    keys = items[0].keys()
    return {k: float(np.mean([it[k] for it in items])) for k in keys}


def evaluation_block(cfg, out, images_dir):
    ids = _ids(images_dir, "img_")
    held = ids[cfg["synth"]["n_train"]:] or ids
    held = [i for i in held if (Path(images_dir) / f"boundary_{i}.pgm").exists()
            and (Path(images_dir) / f"phase_{i}.pgm").exists()]
    if not held:
        return {"images": [], "edge_detector": None, "edge_repaired": None, "segmentation": None}
    tol = cfg["edge"]["tol_px"]
    edge_rep, edge_raw, seg = [], [], []
    for i in held:
        gt_b = read_mask(Path(images_dir) / f"boundary_{i}.pgm")
        gt_p = read_mask(Path(images_dir) / f"phase_{i}.pgm")
        edge_rep.append(evaluate_masks(read_mask(Path(out) / "repair" / f"repaired_{i}.pgm"), gt_b, "edge", tol))
        raw = read_gray(Path(out) / "detect" / f"edge_{i}.pgm") >= cfg["repair"]["threshold"]
        edge_raw.append(evaluate_masks(RP.thin(raw), gt_b, "edge", tol))
        seg.append(evaluate_masks(read_mask(Path(out) / "segment" / f"phase_{i}.pgm"), gt_p, "seg"))
    return {
        "images": held,
        "edge_detector": _mean_dict(edge_raw),
        "edge_repaired": _mean_dict(edge_rep),
        "segmentation": _mean_dict(seg),
    }


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------

STAGES = ("synth", "train-edges", "detect-edges", "repair", "train-phase", "segment-phase",
          "features", "loocv", "train-hv", "explain", "evaluate")


def check_paths(cfg):
    """Every non-empty input path in the config must exist before any work starts."""
    for key in ("data_dir", "edge_weights", "phase_weights"):
        value = cfg["paths"][key]
        if value and not Path(value).exists():
            raise FileNotFoundError(value)


class OutputLock:
    """Exclusive ownership of an output directory via an O_EXCL lock file."""

    def __init__(self, out):
        self.path = Path(out) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is in use (remove {self.path} if stale)") from None
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def run_pipeline(cfg, out, log=None):
    """Run every stage in order and write ``run_report.json``."""
    check_paths(cfg)
    with OutputLock(out):
        return _run(cfg, Path(out), log)


def _run(cfg, out, log):
    data = cfg["paths"]["data_dir"]
    images = Path(data) if data else out / "synth"
    timings = {}
    summaries = {}

    def run(name, fn, *args):
        t0 = time.perf_counter()
        try:
            summaries[name] = fn(*args)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        timings[name] = time.perf_counter() - t0
        if log:
            log(f"{name}: done in {timings[name]:.1f}s")

    if not data:
        run("synth", stage_synth, cfg, out)
    edge_w = cfg["paths"]["edge_weights"]
    if not edge_w:
        run("train-edges", stage_train_edges, cfg, out, images, log)
        edge_w = out / "edge" / "edge_weights.mgf"
    run("detect-edges", stage_detect, cfg, out, images, edge_w)
    run("repair", stage_repair, cfg, out, images, out / "detect")
    phase_w = cfg["paths"]["phase_weights"]
    if not phase_w:
        run("train-phase", stage_train_phase, cfg, out, images, log)
        phase_w = out / "phase" / "phase_weights.mgf"
    run("segment-phase", stage_segment, cfg, out, images, phase_w)
    run("features", stage_features, cfg, out, images, out / "repair", out / "segment")
    table = out / "features.csv"
    run("loocv", stage_loocv, cfg, out, table)
    run("train-hv", stage_train_hv, cfg, out, table, log)
    w, s = _trained_paths(out)
    run("explain", stage_explain, cfg, out, table, w, s)
    run("evaluate", evaluation_block, cfg, out, images)

    loo = summaries["loocv"]
    report = {
        "stages": list(timings),
        "features": [dict(id=r.id, **{k: getattr(r, k) for k in FEATURE_NAMES}, hv=r.hv)
                     for r in summaries["features"]],
        "metrics": {
            "edge": {"detector": summaries["evaluate"]["edge_detector"],
                     "repaired": summaries["evaluate"]["edge_repaired"]},
            "segmentation": summaries["evaluate"]["segmentation"],
            "regression": {"loocv": loo.metrics.to_dict()},
        },
        "evaluated_images": summaries["evaluate"]["images"],
        "shap": {"path": "explain/shap.json",
                 "ranking": [e["feature"] for e in summaries["explain"]["ranking"]]},
        "timings_s": {k: round(v, 3) for k, v in timings.items()} if cfg["run"]["record_timings"] else None,
    }
    write_json(out / "run_report.json", report)
    return report, timings

"""``mgmicro`` command line.

Exit codes: 0 success, 1 missing input or runtime error, 2 usage error.
"""
import argparse
import json
import sys
from pathlib import Path

from . import pipeline as P
from .config import ConfigError, defaults, load_config
from .imageio import read_mask

# subcommand -> owning module, named in error diagnostics
MODULES = {
    "synth": "synth-micrograph",
    "augment": "pdc-edge-net",
    "train-edges": "pdc-edge-net",
    "detect-edges": "pdc-edge-net",
    "repair": "edge-repair",
    "train-phase": "phase-segmenter",
    "segment-phase": "phase-segmenter",
    "features": "micro-features",
    "train-hv": "hv-regressor",
    "loocv": "hv-regressor",
    "predict": "hv-regressor",
    "explain": "shapley-explainer",
    "evaluate": "pipeline-cli",
    "pipeline": "pipeline-cli",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="pipeline config file")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: [paths] out_dir)")

    parser = argparse.ArgumentParser(prog="mgmicro", description="Mg-Gd micrograph to hardness pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    p = add("synth", "render synthetic micrographs (or a feature table with --table-rows)")
    p.add_argument("--n", type=int, help="number of images (overrides [synth] n_images)")
    p.add_argument("--table-rows", type=int, help="write a synthetic features.csv with this many rows instead")
    p.add_argument("--law", choices=("hall_petch", "linear"), default="hall_petch")
    p.add_argument("--noise-sigma", type=float, default=2.0)

    p = add("augment", "write rotated/flipped crops of the training images")
    p.add_argument("--images", required=True, metavar="DIR")

    p = add("train-edges", "train the edge detector")
    p.add_argument("--images", required=True, metavar="DIR")

    p = add("detect-edges", "edge probability maps")
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--weights", required=True, metavar="PATH")

    p = add("repair", "repair detected boundaries")
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--edges", required=True, metavar="DIR")

    p = add("train-phase", "train the phase segmenter")
    p.add_argument("--images", required=True, metavar="DIR")

    p = add("segment-phase", "second-phase masks")
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--weights", required=True, metavar="PATH")

    p = add("features", "measure the feature table")
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--boundaries", required=True, metavar="DIR")
    p.add_argument("--phases", required=True, metavar="DIR")
    p.add_argument("--gd", type=float, help="Gd content for images without a truth record")
    p.add_argument("--hv", type=float, help="hardness label for images without a truth record")

    for name, text in (("train-hv", "train the deployed hardness model"), ("loocv", "leave-one-out evaluation")):
        p = add(name, text)
        p.add_argument("--table", required=True, metavar="CSV")

    for name, text in (("predict", "predict hardness for a feature table"),
                       ("explain", "Shapley attributions for a feature table")):
        p = add(name, text)
        p.add_argument("--table", required=True, metavar="CSV")
        p.add_argument("--weights", required=True, metavar="PATH")
        p.add_argument("--stats", required=True, metavar="PATH")

    p = add("evaluate", "compare a predicted mask with ground truth; prints JSON")
    p.add_argument("--pred", required=True, metavar="PATH")
    p.add_argument("--gt", required=True, metavar="PATH")
    p.add_argument("--mode", required=True, choices=("edge", "seg"))
    p.add_argument("--tol", type=int, help="edge match tolerance in px (default: [edge] tol_px)")

    add("pipeline", "run every stage and write run_report.json")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else defaults()
    if args.seed is not None:
        cfg.set("run", "seed", args.seed)
    return cfg


def _need(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(str(p))


def run_command(args, log):
    cfg = _config(args)
    out = Path(args.out or cfg["paths"]["out_dir"])
    cmd = args.command

    if cmd == "synth":
        if args.table_rows is not None:
            P.stage_synth_table(cfg, out, args.table_rows, args.law, args.noise_sigma)
            return f"synth: wrote {args.table_rows} rows to {out / 'features.csv'}"
        if args.n is not None:
            cfg.set("synth", "n_images", args.n)
        P.stage_synth(cfg, out)
        return f"synth: wrote {cfg['synth']['n_images']} images to {out / 'synth'}"
    if cmd == "augment":
        r = P.stage_augment(cfg, out, args.images)
        return f"augment: {r['crops']} crops (x{r['factor']:g}) in {out / 'augment'}"
    if cmd == "train-edges":
        r = P.stage_train_edges(cfg, out, args.images, log)
        return f"train-edges: {r['samples']} crops, final loss {r['final_loss']:.4f}"
    if cmd == "detect-edges":
        _need(args.weights)
        r = P.stage_detect(cfg, out, args.images, args.weights)
        return f"detect-edges: {r['images']} maps in {out / 'detect'}"
    if cmd == "repair":
        _need(args.edges)
        r = P.stage_repair(cfg, out, args.images, args.edges)
        return f"repair: {r['images']} masks in {out / 'repair'}"
    if cmd == "train-phase":
        r = P.stage_train_phase(cfg, out, args.images, log)
        return f"train-phase: final loss {r['final_loss']:.4f}"
    if cmd == "segment-phase":
        _need(args.weights)
        r = P.stage_segment(cfg, out, args.images, args.weights)
        return f"segment-phase: {r['images']} masks in {out / 'segment'}"
    if cmd == "features":
        _need(args.boundaries, args.phases)
        rows = P.stage_features(cfg, out, args.images, args.boundaries, args.phases, args.gd, args.hv)
        return f"features: {len(rows)} rows in {out / 'features.csv'}"
    if cmd == "train-hv":
        m = P.stage_train_hv(cfg, out, args.table, log)
        return f"train-hv: final loss {m.curve[-1]:.5f}"
    if cmd == "loocv":
        r = P.stage_loocv(cfg, out, args.table).metrics
        return f"loocv: mae {r.mae:.3f} rmse {r.rmse:.3f} r2 {r.r2:.4f}"
    if cmd == "predict":
        _need(args.table, args.weights, args.stats)
        preds = P.stage_predict(cfg, out, args.table, args.weights, args.stats)
        return f"predict: {len(preds)} predictions in {out / 'hv' / 'predictions.csv'}"
    if cmd == "explain":
        _need(args.table, args.weights, args.stats)
        s = P.stage_explain(cfg, out, args.table, args.weights, args.stats)
        return "explain: ranking " + " > ".join(e["feature"] for e in s["ranking"])
    if cmd == "evaluate":
        _need(args.pred, args.gt)
        tol = cfg["edge"]["tol_px"] if args.tol is None else args.tol
        res = P.evaluate_masks(read_mask(args.pred), read_mask(args.gt), args.mode, tol)
        return json.dumps(res, sort_keys=True)
    if cmd == "pipeline":
        report, _ = P.run_pipeline(cfg, out, log)
        m = report["metrics"]["regression"]["loocv"]
        return f"pipeline: {len(report['stages'])} stages, loocv r2 {m['r2']:.4f}, report {out / 'run_report.json'}"
    raise AssertionError(cmd)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2

    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    module = MODULES[args.command]
    try:
        print(run_command(args, log))
    except FileNotFoundError as exc:
        print(f"mgmicro: error: missing input: {exc.filename or exc.args[0]}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"mgmicro: error: [config] {exc}", file=sys.stderr)
        return 1
    except P.StageError as exc:
        stage_module = MODULES.get(exc.stage, exc.stage)
        print(f"mgmicro: error: [{stage_module}] {exc.__cause__ or exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"mgmicro: error: [{module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

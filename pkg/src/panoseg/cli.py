"""Command-line surface: data generation, training, evaluation, inference,
and self-verification. Exit codes: 0 ok, 1 usage, 2 data error, 3
verification failure."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data_io, verify
from .data_io import (CLASS_NAMES, N_CLASSES, FormatError, generate_dataset,
                      read_manifest, read_sample, write_label_ppm, write_tensor)
from .encoder import EncoderConfig
from .geometry import black_area_mask
from .model import ModelConfig, SegModel, bundle_from_sample
from .training import (LossSchedule, compute_metrics, edge_eval,
                       predict_labels, train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


_CONFIG_KEYS = {
    "command", "data", "out", "samples", "height", "seed", "modalities",
    "dual_view", "loss", "epochs", "lr", "freeze_encoder", "attention",
    "use_branches", "augment", "float64", "straddle_p", "mcbam_window",
    "mcbam_stride", "aux_view_weight",
}


def _write_config(out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


def load_config(path):
    with open(path) as f:
        cfg = json.load(f)
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def _model_from_config(cfg, height, dtype):
    mods = tuple(cfg["modalities"].split(","))
    name_map = {"rgb": "rgb", "d": "depth", "n": "normals"}
    try:
        mods = tuple(name_map[m] for m in mods)
    except KeyError as exc:
        raise ValueError(f"unknown modality {exc}") from None
    patch = 16 if height % 16 == 0 and height >= 64 else 8
    enc = EncoderConfig(patch=patch)
    mc = ModelConfig(
        image_h=height, image_w=2 * height, n_classes=N_CLASSES,
        modalities=mods, dual_view=cfg["dual_view"],
        use_branches=cfg.get("use_branches", True),
        attention=cfg.get("attention", "mcbam"),
        mcbam_window=tuple(cfg.get("mcbam_window", (4, 4))),
        mcbam_stride=tuple(cfg.get("mcbam_stride", (2, 2))),
        encoder=enc)
    return SegModel(mc, seed=cfg["seed"], dtype=dtype)


def _load_samples(data_dir, ids, modalities):
    return [read_sample(data_dir, sid, modalities) for sid in ids]


def cmd_gen_data(args):
    manifest = generate_dataset(args.out, args.samples, args.height, args.seed,
                                straddle_p=args.straddle_p)
    print(f"wrote {args.samples} samples to {args.out}; d_t = {manifest['d_t']}")
    return EXIT_OK


def cmd_train(args):
    cfg = {
        "command": "train", "data": args.data, "out": args.out,
        "modalities": args.modalities, "dual_view": args.dual_view,
        "loss": args.loss, "epochs": args.epochs, "lr": args.lr,
        "seed": args.seed, "freeze_encoder": args.freeze_encoder,
        "attention": args.attention, "use_branches": args.use_branches,
        "augment": args.augment, "float64": args.float64,
        "aux_view_weight": args.aux_view_weight,
    }
    manifest = read_manifest(args.data)
    model = _model_from_config(cfg, _dataset_height(args.data, manifest),
                               np.float64 if args.float64 else np.float32)
    missing = [m for m in model.cfg.modalities if m != "rgb"
               and not os.path.exists(os.path.join(
                   args.data, manifest["splits"]["train"][0], f"{m}.ptns"))]
    if missing:
        raise FormatError(f"dataset lacks requested modalities: {missing}")
    if args.freeze_encoder:
        model.freeze_encoder()
    n_train = sum(p.data.size for p in
                  model.named_parameters(trainable_only=True).values())
    n_total = sum(p.data.size for p in model.params.values())
    print(f"parameters: {n_train} trainable / {n_total} total")

    samples = _load_samples(args.data, manifest["splits"]["train"],
                            model.cfg.modalities)
    schedule = {"jaccard": LossSchedule("jaccard"),
                "ce": LossSchedule("cross_entropy"),
                "alternating": LossSchedule("alternating")}[args.loss]
    rows = []
    history = train(model, samples, manifest["d_t"], args.epochs, args.lr,
                    schedule=schedule, seed=args.seed, use_augment=args.augment,
                    aux_view_weight=args.aux_view_weight,
                    log=lambda e, l: (rows.append(f"{e},{l:.8f}"),
                                      print(f"epoch {e}: loss {l:.6f}"))[0])
    os.makedirs(args.out, exist_ok=True)
    _write_config(args.out, cfg)
    with open(os.path.join(args.out, "loss.csv"), "w") as f:
        f.write("epoch,loss\n" + "\n".join(rows) + "\n")
    model.save_checkpoint(os.path.join(args.out, "model.ckpt"))
    print(f"checkpoint written to {os.path.join(args.out, 'model.ckpt')}")
    return EXIT_OK


def _dataset_height(data_dir, manifest):
    first = (manifest["splits"]["train"] or manifest["splits"]["val"])[0]
    return data_io.read_tensor(os.path.join(data_dir, first, "rgb.ptns")).shape[1]


def _load_model(ckpt_path, data_dir, single_view=False):
    run_dir = os.path.dirname(os.path.abspath(ckpt_path))
    cfg = load_config(os.path.join(run_dir, "config.json"))
    manifest = read_manifest(data_dir)
    model = _model_from_config(cfg, _dataset_height(data_dir, manifest),
                               np.float32)
    model.load_checkpoint(ckpt_path)
    if single_view:
        model.cfg.dual_view = False
    return model, cfg, manifest


def cmd_eval(args):
    model, cfg, manifest = _load_model(args.ckpt, args.data, args.single_view)
    ratios = [float(r) for r in args.edge_ratios.split(",")] if args.edge_ratios else []
    samples = _load_samples(args.data, manifest["splits"]["val"],
                            model.cfg.modalities)
    global_report = None
    edge_reports = {r: None for r in ratios}
    for s in sorted(samples, key=lambda s: s.id):
        pred = predict_labels(model, s, manifest["d_t"], refine=args.refine)
        ignore = black_area_mask(s.rgb) if model.cfg.modalities == ("rgb",) else None
        rep = compute_metrics(pred, s.labels, ignore, N_CLASSES)
        global_report = rep if global_report is None else global_report.merge(rep)
        for r, er in edge_eval(pred, s.labels, ignore, N_CLASSES, ratios).items():
            edge_reports[r] = er if edge_reports[r] is None \
                else edge_reports[r].merge(er)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics_global.csv"), "w") as f:
        f.write("\n".join(global_report.csv_rows(CLASS_NAMES)) + "\n")
    for r, rep in edge_reports.items():
        with open(os.path.join(args.out, f"metrics_edge_{r}.csv"), "w") as f:
            f.write("\n".join(rep.csv_rows(CLASS_NAMES)) + "\n")
    tag = "refined " if args.refine else ""
    view = "single-view" if args.single_view else "dual-view"
    print(f"{tag}{view} global mIoU {100 * global_report.miou:.2f} "
          f"mAcc {100 * global_report.macc:.2f}")
    for r, rep in edge_reports.items():
        print(f"  edge {r}: mIoU {100 * rep.miou:.2f} mAcc {100 * rep.macc:.2f}")
    return EXIT_OK


def cmd_infer(args):
    data_dir = os.path.dirname(os.path.abspath(args.sample.rstrip("/")))
    sample_id = os.path.basename(args.sample.rstrip("/"))
    model, cfg, manifest = _load_model(args.ckpt, data_dir)
    sample = read_sample(data_dir, sample_id, model.cfg.modalities)
    pred = predict_labels(model, sample, manifest["d_t"], refine=args.refine)
    os.makedirs(args.out, exist_ok=True)
    write_tensor(os.path.join(args.out, f"{sample_id}_labels.ptns"),
                 pred.astype(np.uint8))
    write_label_ppm(os.path.join(args.out, f"{sample_id}_labels.ppm"), pred)
    print(f"wrote prediction for {sample_id} to {args.out}")
    return EXIT_OK


def cmd_verify(args):
    results = verify.run_suites(args.suite, quick=args.quick)
    worst = 0.0
    ok = True
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"[{status}] {r['name']}: max error {r['max_error']:.3e} "
              f"(tol {r['tolerance']:.1e})")
        worst = max(worst, r["max_error"] / r["tolerance"])
        ok = ok and r["ok"]
    print(f"{len(results)} checks, worst error/tol ratio {worst:.3f}")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser():
    parser = _Parser(prog="panoseg",
                     description="panoramic segmentation toolbox")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=32)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--straddle-p", type=float, default=0.5, dest="straddle_p")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--modalities", default="rgb",
                   help="comma list from rgb,d,n (rgb required)")
    t.add_argument("--dual-view", action="store_true", dest="dual_view")
    t.add_argument("--single-view", action="store_false", dest="dual_view")
    t.add_argument("--loss", choices=("jaccard", "ce", "alternating"),
                   default="jaccard")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--freeze-encoder", action="store_true")
    t.add_argument("--attention", choices=("none", "channel", "cbam", "mcbam"),
                   default="mcbam")
    t.add_argument("--no-branches", action="store_false", dest="use_branches")
    t.add_argument("--augment", action="store_true")
    t.add_argument("--float64", action="store_true")
    t.add_argument("--aux-view-weight", type=float, default=0.0)
    t.set_defaults(fn=cmd_train, dual_view=True, use_branches=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--edge-ratios", default="", dest="edge_ratios")
    e.add_argument("--refine", action="store_true")
    e.add_argument("--single-view", action="store_true")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="segment one stored sample")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sample", required=True, help="path to a sample dir")
    i.add_argument("--out", required=True)
    i.add_argument("--refine", action="store_true")
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("verify", help="run gradient/oracle self checks")
    v.add_argument("--suite", choices=("grads", "oracles", "all"), default="all")
    v.add_argument("--quick", action="store_true")
    v.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (FileNotFoundError, FormatError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

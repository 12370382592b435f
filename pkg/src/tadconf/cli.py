"""Command-line interface: ``tadconf <command> ...``."""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, config as C, formats, pipeline, report
from .assign import LabelSpace, assign_targets
from .decode import FUSION_MODES, DecodeConfig, canonical_fusion
from .evaluation import LENGTH_GROUPS, SegmentTable, evaluate
from .heads import checkpoint_bytes, weights_from_bytes
from .losses import TrainingDiverged, gradient_check, random_instance
from .synth import generate_dataset
from .timeline import location_grid

log = logging.getLogger("tadconf")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _config(args) -> dict:
    return C.build_config(getattr(args, "config", None), getattr(args, "set", None) or ())


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    scfg = C.synth_config(cfg)
    seqs = pipeline.as_videos(generate_dataset(scfg))
    formats.write_dataset(args.out, seqs, scfg.labels)
    n = sum(len(v.segments) for v in seqs)
    print(f"wrote {len(seqs)} sequences with {n} actions to {args.out}")


def cmd_assign(args):
    cfg = _config(args)
    labels, videos = formats.read_annotations(args.annotations)
    a = cfg["assign"]
    out = {"version": 1, "alpha": a["alpha"], "vocabulary": labels.to_dict(), "videos": {}}
    for v in videos:
        grid = location_grid(formats.num_frames(v), a["num_levels"], a["scale_factor"])
        segs = pipeline.segments_in_frames(v["segments"], v["frame_rate"])
        tg = assign_targets(grid, segs, labels, a["alpha"])
        pos = tg.is_positive
        out["videos"][v["id"]] = {
            "level": grid.level.tolist(),
            "index": grid.index.tolist(),
            "t": grid.t.tolist(),
            "is_positive": pos.tolist(),
            "class_targets": [np.flatnonzero(row).tolist() for row in tg.class_targets],
            "r_s": np.where(pos, tg.r_s, 0.0).tolist(),
            "r_e": np.where(pos, tg.r_e, 0.0).tolist(),
            "p_s": tg.p_s.tolist(),
            "p_e": tg.p_e.tolist(),
        }
    formats.write_json(args.out, out)
    print(f"wrote targets for {len(videos)} videos to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    labels, videos = formats.read_dataset(args.data)
    if not videos:
        raise formats.FormatError(f"{args.data}: dataset has no videos")
    tcfg = C.train_config(cfg)
    m = cfg["model"]

    def progress(step, parts):
        if step == 1 or step % 50 == 0 or step == tcfg.steps:
            log.info("step %d total %.5f", step, parts.total)

    w, trace = pipeline.train(videos, labels, tcfg, hidden=m["hidden"], init_seed=m["init_seed"],
                              confidence_mode=m["confidence_mode"], callback=progress)
    extra = {"labels": labels.to_dict(), "sigma": m["sigma"], "num_levels": len(videos[0].pyramid),
             "config": cfg}
    formats.atomic_write(args.out, checkpoint_bytes(w, extra))
    if args.trace:
        rows = [["step", "l_cls", "l_giou", "l_conf_s", "l_conf_e", "total"]]
        rows += [[str(i + 1)] + [repr(float(x)) for x in p.as_row()] for i, p in enumerate(trace)]
        formats.atomic_write(args.trace, "".join(",".join(r) + "\n" for r in rows))
    first, best = trace[0].total, min(p.total for p in trace)
    print(f"trained {len(trace)} steps: loss {first:.6f} -> min {best:.6f} "
          f"({100.0 * pipeline.mean_loss_drop(trace):.1f}% drop)")


def _load_model(path):
    w, extra = weights_from_bytes(Path(path).read_bytes())
    return w, LabelSpace.from_dict(extra["labels"]), extra


def _decode_settings(args, cfg, extra):
    overrides = {}
    if getattr(args, "fusion", None):
        overrides["fusion"] = canonical_fusion(args.fusion)
    if getattr(args, "topv", None) is not None:
        overrides["topv"] = args.topv
    if getattr(args, "topn", None) is not None:
        overrides["topn"] = args.topn
    d = dict(cfg["decode"], **overrides)
    sigma = args.sigma if getattr(args, "sigma", None) is not None else extra.get("sigma", cfg["model"]["sigma"])
    return DecodeConfig(**d), float(sigma)


def _check_vocab(data_labels, model_labels, where):
    if data_labels.to_dict() != model_labels.to_dict():
        raise formats.FormatError(f"{where}: vocabulary {data_labels.to_dict()} does not match the "
                                  f"checkpoint's {model_labels.to_dict()}")


def cmd_infer(args):
    cfg = _config(args)
    w, labels, extra = _load_model(args.ckpt)
    data_labels, videos = formats.read_dataset(args.data)
    _check_vocab(data_labels, labels, args.data)
    dcfg, sigma = _decode_settings(args, cfg, extra)
    dets = pipeline.detect(w, videos, labels, dcfg, sigma)
    formats.write_json(args.out, formats.detections_json(dets))
    print(f"wrote {sum(len(d) for d in dets.values())} detections for {len(dets)} videos to {args.out}")


def _stem(out: Path) -> Path:
    return out.with_suffix("")


def cmd_eval(args):
    cfg = _config(args)
    labels, videos = formats.read_annotations(args.annotations)
    results = formats.read_detections(args.detections, labels)
    known = {v["id"] for v in videos}
    unknown = sorted(set(results) - known)
    if unknown:
        raise formats.FormatError(f"{args.detections}: detections for unknown video ids {unknown[:5]}")
    thresholds = args.thresholds or cfg["eval"]["thresholds"]
    gts = SegmentTable.from_json({v["id"]: v["segments"] for v in videos}, with_score=False)
    dets = SegmentTable.from_json(results, with_score=True)
    budgets = cfg["eval"]["curve_budgets"] if args.curves else None
    rep = evaluate(dets, gts, thresholds, curve_budgets=budgets,
                   length_groups=LENGTH_GROUPS if args.length_groups else None)
    out = Path(args.out)
    doc = rep.to_json()
    doc["inputs"] = {"detections_sha256": _sha256(args.detections), "annotations_sha256": _sha256(args.annotations)}
    formats.write_json(out, doc)
    stem = _stem(out)
    formats.atomic_write(f"{stem}.csv", report.map_table_csv(rep))
    formats.atomic_write(f"{stem}_per_class.csv", report.per_class_csv(rep))
    if rep.curves is not None:
        formats.atomic_write(f"{stem}_curves.csv", report.curves_csv(rep.curves))
        prov = (f"tadconf {__version__} boundary-error curves; detections sha256 "
                f"{doc['inputs']['detections_sha256']}; annotations sha256 {doc['inputs']['annotations_sha256']}; "
                f"matching tIoU 0.5; budgets {','.join(f'{b:g}' for b in rep.curves['budgets'])}")
        formats.atomic_write(f"{stem}_curves.svg", report.curves_svg(rep.curves, prov))
    if rep.length_groups is not None:
        formats.atomic_write(f"{stem}_length_groups.csv", report.length_groups_csv(rep.length_groups))
    cols = "  ".join(f"{t:g}:{100 * rep.map_per_threshold[t]:.2f}" for t in rep.thresholds)
    print(f"mAP {cols}  Avg:{100 * rep.average_map:.2f}")


SWEEP_DEFAULTS = {
    "sigma": "4,4.5,5,5.5,6",
    "fusion": ",".join(FUSION_MODES),
    "topvn": "1x3,3x9,5x15,10x30",
}


def cmd_sweep(args):
    cfg = _config(args)
    w, labels, extra = _load_model(args.ckpt)
    data_labels, videos = formats.read_dataset(args.data)
    _check_vocab(data_labels, labels, args.data)
    thresholds = args.thresholds or cfg["eval"]["thresholds"]
    gts = pipeline.ground_truth_table(videos)
    values = (args.values or SWEEP_DEFAULTS[args.param]).split(",")
    if args.param == "topvn" and not labels.multitask:
        raise C.ConfigError("--param topvn needs a verb/noun vocabulary")
    rows = []
    for raw in values:
        raw = raw.strip()
        ns = argparse.Namespace(fusion=None, sigma=None, topv=None, topn=None)
        if args.param == "sigma":
            ns.sigma = float(raw)
        elif args.param == "fusion":
            ns.fusion = raw
        else:
            v, n = raw.lower().split("x")
            ns.topv, ns.topn = int(v), int(n)
        dcfg, sigma = _decode_settings(ns, cfg, extra)
        dets = pipeline.detect(w, videos, labels, dcfg, sigma)
        rep = evaluate(pipeline.detection_table(dets), gts, thresholds)
        rows.append((raw, rep))
        log.info("%s=%s avg mAP %.4f", args.param, raw, rep.average_map)
    text = report.sweep_csv(args.param, rows, thresholds)
    formats.atomic_write(args.out, text)
    sys.stdout.write(text)


def cmd_gradcheck(args):
    worst, worst_at = 0.0, None
    for k in range(args.instances):
        seed = args.seed * 100003 + k
        w, batch, targets, labels = random_instance(seed)
        err = gradient_check(w, batch, targets, labels, eps=args.eps, seed=seed)
        if err > worst:
            worst, worst_at = err, seed
    status = "ok" if worst < args.tolerance else "FAILED"
    print(f"worst relative error {worst:.3e} over {args.instances} instances "
          f"(instance seed {worst_at}); tolerance {args.tolerance:g}: {status}")
    return 0 if worst < args.tolerance else 1


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tadconf", description=__doc__)
    p.add_argument("--version", action="version", version=f"tadconf {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON or YAML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("assign", help="dump per-location training targets")
    with_config(sp)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_assign)

    sp = sub.add_parser("train", help="train the heads")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--trace", help="loss trace CSV")
    sp.set_defaults(func=cmd_train)

    def decode_flags(sp):
        sp.add_argument("--data", required=True)
        sp.add_argument("--ckpt", required=True)

    sp = sub.add_parser("infer", help="decode detections")
    with_config(sp)
    decode_flags(sp)
    sp.add_argument("--out", required=True, help="detections JSON")
    sp.add_argument("--fusion", help=f"score fusion mode ({', '.join(FUSION_MODES)})")
    sp.add_argument("--sigma", type=float, help="confidence scaling sigma")
    sp.add_argument("--topv", type=int)
    sp.add_argument("--topn", type=int)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="evaluate detections")
    with_config(sp)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--thresholds", type=_floats, help="comma-separated tIoU thresholds")
    sp.add_argument("--out", required=True, help="report JSON (CSV and plot files are written next to it)")
    sp.add_argument("--curves", action="store_true", help="boundary-error curves (CSV + SVG)")
    sp.add_argument("--length-groups", action="store_true", help="length-stratified mAP")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="infer + eval over a parameter grid")
    with_config(sp)
    decode_flags(sp)
    sp.add_argument("--param", required=True, choices=sorted(SWEEP_DEFAULTS))
    sp.add_argument("--values", help="comma-separated values (topvn values look like 10x30)")
    sp.add_argument("--thresholds", type=_floats)
    sp.add_argument("--out", required=True, help="combined CSV")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        rc = args.func(args)
    except (formats.FormatError, C.ConfigError, TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"tadconf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())

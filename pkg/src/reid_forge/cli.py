"""Command-line entry point: generate | split | train | evaluate | detect-eval |
afc | report.

Every subcommand accepts --config pointing at a JSON file; explicit flags
override config values. Outputs land under --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbone import BackboneConfig
from .data import load_manifest, make_query_gallery_split, save_manifest
from .detect import (
    baseline_part_detector,
    detection_metrics,
    load_detections,
    nms,
    save_detections,
    select_parts,
)
from .errors import ConfigurationError, ReidForgeError
from .evalreid import EvalReport, make_2afc_benchmark, save_report, score_2afc
from .losses import term_weights_from_config
from .synth import SynthConfig, generate_dataset
from .trainer import (
    ImageStore,
    TrainConfig,
    embed_records,
    evaluate_checkpoint,
    load_model_checkpoint,
    save_model_checkpoint,
    train,
    write_loss_log,
)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merge(config: dict, args: argparse.Namespace, keys: dict[str, str]) -> dict:
    """Start from config-file values, let explicitly passed flags win."""
    merged = dict(config)
    for attr, key in keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            merged[key] = value
    return merged


def _cmd_generate(args) -> int:
    config = _load_config(args.config)
    merged = _merge(
        config,
        args,
        {
            "n_identities": "n_identities",
            "images_per_identity": "images_per_identity",
            "n_cameras": "n_cameras",
            "image_size": "image_size",
            "noise_sigma": "noise_sigma",
            "train_identities": "train_identities",
            "camera_tint": "camera_tint",
            "attribute_seed": "attribute_seed",
        },
    )
    if args.part_min is not None or args.part_max is not None:
        lo, hi = merged.get("part_size_range", SynthConfig.part_size_range)
        merged["part_size_range"] = (
            args.part_min if args.part_min is not None else lo,
            args.part_max if args.part_max is not None else hi,
        )
    if args.twins is not None:
        merged["attribute_twins"] = args.twins
    if "part_size_range" in merged:
        merged["part_size_range"] = tuple(merged["part_size_range"])
    for key in ("n_identities", "images_per_identity"):
        if key not in merged:
            raise ConfigurationError(
                f"generate needs {key}, either as a flag or in the config file"
            )
    synth_config = SynthConfig(**merged)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest, _ = generate_dataset(synth_config, seed=args.seed, out_dir=out)
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.jsonl'}")
    return 0


def _cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    split = make_query_gallery_split(manifest, args.fraction, args.seed)
    out = Path(args.out) if args.out else Path(args.manifest)
    save_manifest(split, out)
    n_query = len(split.subset("query"))
    n_gallery = len(split.subset("gallery"))
    print(f"split: {n_query} query, {n_gallery} gallery -> {out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    config = _load_config(args.config)
    merged = _merge(
        config,
        args,
        {
            "variant": "variant",
            "epochs": "epochs",
            "decay_start": "decay_start",
            "lr0": "lr0",
            "p": "p",
            "k": "k",
            "margin": "margin",
            "gamma": "gamma",
            "seed": "seed",
            "conf_thr": "conf_thr",
            "nms_thr": "nms_thr",
        },
    )
    if args.gt_parts is not None:
        merged["gt_parts"] = args.gt_parts
    weights = term_weights_from_config(merged)
    for key in list(merged):
        if key.startswith("w_"):
            merged.pop(key)
    if weights:
        merged["term_weights"] = weights
    backbone_keys = {}
    for key in ("image_size", "conv_channels", "kernel", "stride", "in_channels"):
        if key in merged:
            backbone_keys[key] = merged.pop(key)
    if backbone_keys:
        if "conv_channels" in backbone_keys:
            backbone_keys["conv_channels"] = tuple(backbone_keys["conv_channels"])
        merged["backbone"] = BackboneConfig(**backbone_keys)
    return TrainConfig(**merged)


def _cmd_train(args) -> int:
    config = _train_config_from_args(args)
    manifest = load_manifest(args.manifest)
    store = ImageStore(manifest, root=args.data or Path(args.manifest).parent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    result = train(manifest, config, store)
    write_loss_log(result.history, out / "loss_log.csv")
    save_model_checkpoint(
        out / "checkpoint.tnsrck",
        result.model,
        result.adam,
        result.identity_index,
        epoch=config.epochs,
        train_meta={"variant": config.variant, "gamma": config.gamma, "seed": config.seed},
    )
    final = result.history[-1]
    print(
        f"trained {config.variant} for {config.epochs} epochs; "
        f"final combined loss {final['combined']:.4f} -> {out / 'checkpoint.tnsrck'}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    store = ImageStore(manifest, root=args.data or Path(args.manifest).parent)
    detections = load_detections(args.detections) if args.detections else None
    report = evaluate_checkpoint(
        args.checkpoint,
        manifest,
        store,
        feature=args.feature,
        gamma=args.gamma,
        gt_parts=bool(args.gt_parts),
        detections=detections,
        conf_thr=args.conf_thr,
        nms_thr=args.nms_thr,
        iou_thr=args.iou_thr,
        cross_camera_only=args.cross_camera_only,
        l2_normalize=args.l2_normalize,
        max_rank=args.max_rank,
    )
    out = Path(args.out)
    save_report(report, out, stem=args.stem)
    print(
        f"mAP {report.map_score:.4f}  CMC-1 {report.cmc[0]:.4f}  "
        f"({report.meta['n_query']} queries) -> {out / (args.stem + '.json')}"
    )
    return 0


def _cmd_detect_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    store = ImageStore(manifest, root=args.data or Path(args.manifest).parent)
    test = [r for r in manifest.records if r.split != "train"]
    detections = {}
    for rec in test:
        detections[rec.image_id] = baseline_part_detector(
            store.get(rec.image_id), window=args.window
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_detections(detections, out / "detections.jsonl")

    processed = {
        image_id: [
            d
            for d in nms(dets, args.nms_thr)
            if d.score >= args.conf_thr
        ]
        for image_id, dets in detections.items()
    }
    truth = {r.image_id: list(r.parts) for r in test}
    metrics = detection_metrics(processed, truth, args.conf_thr, args.iou_thr)
    with open(out / "detection_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "precision": metrics.precision,
                "recall": metrics.recall,
                "f_score": metrics.f_score,
                "tp": metrics.tp,
                "fp": metrics.fp,
                "fn": metrics.fn,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    with open(out / "detection_per_image.csv", "w", encoding="utf-8") as fh:
        fh.write("image_id,tp,fp,fn\n")
        for row in metrics.per_image:
            fh.write(f"{row['image_id']},{row['tp']},{row['fp']},{row['fn']}\n")
    print(
        f"detection P {metrics.precision:.4f} R {metrics.recall:.4f} "
        f"F {metrics.f_score:.4f} over {len(test)} images -> {out}"
    )
    return 0


def _cmd_afc(args) -> int:
    manifest = load_manifest(args.manifest)
    store = ImageStore(manifest, root=args.data or Path(args.manifest).parent)
    benchmark = make_2afc_benchmark(
        manifest, n_trials=args.trials, seed=args.seed, allow_fewer=args.allow_fewer
    )
    model, _, _ = load_model_checkpoint(args.checkpoint)
    by_id = {r.image_id: r for r in manifest.records}
    needed = sorted({t.query for t in benchmark} | {t.positive for t in benchmark} | {t.distractor for t in benchmark})
    records = [by_id[i] for i in needed]
    embeddings, _ = embed_records(model, records, store, feature="average")
    table = {image_id: embeddings[i] for i, image_id in enumerate(needed)}
    accuracy = score_2afc(lambda image_id: table[image_id], benchmark)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "afc.json", "w", encoding="utf-8") as fh:
        json.dump(
            {"accuracy": accuracy, "trials": len(benchmark), "seed": args.seed},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"2AFC accuracy {accuracy:.4f} over {len(benchmark)} trials -> {out / 'afc.json'}")
    return 0


def _cmd_report(args) -> int:
    with open(args.report, "r", encoding="utf-8") as fh:
        report = EvalReport.from_json(json.load(fh))
    print(f"mAP: {report.map_score:.4f}")
    for k, value in enumerate(report.cmc, start=1):
        print(f"CMC-{k}: {value:.4f}")
    for task, acc in sorted(report.attribute_accuracy.items()):
        print(f"accuracy[{task}]: {acc:.4f}")
    if report.detection:
        d = report.detection
        print(
            f"detection: P {d['precision']:.4f} R {d['recall']:.4f} F {d['f_score']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reid-forge",
        description="Part-weighted vehicle re-identification pipeline on synthetic data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="create a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-identities", dest="n_identities", type=int)
    g.add_argument("--images-per-identity", dest="images_per_identity", type=int)
    g.add_argument("--n-cameras", dest="n_cameras", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--train-identities", dest="train_identities", type=int)
    g.add_argument("--camera-tint", dest="camera_tint", type=float)
    g.add_argument("--attribute-seed", dest="attribute_seed", type=int)
    g.add_argument("--part-min", dest="part_min", type=int)
    g.add_argument("--part-max", dest="part_max", type=int)
    g.add_argument("--twins", dest="twins", action="store_true", default=None)
    g.add_argument("--no-twins", dest="twins", action="store_false")
    g.set_defaults(func=_cmd_generate)

    s = sub.add_parser("split", help="assign query/gallery tags to test records")
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=_cmd_split)

    t = sub.add_parser("train", help="train an embedding model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--data", help="root directory for tensor refs (default: manifest dir)")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--variant")
    t.add_argument("--epochs", type=int)
    t.add_argument("--decay-start", dest="decay_start", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--p", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--margin", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--conf-thr", dest="conf_thr", type=float)
    t.add_argument("--nms-thr", dest="nms_thr", type=float)
    t.add_argument("--gt-parts", dest="gt_parts", action="store_true", default=None)
    t.add_argument("--detector-parts", dest="gt_parts", action="store_false")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--data")
    e.add_argument("--out", required=True)
    e.add_argument("--stem", default="report")
    e.add_argument("--feature", choices=("average", "weighted"), default="average")
    e.add_argument("--gamma", type=float, default=1.3)
    e.add_argument("--gt-parts", dest="gt_parts", action="store_true", default=False)
    e.add_argument("--detections")
    e.add_argument("--conf-thr", dest="conf_thr", type=float, default=0.25)
    e.add_argument("--nms-thr", dest="nms_thr", type=float, default=0.4)
    e.add_argument("--iou-thr", dest="iou_thr", type=float, default=0.5)
    e.add_argument("--cross-camera-only", action="store_true")
    e.add_argument("--l2-normalize", action="store_true")
    e.add_argument("--max-rank", dest="max_rank", type=int, default=10)
    e.set_defaults(func=_cmd_evaluate)

    d = sub.add_parser("detect-eval", help="run the part detector and score it")
    d.add_argument("--manifest", required=True)
    d.add_argument("--data")
    d.add_argument("--out", required=True)
    d.add_argument("--conf-thr", dest="conf_thr", type=float, default=0.25)
    d.add_argument("--nms-thr", dest="nms_thr", type=float, default=0.4)
    d.add_argument("--iou-thr", dest="iou_thr", type=float, default=0.5)
    d.add_argument("--window", type=int, default=9)
    d.set_defaults(func=_cmd_detect_eval)

    a = sub.add_parser("afc", help="forced-choice benchmark for a checkpoint")
    a.add_argument("--manifest", required=True)
    a.add_argument("--data")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--allow-fewer", action="store_true")
    a.set_defaults(func=_cmd_afc)

    r = sub.add_parser("report", help="pretty-print an evaluation report")
    r.add_argument("--report", required=True)
    r.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ReidForgeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

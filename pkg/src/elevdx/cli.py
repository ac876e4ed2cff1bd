"""Command-line workflow: prepare / train / label / evaluate / compare / cam.

Experiments are defined by config files (see configio); flags carry only
paths and overrides. Every subcommand logs the effective seed, writes all of
its outputs under the configured output directory, and exits with 0 on
success, 2 on configuration errors, 3 on data errors, and 4 on anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import dataio, labeling, metrics, models, training
from .configio import (ExperimentConfig, load_experiment_config, load_schema_file,
                       save_class_weights)
from .errors import ConfigError, DataError, ElevdxError

log = logging.getLogger("elevdx")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="seed override")
    parser.add_argument("--device", default=None, help="compute device (default: config/cpu)")
    parser.add_argument("--allow-modality-mismatch", action="store_true",
                        help="proceed when model and manifest modalities differ")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic torch algorithms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elevdx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="write split and class-weight files")
    _add_common(p)

    p = sub.add_parser("train", help="train one model per repeat")
    _add_common(p)
    p.add_argument("--role", choices=models.ROLES, required=True)

    p = sub.add_parser("label", help="pseudo-label a manifest with an elevation model")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out-file", required=True)

    p = sub.add_parser("evaluate", help="metric reports for trained checkpoints")
    _add_common(p)
    p.add_argument("--checkpoints", nargs="+", help="explicit checkpoint paths")
    p.add_argument("--train-dir", help="directory holding run*/best.pt")
    p.add_argument("--split", default="test", choices=dataio.SPLIT_NAMES)
    p.add_argument("--report-name", default="report")

    p = sub.add_parser("compare", help="McNemar mid-p and Cohen's d between two models")
    _add_common(p)
    p.add_argument("--dumps-a", nargs="+", required=True)
    p.add_argument("--dumps-b", nargs="+", required=True)
    p.add_argument("--out-file", required=True)

    p = sub.add_parser("cam", help="GradCAM heatmap overlays for selected images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ids", required=True, help="comma-separated image ids")
    p.add_argument("--classes", default="all", help="comma-separated class names or 'all'")

    return parser


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("this subcommand requires --config")
    config = load_experiment_config(args.config, out_override=args.out,
                                    seed_override=args.seed)
    if args.device:
        config.device = args.device
    if args.deterministic:
        config.train = replace(config.train, deterministic=True)
    log.info("effective seed: %d", config.seed)
    return config


def _prepared_manifest(config: ExperimentConfig, drop_column: str | None):
    schema = load_schema_file(config.schema)
    manifest = dataio.load_manifest(config.manifest, schema)
    if drop_column:
        manifest = manifest.drop_missing(drop_column)
    if config.stratify_on != "none":
        manifest = manifest.drop_missing(config.stratify_on)
    split = dataio.stratified_split(manifest, config.ratios, config.stratify_on, config.seed)
    return schema, manifest, split


def cmd_prepare(args) -> int:
    config = _load_config(args)
    schema, manifest, split = _prepared_manifest(config, drop_column=None)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataio.save_split(split, out_dir / "split.csv")
    train_manifest = manifest.filter_split(split, "train")
    for column, classes in (("elevation", schema.elevation_classes),
                            ("diagnosis", schema.diagnosis_classes)):
        counts = train_manifest.label_counts(column)
        if sum(counts.values()) == 0:
            continue
        if any(v == 0 for v in counts.values()):
            log.info("skipping %s class weights: some classes have no training records",
                     column)
            continue
        weights = dataio.compute_class_weights([counts[c] for c in classes])
        save_class_weights(classes, weights.weights, out_dir / f"class_weights_{column}.txt")
    log.info("prepare: wrote split (%s) under %s", split.counts(), out_dir)
    return 0


def _fusion_for(config: ExperimentConfig, role: str, schema) -> models.FusionHead:
    feature_dim = models.family_feature_dim(config.backbone)
    if role == "elevation":
        if config.fusion != "none":
            raise ConfigError("elevation models take no fusion input; set fusion: none")
        return models.FusionHead(feature_dim=feature_dim,
                                 num_classes=schema.num_elevation, mode="none")
    aux_dim = 0 if config.fusion == "none" else schema.num_elevation
    return models.FusionHead(feature_dim=feature_dim, num_classes=schema.num_diagnosis,
                             aux_dim=aux_dim, mode=config.fusion)


def _attach_if_needed(config: ExperimentConfig, manifest):
    if config.fusion in ("soft", "discrete_onehot"):
        mode = "soft" if config.fusion == "soft" else "discrete"
        manifest = labeling.attach_labels(manifest, config.elevation_labels, mode)
    return manifest


def _bundle_modality(manifest) -> str | None:
    modalities = manifest.modalities()
    return modalities.pop() if len(modalities) == 1 else None


def cmd_train(args) -> int:
    config = _load_config(args)
    role = args.role
    schema, manifest, split = _prepared_manifest(config, drop_column=role)
    manifest = _attach_if_needed(config, manifest)
    num_classes = schema.num_elevation if role == "elevation" else schema.num_diagnosis
    class_names = (schema.elevation_classes if role == "elevation"
                   else schema.diagnosis_classes)
    out_root = Path(config.out_dir) / f"train_{role}_{config.fusion}"
    cache = training._ImageCache(config.preprocess)
    for repeat in range(config.train.repeats):
        seed = config.seed + repeat
        run_config = replace(config.train, seed=seed)
        torch.manual_seed(seed)
        spec = models.BackboneSpec(family=config.backbone, num_classes=num_classes,
                                   pretrained=config.pretrained)
        bundle = models.build_model(spec, _fusion_for(config, role, schema), role=role,
                                    class_names=class_names,
                                    modality=_bundle_modality(manifest))
        run_dir = out_root / f"run{repeat}"
        run_log = training.train(bundle, manifest, split, run_config, run_dir,
                                 preprocess=config.preprocess, cache=cache)
        log.info("run %d (seed %d): best epoch %d val AUROC %.4f", repeat, seed,
                 run_log.best_epoch, run_log.best_val_auroc)
    return 0


def cmd_label(args) -> int:
    seed = args.seed if args.seed is not None else 0
    log.info("effective seed: %d", seed)
    schema = load_schema_file(args.schema)
    manifest = dataio.load_manifest(args.manifest, schema)
    bundle = models.load_checkpoint(args.checkpoint)
    predictions = labeling.infer_elevations(
        bundle, manifest, allow_modality_mismatch=args.allow_modality_mismatch)
    out_file = Path(args.out_file)
    labeling.write_label_file(predictions, out_file, schema.elevation_classes)
    log.info("wrote %d pseudo-labels to %s", len(predictions), out_file)
    return 0


def _discover_checkpoints(args) -> list[Path]:
    if args.checkpoints:
        return [Path(p) for p in args.checkpoints]
    if args.train_dir:
        found = sorted(Path(args.train_dir).glob("run*/best.pt"))
        if not found:
            raise DataError(f"no run*/best.pt checkpoints under {args.train_dir}")
        return found
    raise ConfigError("evaluate needs --checkpoints or --train-dir")


def _dump_predictions(path, image_ids, targets, probs, class_names) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("image_id,target," + ",".join(f"p_{c}" for c in class_names) + "\n")
        for image_id, target, row in zip(image_ids, targets, probs):
            fh.write(f"{image_id},{int(target)}," + ",".join(repr(float(p)) for p in row) + "\n")


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    checkpoints = _discover_checkpoints(args)
    roles = {models.read_sidecar(c).get("role") for c in checkpoints}
    if len(roles) != 1:
        raise DataError(f"checkpoints mix roles {sorted(roles)}; evaluate them separately")
    role_label = roles.pop()
    schema, manifest, split = _prepared_manifest(config, drop_column=role_label)
    out_dir = Path(config.out_dir) / f"eval_{args.report_name}"
    out_dir.mkdir(parents=True, exist_ok=True)
    part = manifest.filter_split(split, args.split)
    reports = []
    run_probs = []
    image_ids = [r.image_id for r in part.records]
    targets = None
    for run_id, ckpt in enumerate(checkpoints):
        bundle = models.load_checkpoint(ckpt)
        role = bundle.role
        eval_manifest = part
        if bundle.fusion.mode in ("soft", "discrete_onehot"):
            mode = "soft" if bundle.fusion.mode == "soft" else "discrete"
            eval_manifest = labeling.attach_labels(part, config.elevation_labels, mode)
        targets = np.array([training._record_target(r, role, schema)
                            for r in eval_manifest.records])
        probs = training.predict_manifest(bundle, eval_manifest, config.preprocess)
        report = metrics.classification_metrics(probs, targets, bundle.num_classes,
                                                run_id=run_id, seed=config.seed)
        reports.append(report)
        run_probs.append(probs)
        _dump_predictions(out_dir / f"dump_run{run_id}.csv", image_ids, targets, probs,
                          bundle.class_names or [str(i) for i in range(bundle.num_classes)])

    with open(out_dir / f"{args.report_name}.jsonl", "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(json.dumps({"split": args.split, **report.to_dict()}) + "\n")
    aggregate = metrics.aggregate_runs(reports)
    mean_probs = np.mean(np.stack(run_probs), axis=0)
    pooled = metrics.classification_metrics(mean_probs, targets, run_probs[0].shape[1],
                                            seed=config.seed)
    aggregate["run_averaged_ci"] = {k: list(v) for k, v in pooled.ci.items()}
    with open(out_dir / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("evaluate: %d runs on %s split -> %s", len(reports), args.split, out_dir)
    return 0


def _load_dump(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    import csv as _csv
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        prob_cols = [i for i, name in enumerate(header) if name.startswith("p_")]
        ids, targets, probs = [], [], []
        for row in reader:
            ids.append(row[0])
            targets.append(int(row[1]))
            probs.append([float(row[i]) for i in prob_cols])
    return ids, np.array(targets), np.array(probs)


def cmd_compare(args) -> int:
    seed = args.seed if args.seed is not None else 0
    log.info("effective seed: %d", seed)

    def _group(paths):
        ids_ref, targets_ref, rows = None, None, []
        for path in paths:
            ids, targets, probs = _load_dump(path)
            if ids_ref is None:
                ids_ref, targets_ref = ids, targets
            elif ids != ids_ref or not np.array_equal(targets, targets_ref):
                raise DataError(f"prediction dump {path} is not paired with the others")
            rows.append(probs)
        return ids_ref, targets_ref, rows

    ids_a, targets_a, probs_a = _group(args.dumps_a)
    ids_b, targets_b, probs_b = _group(args.dumps_b)
    if ids_a != ids_b or not np.array_equal(targets_a, targets_b):
        raise DataError("the two groups are not paired on the same test items")

    auroc_a = [metrics.macro_auroc(p, targets_a) for p in probs_a]
    auroc_b = [metrics.macro_auroc(p, targets_b) for p in probs_b]
    mean_a = np.mean(np.stack(probs_a), axis=0)
    mean_b = np.mean(np.stack(probs_b), axis=0)
    correct_a = np.argmax(mean_a, axis=1) == targets_a
    correct_b = np.argmax(mean_b, axis=1) == targets_b
    result = metrics.mcnemar_midp(correct_a, correct_b)
    result.n_runs_per_group = min(len(probs_a), len(probs_b))
    if len(probs_a) >= 2 and len(probs_b) >= 2:
        result.cohens_d = metrics.cohens_d(auroc_a, auroc_b)
    out_file = Path(args.out_file)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    payload = {**result.to_dict(), "auroc_group_a": auroc_a, "auroc_group_b": auroc_b,
               "n_items": len(ids_a)}
    with open(out_file, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("compare: b=%d c=%d mid-p=%.3g d=%s", result.discordant_b,
             result.discordant_c, result.midp_value, result.cohens_d)
    return 0


def _heat_overlay(base_rgb: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Blend a [0,1] heatmap onto an RGB image (blue -> red colormap)."""
    heat = np.stack([cam, 0.2 * cam, 1.0 - cam], axis=-1)
    blended = 0.5 * base_rgb.astype(np.float32) / 255.0 + 0.5 * heat
    return (np.clip(blended, 0, 1) * 255).astype(np.uint8)


def cmd_cam(args) -> int:
    from PIL import Image

    seed = args.seed if args.seed is not None else 0
    log.info("effective seed: %d", seed)
    schema = load_schema_file(args.schema)
    manifest = dataio.load_manifest(args.manifest, schema)
    bundle = models.load_checkpoint(args.checkpoint)
    if bundle.fusion.mode in ("soft", "discrete_onehot"):
        raise ConfigError("cam supports fusion-free or gt_onehot checkpoints only")
    out_dir = Path(args.out or "cam_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.image_id: r for r in manifest.records}
    class_names = bundle.class_names or tuple(str(i) for i in range(bundle.num_classes))
    wanted = class_names if args.classes == "all" else tuple(
        c.strip() for c in args.classes.split(","))
    for name in wanted:
        if name not in class_names:
            raise ConfigError(f"unknown class {name!r}; model classes: {class_names}")
    preprocess = dataio.PreprocessConfig()
    for image_id in (i.strip() for i in args.ids.split(",")):
        record = by_id.get(image_id)
        if record is None:
            raise DataError(f"image_id {image_id!r} not in manifest")
        image = dataio.preprocess_image(record, train_mode=False, config=preprocess)
        aux = None
        if bundle.fusion.mode == "gt_onehot":
            if record.elevation is None:
                raise DataError(f"record {image_id!r} has no elevation label for gt fusion")
            aux = models.one_hot(schema.elevation_index(record.elevation),
                                 bundle.fusion.aux_dim)
        base = dataio.resize_rgb(dataio.load_rgb(record.image_path), preprocess.image_size)
        for name in wanted:
            cam = models.gradcam(bundle, image, class_names.index(name), aux=aux)
            overlay = _heat_overlay(base, cam)
            Image.fromarray(overlay).save(out_dir / f"{image_id}_{name}.png")
    log.info("cam: wrote overlays for %d images to %s", len(args.ids.split(",")), out_dir)
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "label": cmd_label,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "cam": cmd_cam,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except ElevdxError as exc:
        log.error("%s", exc)
        return 4
    except Exception as exc:  # noqa: BLE001 - map any runtime failure to exit 4
        log.error("runtime error: %s", exc, exc_info=True)
        return 4


if __name__ == "__main__":
    sys.exit(main())

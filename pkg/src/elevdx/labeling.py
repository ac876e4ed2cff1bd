"""Pseudo-labeling: run a trained elevation model over unlabeled manifests.

Predictions are exchanged through a label CSV (one labeling pass serves many
fusion experiments): header ``image_id,p_<class1>,...,p_<classN>,argmax,
source_model,source_modality`` with probabilities printed to 9 decimal digits.
attach_labels() merges such a file back into a manifest as per-record aux
vectors, either verbatim ("soft") or as the one-hot of the argmax ("discrete").
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, PreprocessConfig
from .errors import ConfigError, DataError
from .models import ModelBundle, one_hot
from .training import predict_manifest

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class ElevationPrediction:
    image_id: str
    probs: tuple[float, ...]
    argmax_class: str
    source_model: str
    source_modality: str

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.min() < 0 or abs(arr.sum() - 1.0) > SIMPLEX_TOL:
            raise DataError(
                f"prediction for {self.image_id!r} is not a probability vector: {self.probs}")


def infer_elevations(bundle: ModelBundle, manifest: DatasetManifest,
                     allow_modality_mismatch: bool = False,
                     preprocess: PreprocessConfig = PreprocessConfig(),
                     batch_size: int = 64) -> list[ElevationPrediction]:
    """One prediction per manifest record, in manifest order.

    Elevation models are modality specific; applying one across modalities is
    refused unless explicitly overridden.
    """
    if bundle.role != "elevation":
        raise DataError(f"pseudo-labeling needs an elevation bundle, got role {bundle.role!r}")
    class_names = bundle.class_names or manifest.schema.elevation_classes
    if len(class_names) != bundle.num_classes:
        raise ConfigError("bundle class_names do not match its output size")
    if bundle.modality is None:
        if not allow_modality_mismatch:
            raise DataError("bundle has no recorded modality; pass the override to proceed")
    else:
        foreign = manifest.modalities() - {bundle.modality}
        if foreign and not allow_modality_mismatch:
            raise DataError(
                f"modality mismatch: bundle is {bundle.modality!r} but manifest contains "
                f"{sorted(foreign)}; pass the override to proceed anyway")
    if len(manifest) == 0:
        raise DataError("nothing to label: empty manifest")

    probs = predict_manifest(bundle, manifest, preprocess, batch_size=batch_size,
                             with_aux=False)
    source = bundle.identifier()
    predictions = []
    for record, row in zip(manifest.records, probs):
        idx = int(np.argmax(row))  # lowest index on ties
        predictions.append(ElevationPrediction(
            image_id=record.image_id,
            probs=tuple(float(p) for p in row),
            argmax_class=class_names[idx],
            source_model=source,
            source_modality=bundle.modality or "unknown",
        ))
    return predictions


def write_label_file(predictions: list[ElevationPrediction], path,
                     class_names: tuple[str, ...]) -> Path:
    if not predictions:
        raise DataError("no predictions to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (["image_id"] + [f"p_{c}" for c in class_names]
              + ["argmax", "source_model", "source_modality"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for pred in predictions:
            if len(pred.probs) != len(class_names):
                raise DataError(f"prediction for {pred.image_id!r} has "
                                f"{len(pred.probs)} probs for {len(class_names)} classes")
            writer.writerow([pred.image_id]
                            + [f"{p:.9f}" for p in pred.probs]
                            + [pred.argmax_class, pred.source_model, pred.source_modality])
    return path


def read_label_file(path, class_names: tuple[str, ...]) -> dict[str, ElevationPrediction]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file not found: {path}")
    prob_cols = [f"p_{c}" for c in class_names]
    out: dict[str, ElevationPrediction] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ["image_id", *prob_cols, "argmax"]:
            if col not in header:
                raise DataError(f"label file {path} is missing column {col!r}")
        for row in reader:
            try:
                probs = tuple(float(row[c]) for c in prob_cols)
            except (TypeError, ValueError):
                raise DataError(f"malformed probability row for {row.get('image_id')!r}")
            arr = np.asarray(probs)
            if arr.min() < 0 or abs(arr.sum() - 1.0) > SIMPLEX_TOL:
                raise DataError(f"row {row['image_id']!r}: probabilities are not a simplex")
            argmax_class = row["argmax"].strip()
            if argmax_class not in class_names:
                raise DataError(f"row {row['image_id']!r}: unknown argmax class {argmax_class!r}")
            if probs[class_names.index(argmax_class)] != arr.max():
                raise DataError(f"row {row['image_id']!r}: argmax column disagrees with probs")
            pred = ElevationPrediction(
                image_id=row["image_id"].strip(), probs=probs, argmax_class=argmax_class,
                source_model=row.get("source_model", ""),
                source_modality=row.get("source_modality", ""))
            if pred.image_id in out:
                raise DataError(f"duplicate image_id {pred.image_id!r} in label file")
            out[pred.image_id] = pred
    return out


def attach_labels(manifest: DatasetManifest, label_file, mode: str) -> DatasetManifest:
    """Return a manifest whose records carry elevation aux vectors.

    mode 'soft' attaches the probabilities verbatim; 'discrete' attaches the
    one-hot of the argmax class. Every manifest record must appear in the file.
    """
    if mode not in ("soft", "discrete"):
        raise ConfigError(f"attach mode must be 'soft' or 'discrete', got {mode!r}")
    class_names = manifest.schema.elevation_classes
    table = read_label_file(label_file, class_names)
    records = []
    for record in manifest.records:
        pred = table.get(record.image_id)
        if pred is None:
            raise DataError(f"label file has no row for image_id {record.image_id!r}")
        if mode == "soft":
            aux = pred.probs
        else:
            aux = tuple(one_hot(class_names.index(pred.argmax_class), len(class_names)))
        records.append(replace(record, aux=aux))
    return DatasetManifest(records=records, schema=manifest.schema, name=manifest.name)

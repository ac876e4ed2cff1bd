"""Dataset manifests, label schemas, stratified splits, class weights, preprocessing.

A manifest is a CSV with header ``image_id,image_path,modality,diagnosis,elevation``
(UTF-8, empty cell = absent label). Raw diagnosis labels are mapped through the
schema's grouping table at load time; unmappable labels fail loudly instead of
being dropped.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MODALITIES = ("clinical", "dermoscopic")
SPLIT_NAMES = ("train", "val", "test")
STRATIFY_CHOICES = ("elevation", "diagnosis", "none")

# Channel statistics of the backbone pretraining corpus (ImageNet); carried in
# PreprocessConfig so other pretraining sources can override them.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def seeded_rng(*parts: int) -> np.random.Generator:
    """Deterministic generator from a tuple of integer seed components."""
    entropy = [int(p) % (2**32) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class LabelSchema:
    """Fixed, ordered class lists plus the raw-label -> grouped-label table.

    Index i of any prediction vector refers to position i of the matching
    class list, so the order must not change for the life of a run.
    """

    diagnosis_classes: tuple[str, ...]
    elevation_classes: tuple[str, ...]
    diagnosis_grouping: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for kind, classes in (("diagnosis", self.diagnosis_classes),
                              ("elevation", self.elevation_classes)):
            if len(classes) == 0:
                raise ConfigError(f"{kind}_classes must be non-empty")
            if len(set(classes)) != len(classes):
                raise ConfigError(f"{kind}_classes contains duplicates: {classes}")
        for raw, grouped in self.diagnosis_grouping.items():
            if grouped not in self.diagnosis_classes:
                raise ConfigError(
                    f"grouping target {grouped!r} (for raw label {raw!r}) "
                    f"is not a diagnosis class")

    @property
    def num_diagnosis(self) -> int:
        return len(self.diagnosis_classes)

    @property
    def num_elevation(self) -> int:
        return len(self.elevation_classes)

    def diagnosis_index(self, name: str) -> int:
        return self.diagnosis_classes.index(name)

    def elevation_index(self, name: str) -> int:
        return self.elevation_classes.index(name)

    def group_diagnosis(self, raw: str) -> str:
        """Map a raw dataset label to its grouped class name.

        Labels that already are grouped class names map to themselves.
        """
        if raw in self.diagnosis_grouping:
            return self.diagnosis_grouping[raw]
        if raw in self.diagnosis_classes:
            return raw
        raise DataError(f"unknown raw diagnosis label {raw!r} (no grouping entry)")


@dataclass(frozen=True)
class ImageRecord:
    """One image with its optional diagnosis/elevation labels.

    ``aux`` holds an attached elevation vector (see labeling.attach_labels);
    it is absent on freshly loaded manifests.
    """

    image_id: str
    image_path: str
    modality: str
    diagnosis: str | None = None
    elevation: str | None = None
    aux: tuple[float, ...] | None = None


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    schema: LabelSchema
    name: str = ""

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DataError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if rec.modality not in MODALITIES:
                raise DataError(
                    f"record {rec.image_id!r}: modality {rec.modality!r} "
                    f"not one of {MODALITIES}")
            if rec.diagnosis is not None and rec.diagnosis not in self.schema.diagnosis_classes:
                raise DataError(
                    f"record {rec.image_id!r}: diagnosis {rec.diagnosis!r} not in schema")
            if rec.elevation is not None and rec.elevation not in self.schema.elevation_classes:
                raise DataError(
                    f"record {rec.image_id!r}: elevation {rec.elevation!r} not in schema")

    def __len__(self) -> int:
        return len(self.records)

    def label_counts(self, column: str) -> dict[str, int]:
        """Counts per class (schema order) of `column` ('elevation' or 'diagnosis')."""
        classes = (self.schema.elevation_classes if column == "elevation"
                   else self.schema.diagnosis_classes)
        counts = {c: 0 for c in classes}
        for rec in self.records:
            value = getattr(rec, column)
            if value is not None:
                counts[value] += 1
        return counts

    def modalities(self) -> set[str]:
        return {rec.modality for rec in self.records}

    def subset(self, image_ids) -> "DatasetManifest":
        wanted = set(image_ids)
        kept = [r for r in self.records if r.image_id in wanted]
        return DatasetManifest(records=kept, schema=self.schema, name=self.name)

    def filter_split(self, assignment: "SplitAssignment", split: str) -> "DatasetManifest":
        return self.subset(assignment.ids(split))

    def drop_missing(self, column: str) -> "DatasetManifest":
        """Drop records lacking `column`, logging how many were removed."""
        kept = [r for r in self.records if getattr(r, column) is not None]
        dropped = len(self.records) - len(kept)
        if dropped:
            log.info("dropped %d/%d records missing %s from %s",
                     dropped, len(self.records), column, self.name or "manifest")
        return DatasetManifest(records=kept, schema=self.schema, name=self.name)


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]  # image_id -> train|val|test
    ratios: tuple[float, float, float]
    stratify_on: str
    seed: int

    def ids(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {split!r}")
        return [i for i, s in self.assignment.items() if s == split]

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLIT_NAMES}
        for s in self.assignment.values():
            out[s] += 1
        return out


@dataclass(frozen=True)
class ClassWeights:
    """Median-frequency-balancing weights, one per class in schema order."""

    weights: tuple[float, ...]

    def __post_init__(self):
        if any(w <= 0 for w in self.weights):
            raise ConfigError(f"class weights must be positive, got {self.weights}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def compute_class_weights(counts) -> ClassWeights:
    """weight_c = median(counts) / counts_c.

    Counts suffice (dividing by the total cancels out of the ratio). The class
    sitting at the median frequency gets weight exactly 1; rarer classes get
    proportionally larger weights. Even-length count vectors use the standard
    median (mean of the two middle values).
    """
    counts = list(counts)
    if len(counts) == 0:
        raise DataError("cannot compute class weights for zero classes")
    if any(int(c) <= 0 for c in counts):
        raise DataError(f"class weight undefined for zero-count class: {counts}")
    median = float(np.median(np.asarray(counts, dtype=np.float64)))
    return ClassWeights(weights=tuple(median / float(c) for c in counts))


def load_manifest(path, schema: LabelSchema, name: str | None = None) -> DatasetManifest:
    """Load a manifest CSV, mapping raw diagnosis labels through the schema grouping."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("image_id", "image_path", "modality"):
            if required not in header:
                raise DataError(f"manifest {path} is missing required column {required!r}")
        records = []
        for row in reader:
            diagnosis = (row.get("diagnosis") or "").strip() or None
            elevation = (row.get("elevation") or "").strip() or None
            if diagnosis is not None:
                diagnosis = schema.group_diagnosis(diagnosis)
            if elevation is not None and elevation not in schema.elevation_classes:
                raise DataError(f"unknown elevation label {elevation!r} in {path}")
            records.append(ImageRecord(
                image_id=row["image_id"].strip(),
                image_path=row["image_path"].strip(),
                modality=row["modality"].strip(),
                diagnosis=diagnosis,
                elevation=elevation,
            ))
    return DatasetManifest(records=records, schema=schema, name=name or path.stem)


def _split_stratum_counts(n: int, ratios) -> tuple[int, int, int]:
    """Largest-remainder rounding of n * ratios.

    Floors first; the leftover records go one each to the splits with a
    positive fractional part, in priority order train > val > test.
    """
    exact = [n * r for r in ratios]
    base = [int(np.floor(x)) for x in exact]
    fractions = [x - b for x, b in zip(exact, base)]
    leftover = n - sum(base)
    for i in range(3):  # priority order = tuple order = (train, val, test)
        if leftover == 0:
            break
        if fractions[i] > 0:
            base[i] += 1
            leftover -= 1
    return tuple(base)


def stratified_split(manifest: DatasetManifest, ratios, stratify_on: str,
                     seed: int) -> SplitAssignment:
    """Partition a manifest into train/val/test, stratum by stratum.

    Deterministic given the seed; within every stratum the split sizes deviate
    from ratio * stratum_size by at most one record.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    if stratify_on not in STRATIFY_CHOICES:
        raise ConfigError(f"stratify_on must be one of {STRATIFY_CHOICES}")
    if len(manifest) == 0:
        raise DataError("cannot split an empty manifest")

    if stratify_on == "none":
        strata = {"all": list(manifest.records)}
    else:
        missing = [r.image_id for r in manifest.records if getattr(r, stratify_on) is None]
        if missing:
            raise DataError(
                f"{len(missing)} records lack the {stratify_on} label required for "
                f"stratification (first: {missing[0]!r})")
        classes = (manifest.schema.elevation_classes if stratify_on == "elevation"
                   else manifest.schema.diagnosis_classes)
        strata = {c: [r for r in manifest.records if getattr(r, stratify_on) == c]
                  for c in classes}

    rng = seeded_rng(seed)
    assignment: dict[str, str] = {}
    for stratum_name, records in strata.items():
        if not records:
            raise DataError(f"empty stratum {stratum_name!r}")
        n_train, n_val, n_test = _split_stratum_counts(len(records), ratios)
        order = rng.permutation(len(records))
        for pos, idx in enumerate(order):
            if pos < n_train:
                split = "train"
            elif pos < n_train + n_val:
                split = "val"
            else:
                split = "test"
            assignment[records[idx].image_id] = split
    # restore canonical manifest order
    assignment = {r.image_id: assignment[r.image_id] for r in manifest.records}
    return SplitAssignment(assignment=assignment, ratios=ratios,
                           stratify_on=stratify_on, seed=seed)


def save_split(assignment: SplitAssignment, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "split"])
        for image_id, split in assignment.assignment.items():
            writer.writerow([image_id, split])


def load_split(path, ratios=(0.0, 0.0, 0.0), stratify_on="none", seed=0) -> SplitAssignment:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"split file not found: {path}")
    assignment = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            split = row["split"].strip()
            if split not in SPLIT_NAMES:
                raise DataError(f"bad split value {split!r} in {path}")
            assignment[row["image_id"].strip()] = split
    return SplitAssignment(assignment=assignment, ratios=tuple(ratios),
                           stratify_on=stratify_on, seed=seed)


# ---------------------------------------------------------------------------
# Image preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


NUM_DIHEDRAL = 8


def dihedral_transform(arr: np.ndarray, k: int) -> np.ndarray:
    """Element k of the 8-element group generated by flips and 90-degree rotations.

    k in 0..3 rotates by k*90 degrees; k in 4..7 first flips horizontally.
    Works on H x W x C arrays and preserves shape for square inputs.
    """
    if not 0 <= k < NUM_DIHEDRAL:
        raise ConfigError(f"dihedral index must be in [0, 8), got {k}")
    if k >= 4:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(np.rot90(arr, k % 4))


def load_rgb(path) -> np.ndarray:
    """Decode an image file to an H x W x 3 uint8 array."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}")
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}")
    if arr.size == 0 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DataError(f"zero-size image: {path}")
    return arr


def resize_rgb(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[0] == size and arr.shape[1] == size:
        return arr
    return np.asarray(Image.fromarray(arr).resize((size, size), Image.BILINEAR))


def normalize_rgb(arr: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    out = arr.astype(np.float32) / 255.0
    out -= np.asarray(config.mean, dtype=np.float32)
    out /= np.asarray(config.std, dtype=np.float32)
    return out


def preprocess_image(record: ImageRecord, train_mode: bool = False, seed: int = 0,
                     config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Decode, resize, (optionally) augment, and normalize one image.

    Returns a float32 H x W x 3 array. In train mode a transform is drawn
    uniformly from the 8-element flip/rotation group using only `seed`; eval
    mode is deterministic and ignores the seed.
    """
    arr = resize_rgb(load_rgb(record.image_path), config.image_size)
    if train_mode:
        k = int(seeded_rng(seed).integers(0, NUM_DIHEDRAL))
        arr = dihedral_transform(arr, k)
    return normalize_rgb(arr, config)

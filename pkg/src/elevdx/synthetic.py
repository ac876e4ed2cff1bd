"""Desk-scale synthetic lesion datasets for self-checks and pipeline examples.

Images are 64 x 64 renderings of one "lesion" on a noisy background. The
elevation latent picks the shape archetype:

* flat      - dim uniform disk
* palpable  - disk with a wide bright rim (raised-rim ring)
* nodular   - bright dome peaked at the lesion center

An independent texture latent draws stripes or a dot checker inside the
lesion. Elevation datasets label the shape; diagnosis datasets label a rule
that needs both latents (benign unless nodular, or palpable with stripes), so
a diagnosis model that cannot read the shape cue is capped well below the
optimum - the setting the elevation-fusion experiments probe.

Generators write PNGs plus a manifest CSV, a schema file, and a meta CSV
(latents and the lesion bounding box, scaled to the rendered size).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .configio import save_schema_file
from .dataio import DatasetManifest, ImageRecord, LabelSchema

ELEVATION_CLASSES = ("flat", "palpable", "nodular")
DIAGNOSIS_CLASSES = ("benign", "malignant")
TEXTURES = ("dots", "stripes")

SYNTH_SCHEMA = LabelSchema(diagnosis_classes=DIAGNOSIS_CLASSES,
                           elevation_classes=ELEVATION_CLASSES)


@dataclass(frozen=True)
class LesionMeta:
    image_id: str
    elevation: str
    texture: str
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive
    diagnosis: str | None = None


def render_lesion(rng: np.random.Generator, elevation: int, texture: int,
                  size: int = 64) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One uint8 RGB rendering plus the generating shape's bounding box."""
    img = rng.normal(0.35, 0.035, (size, size)).astype(np.float32)
    img += rng.normal(0.0, 0.03)
    cy, cx = rng.uniform(size * 0.40, size * 0.60, 2)
    radius = rng.uniform(size * 0.26, size * 0.34)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inside = dist <= radius
    if elevation == 0:
        img[inside] += 0.10
    elif elevation == 1:
        rim = inside & (dist >= radius - 5.0)
        img[inside] += 0.06
        img[rim] += 0.32
    else:
        dome = np.exp(-((dist / (0.60 * radius)) ** 2)).astype(np.float32)
        img += 0.55 * dome * (dist <= 1.15 * radius)
    if texture == 1:
        axis = xx if rng.random() < 0.5 else yy
        pattern = 0.5 * (1 + np.sin(2 * np.pi * axis / 6.0 + rng.uniform(0, 2 * np.pi)))
    else:
        pattern = (((xx // 3) + (yy // 3)) % 2).astype(np.float32)
    img += 0.12 * (pattern - 0.5) * inside
    img = np.clip(img, 0.0, 1.0)
    rgb = np.stack([img,
                    img * rng.uniform(0.92, 1.0),
                    img * rng.uniform(0.85, 0.98)], axis=-1)
    rgb8 = (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)
    extent = radius * (1.15 if elevation == 2 else 1.0)
    bbox = (max(int(np.floor(cy - extent)), 0),
            max(int(np.floor(cx - extent)), 0),
            min(int(np.ceil(cy + extent)), size - 1),
            min(int(np.ceil(cx + extent)), size - 1))
    return rgb8, bbox


def diagnosis_rule(elevation: int, texture: int) -> int:
    """0 = benign, 1 = malignant; depends jointly on both latents."""
    if elevation == 0:
        return 0
    if elevation == 2:
        return 1
    return texture


def _write_dataset(out_dir, items, name: str) -> dict:
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    records, metas = [], []
    for image_id, rgb8, meta, diagnosis, elevation in items:
        path = image_dir / f"{image_id}.png"
        Image.fromarray(rgb8).save(path)
        records.append(ImageRecord(image_id=image_id, image_path=str(path),
                                   modality="dermoscopic", diagnosis=diagnosis,
                                   elevation=elevation))
        metas.append(meta)
    manifest = DatasetManifest(records=records, schema=SYNTH_SCHEMA, name=name)

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "image_path", "modality", "diagnosis", "elevation"])
        for rec in records:
            writer.writerow([rec.image_id, rec.image_path, rec.modality,
                             rec.diagnosis or "", rec.elevation or ""])
    schema_path = out_dir / "schema.txt"
    save_schema_file(SYNTH_SCHEMA, schema_path)
    meta_path = out_dir / "meta.csv"
    with open(meta_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "elevation", "texture", "diagnosis",
                         "bbox_r0", "bbox_c0", "bbox_r1", "bbox_c1"])
        for meta in metas:
            writer.writerow([meta.image_id, meta.elevation, meta.texture,
                             meta.diagnosis or "", *meta.bbox])
    return {"manifest": manifest, "metas": metas, "manifest_path": manifest_path,
            "schema_path": schema_path, "meta_path": meta_path}


def generate_elevation_dataset(out_dir, n: int = 600, seed: int = 0,
                               size: int = 64) -> dict:
    """Shape-labeled dataset: n images cycling through the three elevations."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        elevation = i % 3
        texture = int(rng.random() < 0.5)
        rgb8, bbox = render_lesion(rng, elevation, texture, size)
        image_id = f"elev{i:05d}"
        meta = LesionMeta(image_id=image_id, elevation=ELEVATION_CLASSES[elevation],
                          texture=TEXTURES[texture], bbox=bbox)
        items.append((image_id, rgb8, meta, None, ELEVATION_CLASSES[elevation]))
    return _write_dataset(out_dir, items, name="synthetic-elevation")


def generate_diagnosis_dataset(out_dir, n: int = 480, seed: int = 1,
                               size: int = 64) -> dict:
    """Rule-labeled dataset; records carry both diagnosis and true elevation."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        elevation = i % 3
        texture = int(rng.random() < 0.5)
        label = diagnosis_rule(elevation, texture)
        rgb8, bbox = render_lesion(rng, elevation, texture, size)
        image_id = f"diag{i:05d}"
        meta = LesionMeta(image_id=image_id, elevation=ELEVATION_CLASSES[elevation],
                          texture=TEXTURES[texture], bbox=bbox,
                          diagnosis=DIAGNOSIS_CLASSES[label])
        items.append((image_id, rgb8, meta, DIAGNOSIS_CLASSES[label],
                      ELEVATION_CLASSES[elevation]))
    return _write_dataset(out_dir, items, name="synthetic-diagnosis")


def load_meta(path) -> dict[str, LesionMeta]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["image_id"]] = LesionMeta(
                image_id=row["image_id"], elevation=row["elevation"],
                texture=row["texture"], diagnosis=row["diagnosis"] or None,
                bbox=(int(row["bbox_r0"]), int(row["bbox_c0"]),
                      int(row["bbox_r1"]), int(row["bbox_c1"])))
    return out

"""Pseudo-label inference, label-file round trips, aux attachment."""

import numpy as np
import pytest
from PIL import Image

from conftest import make_toy_bundle
from elevdx.dataio import DatasetManifest, ImageRecord, PreprocessConfig
from elevdx.errors import ConfigError, DataError
from elevdx.labeling import (ElevationPrediction, attach_labels, infer_elevations,
                             read_label_file, write_label_file)
from elevdx.synthetic import SYNTH_SCHEMA

CLASSES = SYNTH_SCHEMA.elevation_classes
PRE32 = PreprocessConfig(image_size=32)


def _manifest(tmp_path, n=6, modality="dermoscopic"):
    rng = np.random.default_rng(0)
    records = []
    for i in range(n):
        arr = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
        path = tmp_path / f"u{i}.png"
        Image.fromarray(arr).save(path)
        records.append(ImageRecord(image_id=f"u{i}", image_path=str(path),
                                   modality=modality))
    return DatasetManifest(records=records, schema=SYNTH_SCHEMA)


def _bundle(modality="dermoscopic", seed=0):
    bundle = make_toy_bundle(num_classes=3, seed=seed)
    bundle.class_names = CLASSES
    bundle.modality = modality
    return bundle


class TestInfer:
    def test_one_prediction_per_record(self, tmp_path):
        manifest = _manifest(tmp_path, n=7)
        predictions = infer_elevations(_bundle(), manifest, preprocess=PRE32)
        assert len(predictions) == 7
        assert [p.image_id for p in predictions] == [r.image_id for r in manifest.records]
        for pred in predictions:
            arr = np.asarray(pred.probs)
            assert abs(arr.sum() - 1.0) <= 1e-6
            assert pred.argmax_class == CLASSES[int(np.argmax(arr))]
            assert pred.source_modality == "dermoscopic"

    def test_modality_mismatch_refused(self, tmp_path):
        manifest = _manifest(tmp_path, modality="clinical")
        with pytest.raises(DataError, match="modality mismatch"):
            infer_elevations(_bundle("dermoscopic"), manifest, preprocess=PRE32)
        predictions = infer_elevations(_bundle("dermoscopic"), manifest,
                                       allow_modality_mismatch=True, preprocess=PRE32)
        assert len(predictions) == len(manifest)

    def test_wrong_role(self, tmp_path):
        bundle = make_toy_bundle(num_classes=3, role="diagnosis")
        with pytest.raises(DataError, match="elevation bundle"):
            infer_elevations(bundle, _manifest(tmp_path), preprocess=PRE32)

    def test_deterministic_label_file(self, tmp_path):
        manifest = _manifest(tmp_path)
        paths = []
        for i in range(2):
            predictions = infer_elevations(_bundle(seed=2), manifest, preprocess=PRE32)
            path = tmp_path / f"labels{i}.csv"
            write_label_file(predictions, path, CLASSES)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()


def _predictions():
    rows = [("a", (0.1, 0.7, 0.2)), ("b", (0.5, 0.25, 0.25)), ("c", (0.2, 0.2, 0.6))]
    return [ElevationPrediction(image_id=i, probs=p,
                                argmax_class=CLASSES[int(np.argmax(p))],
                                source_model="ckpt.pt", source_modality="dermoscopic")
            for i, p in rows]


class TestLabelFile:
    def test_round_trip_soft_nine_digits(self, tmp_path):
        rng = np.random.default_rng(3)
        predictions = []
        for i in range(20):
            probs = rng.dirichlet(np.ones(3))
            predictions.append(ElevationPrediction(
                image_id=f"x{i}", probs=tuple(probs),
                argmax_class=CLASSES[int(np.argmax(probs))],
                source_model="m", source_modality="clinical"))
        path = tmp_path / "labels.csv"
        write_label_file(predictions, path, CLASSES)
        table = read_label_file(path, CLASSES)
        for pred in predictions:
            loaded = table[pred.image_id]
            assert np.allclose(loaded.probs, pred.probs, atol=1e-9)
            assert loaded.argmax_class == pred.argmax_class

    def test_header_format(self, tmp_path):
        path = tmp_path / "labels.csv"
        write_label_file(_predictions(), path, CLASSES)
        header = path.read_text().splitlines()[0]
        assert header == ("image_id,p_flat,p_palpable,p_nodular,"
                          "argmax,source_model,source_modality")

    def test_attach_soft(self, tmp_path):
        manifest = _attachable_manifest(tmp_path)
        path = tmp_path / "labels.csv"
        write_label_file(_predictions(), path, CLASSES)
        attached = attach_labels(manifest, path, "soft")
        assert np.allclose(attached.records[0].aux, (0.1, 0.7, 0.2), atol=1e-9)

    def test_attach_discrete_one_hot(self, tmp_path):
        manifest = _attachable_manifest(tmp_path)
        path = tmp_path / "labels.csv"
        write_label_file(_predictions(), path, CLASSES)
        attached = attach_labels(manifest, path, "discrete")
        assert attached.records[0].aux == (0.0, 1.0, 0.0)
        assert attached.records[1].aux == (1.0, 0.0, 0.0)
        assert attached.records[2].aux == (0.0, 0.0, 1.0)

    def test_missing_id_named(self, tmp_path):
        manifest = _attachable_manifest(tmp_path, extra=True)
        path = tmp_path / "labels.csv"
        write_label_file(_predictions(), path, CLASSES)
        with pytest.raises(DataError, match="'extra'"):
            attach_labels(manifest, path, "soft")

    def test_malformed_probs_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("image_id,p_flat,p_palpable,p_nodular,argmax,source_model,source_modality\n"
                        "a,0.9,0.9,0.9,flat,m,clinical\n")
        with pytest.raises(DataError, match="simplex"):
            read_label_file(path, CLASSES)

    def test_bad_mode(self, tmp_path):
        path = tmp_path / "labels.csv"
        write_label_file(_predictions(), path, CLASSES)
        with pytest.raises(ConfigError, match="soft"):
            attach_labels(_attachable_manifest(tmp_path), path, "hard")


def _attachable_manifest(tmp_path, extra=False):
    ids = ["a", "b", "c"] + (["extra"] if extra else [])
    records = [ImageRecord(image_id=i, image_path=f"{i}.png", modality="dermoscopic",
                           diagnosis="benign")
               for i in ids]
    return DatasetManifest(records=records, schema=SYNTH_SCHEMA)

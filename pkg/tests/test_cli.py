"""CLI surface: exit codes, prepare idempotence, label/cam artifacts."""

import numpy as np
import pytest
import torch

from elevdx import cli
from elevdx.models import BackboneSpec, FusionHead, build_model, save_checkpoint
from elevdx.synthetic import generate_elevation_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    return generate_elevation_dataset(root, n=18, seed=3)


def write_config(path, dataset, out_dir, extra=""):
    path.write_text(
        f"manifest: {dataset['manifest_path']}\n"
        f"schema: {dataset['schema_path']}\n"
        f"out_dir: {out_dir}\n"
        "backbone: mobilenetv2\n"
        "stratify_on: elevation\n"
        "seed: 5\n"
        "epochs: 1\nbatch_size: 8\nrepeats: 1\n" + extra)
    return path


class TestPrepare:
    def test_idempotent_outputs(self, small_dataset, tmp_path):
        out = tmp_path / "out"
        config = write_config(tmp_path / "exp.txt", small_dataset, out)
        assert cli.main(["prepare", "--config", str(config)]) == 0
        split_bytes = (out / "split.csv").read_bytes()
        weight_bytes = (out / "class_weights_elevation.txt").read_bytes()
        assert cli.main(["prepare", "--config", str(config)]) == 0
        assert (out / "split.csv").read_bytes() == split_bytes
        assert (out / "class_weights_elevation.txt").read_bytes() == weight_bytes

    def test_missing_stratify_labels_is_data_error(self, small_dataset, tmp_path):
        manifest = tmp_path / "nolabels.csv"
        manifest.write_text("image_id,image_path,modality,diagnosis,elevation\n"
                            "a,a.png,clinical,,\n")
        config = tmp_path / "exp.txt"
        config.write_text(f"manifest: {manifest}\n"
                          f"schema: {small_dataset['schema_path']}\n"
                          f"out_dir: {tmp_path / 'o'}\nstratify_on: elevation\n")
        assert cli.main(["prepare", "--config", str(config)]) == 3

    def test_soft_fusion_without_labels_is_config_error(self, small_dataset, tmp_path):
        config = write_config(tmp_path / "exp.txt", small_dataset, tmp_path / "o",
                              extra="fusion: soft\n")
        assert cli.main(["train", "--config", str(config), "--role", "diagnosis"]) == 2

    def test_missing_config_flag(self):
        assert cli.main(["prepare"]) == 2


@pytest.fixture(scope="module")
def elevation_checkpoint(small_dataset, tmp_path_factory):
    torch.manual_seed(0)
    spec = BackboneSpec(family="mobilenetv2", num_classes=3)
    bundle = build_model(spec, FusionHead(feature_dim=spec.feature_dim, num_classes=3),
                         role="elevation", class_names=("flat", "palpable", "nodular"),
                         modality="dermoscopic")
    path = tmp_path_factory.mktemp("ckpt") / "elev.pt"
    save_checkpoint(bundle, path)
    return path


class TestLabelAndCam:
    def test_label_writes_csv(self, small_dataset, elevation_checkpoint, tmp_path):
        out_file = tmp_path / "labels.csv"
        code = cli.main(["label", "--checkpoint", str(elevation_checkpoint),
                         "--manifest", str(small_dataset["manifest_path"]),
                         "--schema", str(small_dataset["schema_path"]),
                         "--out-file", str(out_file)])
        assert code == 0
        lines = out_file.read_text().strip().splitlines()
        assert len(lines) == 1 + 18
        assert lines[0].startswith("image_id,p_flat,p_palpable,p_nodular,argmax")

    def test_label_modality_mismatch_exit_code(self, small_dataset, elevation_checkpoint,
                                               tmp_path):
        manifest = tmp_path / "clinical.csv"
        rows = open(small_dataset["manifest_path"]).read().replace("dermoscopic", "clinical")
        manifest.write_text(rows)
        args = ["label", "--checkpoint", str(elevation_checkpoint),
                "--manifest", str(manifest),
                "--schema", str(small_dataset["schema_path"]),
                "--out-file", str(tmp_path / "l.csv")]
        assert cli.main(args) == 3
        assert cli.main(args + ["--allow-modality-mismatch"]) == 0

    def test_cam_writes_overlays(self, small_dataset, elevation_checkpoint, tmp_path):
        image_id = small_dataset["manifest"].records[0].image_id
        out = tmp_path / "cams"
        code = cli.main(["cam", "--checkpoint", str(elevation_checkpoint),
                         "--manifest", str(small_dataset["manifest_path"]),
                         "--schema", str(small_dataset["schema_path"]),
                         "--ids", image_id, "--classes", "flat,nodular",
                         "--out", str(out)])
        assert code == 0
        assert (out / f"{image_id}_flat.png").is_file()
        assert (out / f"{image_id}_nodular.png").is_file()

    def test_cam_unknown_class(self, small_dataset, elevation_checkpoint, tmp_path):
        image_id = small_dataset["manifest"].records[0].image_id
        code = cli.main(["cam", "--checkpoint", str(elevation_checkpoint),
                         "--manifest", str(small_dataset["manifest_path"]),
                         "--schema", str(small_dataset["schema_path"]),
                         "--ids", image_id, "--classes", "bumpy",
                         "--out", str(tmp_path / "c")])
        assert code == 2

import time

import numpy as np
import pytest
import torch
from torch import nn

from elevdx import labeling, metrics, training
from elevdx.dataio import stratified_split
from elevdx.models import (BackboneSpec, ClassifierNet, FusionHead, ModelBundle,
                           build_model, family_feature_dim, load_checkpoint)
from elevdx.synthetic import (SYNTH_SCHEMA, generate_diagnosis_dataset,
                              generate_elevation_dataset)


def make_toy_bundle(num_classes=3, mode="none", aux_dim=0, channels=4, seed=0,
                    role="elevation", trunk=None):
    """Small conv trunk + the real head/fusion machinery; fast enough for unit tests.

    The BackboneSpec is nominal metadata here (toy trunks are not a supported
    family); forward passes and gradcam only consult the fusion config and net.
    """
    torch.manual_seed(seed)
    if trunk is None:
        trunk = nn.Sequential(nn.Conv2d(3, channels, 3, stride=2, padding=1),
                              nn.ReLU(),
                              nn.Conv2d(channels, channels, 3, stride=2, padding=1),
                              nn.ReLU())
    fusion = FusionHead(feature_dim=channels, num_classes=num_classes,
                        aux_dim=aux_dim, mode=mode)
    net = ClassifierNet(trunk, fusion.classifier_in, num_classes, aux_dim=aux_dim)
    spec = BackboneSpec(family="vgg16-gap", num_classes=num_classes)
    return ModelBundle(spec=spec, fusion=fusion, net=net, role=role)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_image(rng):
    return rng.random((32, 32, 3)).astype(np.float32)


# ---------------------------------------------------------------------------
# Desk-scale experiments shared by the acceptance suite (trained once per
# session; several criteria reuse the same models).
# ---------------------------------------------------------------------------

SMALLEST_BACKBONE = "mobilenetv2"  # fewest parameters of the supported families
ELEV_SEEDS = (7, 8, 9)

ELEV_TRAIN = dict(epochs=5, batch_size=16, lr=5e-3, momentum=0.9, weight_decay=1e-4,
                  lr_decay_factor=0.1, lr_decay_every=4, repeats=1)
DIAG_TRAIN = dict(epochs=2, batch_size=16, lr=5e-3, momentum=0.9, weight_decay=1e-4,
                  lr_decay_factor=0.1, lr_decay_every=4, repeats=1)


def _new_bundle(role, num_classes, mode, seed):
    torch.manual_seed(seed)
    aux_dim = 0 if mode == "none" else SYNTH_SCHEMA.num_elevation
    spec = BackboneSpec(family=SMALLEST_BACKBONE, num_classes=num_classes)
    fusion = FusionHead(feature_dim=family_feature_dim(SMALLEST_BACKBONE),
                        num_classes=num_classes, aux_dim=aux_dim, mode=mode)
    class_names = (SYNTH_SCHEMA.elevation_classes if role == "elevation"
                   else SYNTH_SCHEMA.diagnosis_classes)
    if len(class_names) != num_classes:
        class_names = ()
    return build_model(spec, fusion, role=role, class_names=class_names,
                       modality="dermoscopic")


def _run_and_score(manifest, split, role, mode, seed, out_dir, train_kwargs, cache=None):
    """Train one model, reload its best checkpoint, return test macro AUROC."""
    bundle = _new_bundle(role, len(SYNTH_SCHEMA.elevation_classes) if role == "elevation"
                         else len(SYNTH_SCHEMA.diagnosis_classes), mode, seed)
    config = training.TrainConfig(seed=seed, **train_kwargs)
    log = training.train(bundle, manifest, split, config, out_dir, cache=cache)
    best = load_checkpoint(training.select_best(log))
    test_manifest = manifest.filter_split(split, "test")
    probs = training.predict_manifest(best, test_manifest, cache=cache)
    targets = np.array([training._record_target(r, role, SYNTH_SCHEMA)
                        for r in test_manifest.records])
    auroc = metrics.macro_auroc(probs, targets, best.num_classes)
    return {"bundle": best, "log": log, "test_auroc": auroc, "probs": probs,
            "targets": targets}


@pytest.fixture(scope="session")
def synth_datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    elevation = generate_elevation_dataset(root / "elevation", n=600, seed=100)
    diagnosis = generate_diagnosis_dataset(root / "diagnosis", n=480, seed=200)
    return {"root": root, "elevation": elevation, "diagnosis": diagnosis}


@pytest.fixture(scope="session")
def elevation_experiment(synth_datasets, tmp_path_factory):
    """Three seeded elevation runs on the smallest backbone, 5 epochs each."""
    manifest = synth_datasets["elevation"]["manifest"]
    split = stratified_split(manifest, (0.7, 0.15, 0.15), "elevation", seed=42)
    work = tmp_path_factory.mktemp("elev_runs")
    cache = training._ImageCache(training.PreprocessConfig())
    started = time.perf_counter()
    runs = [_run_and_score(manifest, split, "elevation", "none", seed,
                           work / f"seed{seed}", ELEV_TRAIN, cache=cache)
            for seed in ELEV_SEEDS]
    elapsed = time.perf_counter() - started
    return {"runs": runs, "split": split, "manifest": manifest, "elapsed": elapsed,
            "mean_test_auroc": float(np.mean([r["test_auroc"] for r in runs]))}


@pytest.fixture(scope="session")
def diagnosis_experiment(synth_datasets, elevation_experiment, tmp_path_factory):
    """f_D vs f_DE vs soft-pseudo-label fusion, three seeds per variant."""
    dataset = synth_datasets["diagnosis"]
    manifest = dataset["manifest"]
    split = stratified_split(manifest, (0.7, 0.15, 0.15), "diagnosis", seed=43)
    work = tmp_path_factory.mktemp("diag_runs")

    labeler_bundle = elevation_experiment["runs"][0]["bundle"]
    predictions = labeling.infer_elevations(labeler_bundle, manifest)
    label_file = work / "pseudo_labels.csv"
    labeling.write_label_file(predictions, label_file, SYNTH_SCHEMA.elevation_classes)
    soft_manifest = labeling.attach_labels(manifest, label_file, "soft")

    cache = training._ImageCache(training.PreprocessConfig())
    started = time.perf_counter()
    results = {}
    for mode, train_manifest in (("none", manifest), ("gt_onehot", manifest),
                                 ("soft", soft_manifest)):
        results[mode] = [_run_and_score(train_manifest, split, "diagnosis", mode, seed,
                                        work / f"{mode}_seed{seed}", DIAG_TRAIN,
                                        cache=cache)
                         for seed in ELEV_SEEDS]
    elapsed = time.perf_counter() - started
    means = {mode: float(np.mean([r["test_auroc"] for r in runs]))
             for mode, runs in results.items()}
    return {"results": results, "means": means, "elapsed": elapsed,
            "label_file": label_file, "split": split}

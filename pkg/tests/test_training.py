"""Weighted cross-entropy, schedule, selection, and loop determinism."""

import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from conftest import make_toy_bundle
from elevdx.dataio import (DatasetManifest, ImageRecord, PreprocessConfig,
                           stratified_split)
from elevdx.errors import DataError
from elevdx.synthetic import SYNTH_SCHEMA
from elevdx.training import (RunLog, EpochStats, TrainConfig, select_best, train,
                             weighted_cross_entropy)

PAPER_WEIGHTS = (440 / 448, 1.0, 440 / 123)


class TestWeightedCrossEntropy:
    def test_uniform_logits_unit_weights(self):
        loss = weighted_cross_entropy(np.zeros(3), 1, np.ones(3))
        assert float(loss) == pytest.approx(math.log(3), rel=1e-12)

    def test_paper_weighted_example(self):
        loss = weighted_cross_entropy(np.zeros(3), 2, PAPER_WEIGHTS)
        assert float(loss) == pytest.approx((440 / 123) * math.log(3), rel=1e-12)

    def test_unit_weights_match_unweighted(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(8, 4))
        targets = rng.integers(0, 4, size=8)
        ours = weighted_cross_entropy(logits, targets, np.ones(4))
        reference = torch.nn.functional.cross_entropy(
            torch.as_tensor(logits), torch.as_tensor(targets))
        assert float(ours) == pytest.approx(float(reference), rel=1e-9)

    def test_batch_reduction_weighted_mean(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 3))
        targets = rng.integers(0, 3, size=6)
        weights = np.array([0.5, 1.0, 2.5])
        per_sample = [float(weighted_cross_entropy(logits[i], int(targets[i]), np.ones(3)))
                      for i in range(6)]
        expected = (sum(weights[t] * l for t, l in zip(targets, per_sample))
                    / sum(weights[t] for t in targets))
        assert float(weighted_cross_entropy(logits, targets, weights)) == pytest.approx(
            expected, rel=1e-9)

    def test_target_out_of_range(self):
        with pytest.raises(DataError, match="out of range"):
            weighted_cross_entropy(np.zeros(3), 3, np.ones(3))

    def test_zero_iff_certain(self):
        logits = torch.tensor([50.0, -50.0, -50.0], dtype=torch.float64)
        assert float(weighted_cross_entropy(logits, 0, np.ones(3))) == pytest.approx(0.0, abs=1e-12)
        assert float(weighted_cross_entropy(logits, 1, np.ones(3))) > 1.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            logits = rng.normal(size=5)
            target = int(rng.integers(0, 5))
            weights = rng.uniform(0.2, 4.0, size=5)
            t = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
            weighted_cross_entropy(t, target, weights).backward()
            analytic = t.grad.numpy()
            h = 1e-6
            for j in range(5):
                bumped_up, bumped_dn = logits.copy(), logits.copy()
                bumped_up[j] += h
                bumped_dn[j] -= h
                numeric = (float(weighted_cross_entropy(bumped_up, target, weights))
                           - float(weighted_cross_entropy(bumped_dn, target, weights))) / (2 * h)
                assert analytic[j] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


class TestSchedule:
    def test_decay_closed_form(self):
        config = TrainConfig(epochs=50, seed=0)
        for epoch in range(50):
            assert config.lr_at(epoch) == pytest.approx(1e-2 * 0.1 ** (epoch // 10), rel=1e-12)
        assert config.lr_at(0) == 1e-2
        assert config.lr_at(49) == pytest.approx(1e-6)

    def test_defaults_mirror_reference_schedule(self):
        config = TrainConfig()
        assert (config.epochs, config.batch_size, config.lr) == (50, 32, 1e-2)
        assert (config.momentum, config.weight_decay) == (0.9, 1e-4)
        assert (config.lr_decay_factor, config.lr_decay_every, config.repeats) == (0.1, 10, 3)


class TestSelectBest:
    def _log(self, aurocs, checkpoints):
        log = RunLog(seed=0, checkpoints=checkpoints)
        best = -1.0
        for epoch, auroc in enumerate(aurocs):
            log.epochs.append(EpochStats(epoch, 1.0, 1.0, auroc, 1e-2))
            if auroc > best:
                best = auroc
                log.best_epoch = epoch
        return log

    def test_argmax(self):
        log = self._log([0.6, 0.8, 0.7], {"best": "x/best.pt"})
        assert log.best_epoch == 1
        assert select_best(log) == "x/best.pt"

    def test_tie_takes_earliest(self):
        log = self._log([0.8, 0.8], {"best": "x/best.pt"})
        assert log.best_epoch == 0

    def test_monotone_takes_last(self):
        log = self._log([0.5, 0.6, 0.9], {"best": "x/best.pt"})
        assert log.best_epoch == 2

    def test_missing_checkpoints(self):
        with pytest.raises(DataError, match="no recorded checkpoints"):
            select_best(self._log([0.5], {}))

    def test_empty_log(self):
        with pytest.raises(DataError, match="empty"):
            select_best(RunLog(seed=0))


def test_descent_on_frozen_batch():
    torch.manual_seed(0)
    bundle = make_toy_bundle(num_classes=3, seed=4)
    x = torch.randn(8, 3, 32, 32)
    y = torch.randint(0, 3, (8,))
    optimizer = torch.optim.SGD(bundle.net.parameters(), lr=1e-3, momentum=0.0)
    before = weighted_cross_entropy(bundle.net(x), y, np.ones(3))
    optimizer.zero_grad()
    before.backward()
    optimizer.step()
    with torch.no_grad():
        after = weighted_cross_entropy(bundle.net(x), y, np.ones(3))
    assert float(after) < float(before.detach())


def _tiny_dataset(tmp_path, n=18):
    rng = np.random.default_rng(0)
    records = []
    classes = SYNTH_SCHEMA.elevation_classes
    for i in range(n):
        cls = i % 3
        # class-dependent brightness so the toy task is learnable
        arr = rng.normal(0.2 + 0.3 * cls, 0.05, size=(32, 32, 3))
        arr = (np.clip(arr, 0, 1) * 255).astype(np.uint8)
        path = tmp_path / f"im{i}.png"
        Image.fromarray(arr).save(path)
        records.append(ImageRecord(image_id=f"im{i}", image_path=str(path),
                                   modality="dermoscopic", elevation=classes[cls]))
    return DatasetManifest(records=records, schema=SYNTH_SCHEMA)


class TestTrainLoop:
    def test_deterministic_runs_and_artifacts(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        split = stratified_split(manifest, (2 / 3, 1 / 6, 1 / 6), "elevation", seed=0)
        preprocess = PreprocessConfig(image_size=32)
        config = TrainConfig(epochs=3, batch_size=4, lr=1e-3, seed=11, repeats=1,
                             lr_decay_every=2, lr_decay_factor=0.5)

        logs = []
        for attempt in range(2):
            bundle = make_toy_bundle(num_classes=3, seed=11)
            out = tmp_path / f"run{attempt}"
            logs.append(train(bundle, manifest, split, config, out, preprocess=preprocess))
        first, second = logs
        assert [s.train_loss for s in first.epochs] == [s.train_loss for s in second.epochs]
        assert [s.val_auroc for s in first.epochs] == [s.val_auroc for s in second.epochs]

        assert len(first.epochs) == 3
        assert first.optimizer_steps == 3 * math.ceil(12 / 4)  # epochs * ceil(n/batch)
        assert [s.lr for s in first.epochs] == [1e-3, 1e-3, 5e-4]
        assert first.best_epoch == int(np.argmax([s.val_auroc for s in first.epochs]))
        assert (tmp_path / "run0" / "best.pt").is_file()
        assert (tmp_path / "run0" / "last.pt").is_file()
        assert select_best(first).endswith("best.pt")

        lines = (tmp_path / "run0" / "runlog.jsonl").read_text().strip().splitlines()
        assert len(lines) == 4  # 3 epochs + summary
        assert json.loads(lines[-1])["type"] == "summary"

    def test_empty_split_rejected(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        split = stratified_split(manifest, (1.0, 0.0, 0.0), "elevation", seed=0)
        bundle = make_toy_bundle(num_classes=3)
        with pytest.raises(DataError, match="empty split"):
            train(bundle, manifest, split, TrainConfig(epochs=1, seed=0), tmp_path / "x",
                  preprocess=PreprocessConfig(image_size=32))

    def test_fusion_requires_attached_aux(self, tmp_path):
        manifest = _tiny_dataset(tmp_path)
        split = stratified_split(manifest, (2 / 3, 1 / 6, 1 / 6), "elevation", seed=0)
        bundle = make_toy_bundle(num_classes=3, mode="soft", aux_dim=3, role="diagnosis")
        with pytest.raises(DataError, match="diagnosis|attached"):
            train(bundle, manifest, split, TrainConfig(epochs=1, seed=0), tmp_path / "y",
                  preprocess=PreprocessConfig(image_size=32))

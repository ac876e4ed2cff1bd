"""Training loop: weighted cross-entropy, step-decayed SGD, AUROC-based selection.

Defaults mirror the reference schedule: 50 epochs of SGD (momentum 0.9, weight
decay 1e-4), batch size 32, lr 1e-2 decayed by 0.1 every 10 epochs, repeated 3
times with seeds base, base+1, base+2. Batch composition is fixed entirely by
the seeded shuffle, and per-sample augmentation draws depend only on
(seed, epoch, sample index), so two runs with the same inputs produce
identical logs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import metrics
from .dataio import (ClassWeights, DatasetManifest, PreprocessConfig, SplitAssignment,
                     NUM_DIHEDRAL, compute_class_weights, dihedral_transform, load_rgb,
                     normalize_rgb, resize_rgb, seeded_rng)
from .errors import ConfigError, DataError
from .models import ModelBundle, config_fingerprint, one_hot, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    seed: int = 0
    repeats: int = 3
    class_weights: ClassWeights | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.repeats < 1:
            raise ConfigError("epochs, batch_size and repeats must be positive")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("bad optimizer settings")
        if not 0 < self.lr_decay_factor <= 1 or self.lr_decay_every < 1:
            raise ConfigError("bad lr decay settings")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def fingerprint(self) -> str:
        payload = asdict(self)
        weights = payload.pop("class_weights")
        if weights is not None:
            payload["class_weights"] = ",".join(f"{w:.12g}" for w in weights["weights"])
        return config_fingerprint(payload)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_auroc: float
    lr: float


@dataclass
class RunLog:
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    checkpoints: dict[str, str] = field(default_factory=dict)
    optimizer_steps: int = 0

    @property
    def best_val_auroc(self) -> float:
        return self.epochs[self.best_epoch].val_auroc

    def save(self, path) -> None:
        """Line-delimited records, one per epoch plus a trailing summary."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for stats in self.epochs:
                fh.write(json.dumps({"type": "epoch", **asdict(stats)}) + "\n")
            fh.write(json.dumps({"type": "summary", "seed": self.seed,
                                 "best_epoch": self.best_epoch,
                                 "optimizer_steps": self.optimizer_steps,
                                 "checkpoints": self.checkpoints}) + "\n")


def select_best(run_log: RunLog) -> str:
    """Checkpoint path of the epoch with the best validation AUROC."""
    if not run_log.epochs:
        raise DataError("empty run log")
    if "best" not in run_log.checkpoints:
        raise DataError("run log has no recorded checkpoints")
    return run_log.checkpoints["best"]


def weighted_cross_entropy(logits, target, weights) -> torch.Tensor:
    """Cross-entropy with per-class weights (median frequency balancing).

    A single sample (1-d logits) returns the unreduced value
    weights[target] * (-log softmax(logits)[target]). Batches reduce as
    sum(w_i * nll_i) / sum(w_i), which keeps the loss scale comparable across
    class mixes; with all weights 1 both paths equal the plain cross-entropy.
    Differentiable in the logits.
    """
    if not isinstance(logits, torch.Tensor):
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    weights = weights.as_array() if isinstance(weights, ClassWeights) else np.asarray(weights)
    weights_t = torch.as_tensor(weights, dtype=logits.dtype)
    single = logits.ndim == 1
    if single:
        logits = logits.unsqueeze(0)
    targets_t = torch.as_tensor(np.atleast_1d(np.asarray(target, dtype=np.int64)))
    if logits.shape[1] != weights_t.shape[0]:
        raise ConfigError(f"{weights_t.shape[0]} weights for {logits.shape[1]} classes")
    if targets_t.min() < 0 or targets_t.max() >= logits.shape[1]:
        raise DataError(f"target out of range for {logits.shape[1]} classes")
    log_probs = torch.log_softmax(logits, dim=1)
    nll = -log_probs.gather(1, targets_t.unsqueeze(1)).squeeze(1)
    sample_weights = weights_t[targets_t]
    if single:
        return (sample_weights * nll).squeeze(0)
    return (sample_weights * nll).sum() / sample_weights.sum()


# ---------------------------------------------------------------------------
# Data feeding
# ---------------------------------------------------------------------------

class _ImageCache:
    """Decoded-and-resized uint8 images, keyed by image_id.

    Augmentation and normalization happen per batch, so one decode per image
    serves every epoch.
    """

    def __init__(self, config: PreprocessConfig):
        self.config = config
        self._store: dict[str, np.ndarray] = {}

    def get(self, record) -> np.ndarray:
        arr = self._store.get(record.image_id)
        if arr is None:
            arr = resize_rgb(load_rgb(record.image_path), self.config.image_size)
            self._store[record.image_id] = arr
        return arr


def _record_target(record, role: str, schema) -> int:
    if role == "elevation":
        if record.elevation is None:
            raise DataError(f"record {record.image_id!r} lacks the elevation label")
        return schema.elevation_index(record.elevation)
    if record.diagnosis is None:
        raise DataError(f"record {record.image_id!r} lacks the diagnosis label")
    return schema.diagnosis_index(record.diagnosis)


def _record_aux(record, fusion, schema) -> np.ndarray | None:
    if fusion.mode == "none":
        return None
    if fusion.mode == "gt_onehot":
        if record.elevation is None:
            raise DataError(
                f"fusion mode gt_onehot: record {record.image_id!r} has no elevation label")
        return one_hot(schema.elevation_index(record.elevation), fusion.aux_dim)
    if record.aux is None:
        raise DataError(
            f"fusion mode {fusion.mode!r}: record {record.image_id!r} has no attached "
            f"elevation vector (run the labeling step first)")
    return np.asarray(record.aux, dtype=np.float32)


def _make_batch(cache, records, config, ks=None) -> torch.Tensor:
    arrays = []
    for j, rec in enumerate(records):
        arr = cache.get(rec)
        if ks is not None:
            arr = dihedral_transform(arr, ks[j])
        arrays.append(normalize_rgb(arr, config))
    x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2)
    return x.contiguous(memory_format=torch.channels_last)


def predict_manifest(bundle: ModelBundle, manifest: DatasetManifest,
                     preprocess: PreprocessConfig = PreprocessConfig(),
                     batch_size: int = 64, with_aux: bool = True,
                     cache: _ImageCache | None = None) -> np.ndarray:
    """Eval-mode probabilities for every record, in manifest order."""
    cache = cache or _ImageCache(preprocess)
    schema = manifest.schema
    bundle.net.eval()
    probs = []
    records = manifest.records
    with torch.inference_mode():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            x = _make_batch(cache, chunk, preprocess)
            aux = None
            if with_aux and bundle.fusion.mode != "none":
                aux = torch.from_numpy(
                    np.stack([_record_aux(r, bundle.fusion, schema) for r in chunk]))
            probs.append(torch.softmax(bundle.net(x, aux), dim=1).numpy())
    if not probs:
        raise DataError("no records to predict")
    return np.concatenate(probs, axis=0)


def train(bundle: ModelBundle, manifest: DatasetManifest, split: SplitAssignment,
          config: TrainConfig, out_dir, preprocess: PreprocessConfig = PreprocessConfig(),
          cache: _ImageCache | None = None) -> RunLog:
    """Run the full schedule, tracking validation AUROC and keeping best + last.

    Executes epochs * ceil(n_train / batch_size) optimizer steps. A checkpoint
    is written at every new validation-AUROC best (earliest epoch wins ties);
    only the best and the final checkpoints are kept on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = manifest.schema
    role = bundle.role

    train_manifest = manifest.filter_split(split, "train")
    val_manifest = manifest.filter_split(split, "val")
    if len(train_manifest) == 0 or len(val_manifest) == 0:
        raise DataError(f"empty split: train={len(train_manifest)} val={len(val_manifest)}")

    train_records = train_manifest.records
    targets = np.array([_record_target(r, role, schema) for r in train_records])
    aux_rows = [_record_aux(r, bundle.fusion, schema) for r in train_records]
    val_targets = np.array([_record_target(r, role, schema) for r in val_manifest.records])

    if config.class_weights is not None:
        weights = config.class_weights
        if len(weights.weights) != bundle.num_classes:
            raise ConfigError("class_weights length does not match the model")
    else:
        counts = np.bincount(targets, minlength=bundle.num_classes)
        if (counts == 0).any():
            raise DataError(f"training split misses classes {np.flatnonzero(counts == 0).tolist()}")
        weights = compute_class_weights(counts)
    weight_t = torch.as_tensor(weights.as_array(), dtype=torch.float32)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    net = bundle.net.to(memory_format=torch.channels_last)
    optimizer = torch.optim.SGD(net.parameters(), lr=config.lr,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    cache = cache or _ImageCache(preprocess)
    run_log = RunLog(seed=config.seed)
    best_auroc = -float("inf")
    best_path = out_dir / "best.pt"
    meta = {"train_size": len(train_records), "val_size": len(val_manifest)}
    bundle.config_hash = config.fingerprint()

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        net.train()
        order = seeded_rng(config.seed, epoch).permutation(len(train_records))
        loss_num = 0.0
        loss_den = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            chunk = [train_records[i] for i in idx]
            ks = [int(seeded_rng(config.seed, epoch, int(i)).integers(0, NUM_DIHEDRAL))
                  for i in idx]
            x = _make_batch(cache, chunk, preprocess, ks=ks)
            y = torch.from_numpy(targets[idx]).long()
            aux = None
            if bundle.fusion.mode != "none":
                aux = torch.from_numpy(np.stack([aux_rows[i] for i in idx]))
            optimizer.zero_grad()
            loss = weighted_cross_entropy(net(x, aux), y, weight_t)
            loss.backward()
            optimizer.step()
            run_log.optimizer_steps += 1
            batch_weight = float(weight_t[y].sum())
            loss_num += float(loss.detach()) * batch_weight
            loss_den += batch_weight

        net.eval()
        val_probs = predict_manifest(bundle, val_manifest, preprocess, cache=cache)
        val_loss = float(weighted_cross_entropy(
            torch.log(torch.from_numpy(val_probs).clamp_min(1e-12)), val_targets, weight_t))
        val_auroc = metrics.macro_auroc(val_probs, val_targets, bundle.num_classes)
        if val_auroc is None:
            raise DataError("validation split contains a single class; AUROC undefined")
        run_log.epochs.append(EpochStats(epoch=epoch, train_loss=loss_num / loss_den,
                                         val_loss=val_loss, val_auroc=val_auroc, lr=lr))
        log.info("seed %d epoch %d: train_loss=%.4f val_loss=%.4f val_auroc=%.4f lr=%g",
                 config.seed, epoch, run_log.epochs[-1].train_loss, val_loss, val_auroc, lr)
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            run_log.best_epoch = epoch
            save_checkpoint(bundle, best_path, extra={**meta, "epoch": epoch})
            run_log.checkpoints["best"] = str(best_path)

    last_path = out_dir / "last.pt"
    save_checkpoint(bundle, last_path, extra={**meta, "epoch": config.epochs - 1})
    run_log.checkpoints["last"] = str(last_path)
    run_log.save(out_dir / "runlog.jsonl")
    return run_log

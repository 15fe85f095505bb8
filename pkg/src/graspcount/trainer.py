"""Two-stage contrastive training plus the single-stage transformer baseline.

Stage 1 trains encoder + projection head with a supervised contrastive loss
on class-balanced batches. Stage 2 trains the classifier head on the frozen
encoder (features are computed once). All randomness derives from
``TrainConfig.seed``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import (
    CompositeStore,
    DatasetManifest,
    ManifestEntry,
    balance_classes,
    load_batches,
    num_batches,
    single_view_composite,
    split_manifest,
    to_model_input,
)
from .losses import (
    CountPrediction,
    EmbeddingBatch,
    LossConfig,
    error_sensitive_loss,
    fourier_supcon_loss,
    supcon_loss,
)
from .models import ContrastiveModel, EncoderConfig, HeadConfig, PatchTransformer, TransformerConfig

logger = logging.getLogger(__name__)

STAGES = ("contrastive", "classifier", "transformer-baseline")
STAGE1_LOSSES = ("supcon", "fourier_supcon")
STAGE2_LOSSES = ("cross_entropy", "error_sensitive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "contrastive"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    loss: str = "supcon"
    patience: int = 5
    val_fraction: float = 0.1
    # stage 2 only: train the encoder too instead of freezing it
    fine_tune: bool = False
    # stage 1 only: rotate the anchor class per step instead of all-pairs
    rotation_mode: bool = False
    # single-view training: each sample shows one random view in its quadrant
    single_view: bool = False
    # random per-view horizontal flips on training batches
    augment: bool = True
    # "constant" or "cosine" (per-step decay from learning_rate to 0 over all epochs)
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        allowed = STAGE1_LOSSES if self.stage == "contrastive" else STAGE2_LOSSES
        if self.loss not in allowed:
            raise ValueError(f"loss {self.loss!r} not valid for stage {self.stage!r}; expected one of {allowed}")


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    epochs: List[Dict] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def record(self, epoch: int, train_loss: float, val_loss: float, val_accuracy: Optional[float], wall: float):
        if self.epochs and epoch <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.epochs.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_accuracy": val_accuracy,
                "wall_clock": wall,
            }
        )

    def losses(self) -> List[Tuple[float, float]]:
        return [(e["train_loss"], e["val_loss"]) for e in self.epochs]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.epochs:
                rec = dict(e, seed=self.seed, config_hash=self.config_hash, best=e["epoch"] == self.best_epoch)
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _epoch_seed(seed: int, epoch: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([seed, epoch, salt]).generate_state(1)[0])


def positive_rotation_schedule(n_classes: int, step: int) -> int:
    """1-based anchor class for ``step``: cycles 1, 2, ..., n, 1, 2, ..."""
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    return step % n_classes + 1


def fit_val_split(manifest: DatasetManifest, val_fraction: float, seed: int):
    """Training entries (split 'train' or unsplit) divided into fit and validation folds."""
    entries = [e for e in manifest.entries if e.split in (None, "train")]
    pool = manifest.with_entries(entries)
    if val_fraction <= 0:
        return pool, pool.with_entries([])
    fit, val = split_manifest(pool, 1.0 - val_fraction, seed)
    return fit, val


def _balanced(manifest: DatasetManifest) -> List[ManifestEntry]:
    return balance_classes(manifest, split=None)


def _batches(samples, cfg: TrainConfig, seed, store, input_size, train=True, augment=True):
    view_seed = seed if cfg.single_view else None
    aug_seed = seed + 1 if (cfg.augment and augment and train and seed is not None) else None
    return load_batches(
        samples,
        cfg.batch_size,
        seed,
        train=train,
        input_size=input_size,
        store=store,
        single_view_seed=view_seed,
        augment_seed=aug_seed,
    )


def contrastive_batch_loss(
    model: ContrastiveModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    step: int = 0,
) -> torch.Tensor:
    """Stage-1 loss for one batch, averaged over contributing anchors."""
    z = model.project(model.encode(images))
    batch = EmbeddingBatch(z, labels)
    anchor = None
    if train_cfg.rotation_mode:
        anchor = positive_rotation_schedule(model.head_cfg.num_classes, step) - 1
    fn = fourier_supcon_loss if train_cfg.loss == "fourier_supcon" else supcon_loss
    return fn(batch, loss_cfg, anchor_class=anchor, reduction="mean").loss


def _scheduler(opt, cfg: TrainConfig, steps_per_epoch: int):
    if cfg.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, cfg.epochs * steps_per_epoch))
    return None


def _check_finite(loss: torch.Tensor, epoch: int, batch_idx: int) -> None:
    if not torch.isfinite(loss):
        logger.error("non-finite loss at epoch %d batch %d", epoch, batch_idx)
        raise TrainingDiverged(f"loss became {loss.item()} at epoch {epoch}, batch {batch_idx}")


def train_encoder(
    manifest: DatasetManifest,
    enc_cfg: EncoderConfig = EncoderConfig(),
    head_cfg: HeadConfig = HeadConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    store: Optional[CompositeStore] = None,
) -> Tuple[ContrastiveModel, TrainLog]:
    """Stage 1: contrastive training of encoder + projection head.

    Returns the model at the epoch with the lowest validation loss, where the
    validation fold is a held-out, balanced part of the training entries.
    """
    if train_cfg.stage != "contrastive":
        raise ValueError("train_encoder needs stage='contrastive'")
    seed_everything(train_cfg.seed)
    model = ContrastiveModel(enc_cfg, head_cfg)
    log = TrainLog(train_cfg.seed, config_hash(enc_cfg, head_cfg, train_cfg, loss_cfg))
    if train_cfg.epochs == 0:
        return model, log

    store = store or CompositeStore()
    fit, val = fit_val_split(manifest, train_cfg.val_fraction, train_cfg.seed)
    fit_samples = _balanced(fit)
    val_samples = _balanced(val) if len(val) else []
    params = list(model.encoder.parameters()) + list(model.projection.parameters())
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    sched = _scheduler(opt, train_cfg, num_batches(len(fit_samples), train_cfg.batch_size, True))

    all_pairs = replace(train_cfg, rotation_mode=False)

    def val_loss() -> float:
        if not val_samples:
            return float("nan")
        model.eval()
        total, n = 0.0, 0
        with torch.no_grad():
            for x, y in _batches(
                val_samples, train_cfg, _epoch_seed(train_cfg.seed, 0, 1), store, enc_cfg.input_size, augment=False
            ):
                total += float(contrastive_batch_loss(model, x, y, loss_cfg, all_pairs))
                n += 1
        return total / max(n, 1)

    best, best_state, bad = math.inf, copy.deepcopy(model.state_dict()), 0
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        running, nb = 0.0, 0
        for bi, (x, y) in enumerate(_batches(fit_samples, train_cfg, _epoch_seed(train_cfg.seed, epoch), store, enc_cfg.input_size)):
            loss = contrastive_batch_loss(model, x, y, loss_cfg, train_cfg, step)
            _check_finite(loss, epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            running += loss.item()
            nb += 1
            step += 1
        vl = val_loss()
        log.record(epoch, running / max(nb, 1), vl, None, time.perf_counter() - t0)
        logger.info("stage1 epoch %d train %.4f val %.4f", epoch, running / max(nb, 1), vl)
        score = vl if val_samples else running / max(nb, 1)
        if score < best:
            best, best_state, bad = score, copy.deepcopy(model.state_dict()), 0
            log.best_epoch = epoch
        else:
            bad += 1
            if bad >= train_cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return model, log


def supervised_loss(logits: torch.Tensor, labels: torch.Tensor, loss: str, loss_cfg: LossConfig) -> torch.Tensor:
    if loss == "cross_entropy":
        return F.cross_entropy(logits, labels)
    if loss == "error_sensitive":
        return error_sensitive_loss(CountPrediction(torch.softmax(logits, dim=1), labels), loss_cfg)
    raise ValueError(f"unknown supervised loss {loss!r}")


def _supervised_loop(
    logits_fn,
    params,
    modules: Sequence[nn.Module],
    fit_source,
    val_source,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    log: TrainLog,
):
    """Shared epoch loop for stage 2 and the transformer baseline.

    ``fit_source(epoch)`` and ``val_source()`` yield ``(inputs, labels)``.
    Returns the best state dicts of ``modules`` by validation loss.
    """
    opt = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    # batch counts vary by source here, so the cosine decay steps per epoch
    sched = _scheduler(opt, train_cfg, 1)
    best = math.inf
    best_state = [copy.deepcopy(m.state_dict()) for m in modules]
    bad = 0
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        for m in modules:
            m.train()
        running, nb = 0.0, 0
        for bi, (x, y) in enumerate(fit_source(epoch)):
            loss = supervised_loss(logits_fn(x), y, train_cfg.loss, loss_cfg)
            _check_finite(loss, epoch, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item()
            nb += 1
        if sched is not None:
            sched.step()
        for m in modules:
            m.eval()
        total, correct, n = 0.0, 0, 0
        with torch.no_grad():
            for x, y in val_source():
                logits = logits_fn(x)
                total += float(supervised_loss(logits, y, train_cfg.loss, loss_cfg)) * len(y)
                correct += int((logits.argmax(dim=1) == y).sum())
                n += len(y)
        vl = total / n if n else float("nan")
        acc = correct / n if n else None
        log.record(epoch, running / max(nb, 1), vl, acc, time.perf_counter() - t0)
        logger.info("epoch %d train %.4f val %.4f acc %s", epoch, running / max(nb, 1), vl, acc)
        score = vl if n else running / max(nb, 1)
        if score < best:
            best, bad = score, 0
            best_state = [copy.deepcopy(m.state_dict()) for m in modules]
            log.best_epoch = epoch
        else:
            bad += 1
            if bad >= train_cfg.patience:
                break
    return best_state


class _FeatureTable:
    """Frozen-encoder features per entry: the composite and, lazily, each single view."""

    def __init__(self, model: ContrastiveModel, store: CompositeStore, batch_size: int = 64):
        self.model, self.store, self.batch_size = model, store, batch_size
        self._cache: Dict[Tuple[str, Optional[int]], torch.Tensor] = {}

    def fill(self, entries: Sequence[ManifestEntry], views: Sequence[Optional[int]]) -> None:
        self.model.eval()
        unique = list({str(e.views[0]): e for e in entries}.values())
        with torch.no_grad():
            for v in views:
                todo = [e for e in unique if (str(e.views[0]), v) not in self._cache]
                for start in range(0, len(todo), self.batch_size):
                    chunk = todo[start : start + self.batch_size]
                    frames = [
                        self.store.composite(e) if v is None else single_view_composite(self.store.views(e)[v], v)
                        for e in chunk
                    ]
                    feats = self.model.encode(to_model_input(frames, self.model.input_size))
                    for e, f in zip(chunk, feats):
                        self._cache[(str(e.views[0]), v)] = f

    def get(self, entries: Sequence[ManifestEntry], views: Sequence[Optional[int]]) -> torch.Tensor:
        return torch.stack([self._cache[(str(e.views[0]), v)] for e, v in zip(entries, views)])


def _feature_batches(table: _FeatureTable, samples, batch_size, seed, train, single_view):
    order = np.arange(len(samples)) if seed is None else np.random.default_rng(seed).permutation(len(samples))
    view_rng = np.random.default_rng(seed) if single_view else None
    n = len(samples)
    stop = n - n % batch_size if train else n
    for start in range(0, stop, batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        views = view_rng.integers(0, 4, size=len(chunk)).tolist() if view_rng is not None else [None] * len(chunk)
        yield table.get(chunk, views), torch.tensor([e.count for e in chunk], dtype=torch.long)


def train_classifier(
    model: ContrastiveModel,
    manifest: DatasetManifest,
    head_cfg: Optional[HeadConfig] = None,
    train_cfg: TrainConfig = TrainConfig(stage="classifier", loss="cross_entropy"),
    loss_cfg: LossConfig = LossConfig(),
    store: Optional[CompositeStore] = None,
) -> Tuple[ContrastiveModel, TrainLog]:
    """Stage 2: train the classifier head on the stage-1 encoder.

    The encoder is frozen unless ``train_cfg.fine_tune``; frozen features are
    computed once in inference mode. The model is modified in place and returned.
    """
    if train_cfg.stage != "classifier":
        raise ValueError("train_classifier needs stage='classifier'")
    seed_everything(train_cfg.seed)
    if head_cfg is not None and head_cfg != model.head_cfg:
        model.head_cfg = head_cfg
        from .models import ClassifierHead

        model.classifier = ClassifierHead(model.enc_cfg.feature_dim, head_cfg)
    log = TrainLog(train_cfg.seed, config_hash(model.enc_cfg, model.head_cfg, train_cfg, loss_cfg))
    if train_cfg.epochs == 0:
        return model, log

    store = store or CompositeStore()
    fit, val = fit_val_split(manifest, train_cfg.val_fraction, train_cfg.seed)
    fit_samples = _balanced(fit)
    val_samples = list(val.entries)
    views: List[Optional[int]] = [0, 1, 2, 3] if train_cfg.single_view else [None]
    bs = train_cfg.batch_size

    if train_cfg.fine_tune:
        modules = [model.encoder, model.classifier]
        params = list(model.encoder.parameters()) + list(model.classifier.parameters())
        best = _supervised_loop(
            model.logits,
            params,
            modules,
            lambda ep: _batches(fit_samples, train_cfg, _epoch_seed(train_cfg.seed, ep, 2), store, model.input_size),
            lambda: _batches(val_samples, replace(train_cfg, single_view=False), None, store, model.input_size, train=False)
            if not train_cfg.single_view
            else _single_view_eval(val_samples, bs, store, model.input_size),
            train_cfg,
            loss_cfg,
            log,
        )
    else:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
        table = _FeatureTable(model, store)
        table.fill(fit.entries + val.entries, views)
        modules = [model.classifier]
        best = _supervised_loop(
            model.classifier,
            list(model.classifier.parameters()),
            modules,
            lambda ep: _feature_batches(table, fit_samples, bs, _epoch_seed(train_cfg.seed, ep, 2), True, train_cfg.single_view),
            lambda: _feature_val(table, val_samples, bs, views),
            train_cfg,
            loss_cfg,
            log,
        )
        for p in model.encoder.parameters():
            p.requires_grad_(True)
    for m, state in zip(modules, best):
        m.load_state_dict(state)
    model.eval()
    return model, log


def _feature_val(table: _FeatureTable, samples, batch_size, views):
    for v in views:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            yield table.get(chunk, [v] * len(chunk)), torch.tensor([e.count for e in chunk], dtype=torch.long)


def _single_view_eval(samples, batch_size, store, input_size):
    for v in range(4):
        yield from load_batches(samples, batch_size, None, train=False, input_size=input_size, store=store, view=v)


def train_transformer_baseline(
    manifest: DatasetManifest,
    tcfg: TransformerConfig = TransformerConfig(),
    train_cfg: TrainConfig = TrainConfig(stage="transformer-baseline", loss="error_sensitive"),
    loss_cfg: LossConfig = LossConfig(),
    store: Optional[CompositeStore] = None,
) -> Tuple[PatchTransformer, TrainLog]:
    """Single-stage training of the patch transformer on balanced composites."""
    if train_cfg.stage != "transformer-baseline":
        raise ValueError("train_transformer_baseline needs stage='transformer-baseline'")
    seed_everything(train_cfg.seed)
    model = PatchTransformer(tcfg)
    log = TrainLog(train_cfg.seed, config_hash(tcfg, train_cfg, loss_cfg))
    if train_cfg.epochs == 0:
        return model, log
    store = store or CompositeStore()
    fit, val = fit_val_split(manifest, train_cfg.val_fraction, train_cfg.seed)
    fit_samples = _balanced(fit)
    val_samples = list(val.entries)
    (best,) = _supervised_loop(
        model.logits,
        list(model.parameters()),
        [model],
        lambda ep: _batches(fit_samples, train_cfg, _epoch_seed(train_cfg.seed, ep, 3), store, tcfg.input_size),
        lambda: _batches(val_samples, train_cfg, None, store, tcfg.input_size, train=False),
        train_cfg,
        loss_cfg,
        log,
    )
    model.load_state_dict(best)
    model.eval()
    return model, log

"""Source pre-training and one-/two-step fine-tuning on a target support set."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .datasets import AugmentConfig, Dataset, NoiseParams, SplitError, augment, inject_noise, pseudo_split
from .model import ConfigurationError, NsaeModel
from .numerics import SGD, Tensor, backward
from .seeding import rng_for

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


class DivergenceError(ArithmeticError):
    def __init__(self, stage: str, epoch: int, batch: int, value: float):
        super().__init__(f"{stage}: loss diverged at epoch {epoch}, batch {batch} (value {value!r})")
        self.stage, self.epoch, self.batch, self.value = stage, epoch, batch, value


@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True


@dataclass
class Step1Config:
    epochs: int = 30
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 0  # 0: the whole support set in one batch


@dataclass
class Step2Config:
    epochs: int = 200  # one optimizer iteration each
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int | None = None  # None: 4 for K < 50, 16 otherwise
    augment: bool = True
    augment_copies: int = 8

    def batch_size_for(self, k_shot: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if k_shot >= 50 else 4


@dataclass
class TrainConfig:
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune_step1: Step1Config = field(default_factory=Step1Config)
    finetune_step2: Step2Config = field(default_factory=Step2Config)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    two_step: bool = True
    seed: int = 0

    def __post_init__(self):
        for part in (self.pretrain, self.finetune_step1, self.finetune_step2):
            if part.lr <= 0:
                raise ValueError(f"learning rates must be positive, got {part.lr}")
            if not 0 <= part.momentum < 1:
                raise ValueError(f"momentum must lie in [0, 1), got {part.momentum}")
            if part.weight_decay < 0:
                raise ValueError("weight decay must be non-negative")
        if self.pretrain.epochs < 1 or self.finetune_step2.epochs < 1:
            raise ValueError("pre-training and step-2 epochs must be >= 1")
        if self.finetune_step1.epochs < 0:
            raise ValueError("step-1 epochs must be >= 0")
        if self.finetune_step2.augment_copies < 1:
            raise ValueError("augment_copies must be >= 1")


def desk_config(profile: str = "fast32", seed: int = 0) -> TrainConfig:
    """Short schedules for a single CPU core; the dataclass defaults hold the full-scale values."""
    if profile == "fast32":
        return TrainConfig(
            pretrain=PretrainConfig(epochs=60, lr=0.01),
            finetune_step1=Step1Config(epochs=30, lr=0.01),
            finetune_step2=Step2Config(epochs=100, lr=0.01),
            seed=seed,
        )
    return TrainConfig(pretrain=PretrainConfig(epochs=60), seed=seed)


# ---------------------------------------------------------------- helpers
def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton joins the previous batch
    (training-mode batch norm needs two samples)."""
    perm = rng.permutation(n)
    if batch_size <= 0 or batch_size >= n:
        return [perm]
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


class _Guard:
    def __init__(self, stage: str):
        self.stage = stage
        self.initial: float | None = None

    def check(self, value: float, epoch: int, batch: int) -> None:
        if not math.isfinite(value):
            raise DivergenceError(self.stage, epoch, batch, value)
        if self.initial is None:
            self.initial = abs(value)
        elif abs(value) > DIVERGENCE_FACTOR * max(self.initial, 1e-12):
            raise DivergenceError(self.stage, epoch, batch, value)


def _step(loss: Tensor, opt: SGD) -> None:
    opt.zero_grad()
    backward(loss, opt.params)
    opt.step()


def pretrain_params(model: NsaeModel, loss_cfg: L.LossConfig) -> list[Tensor]:
    """Parameters the configured objective trains; the decoder only when it is used."""
    params = model.encoder_params() + model.head_params()
    if loss_cfg.uses_decoder:
        params += model.decoder_params()
    return params


# ---------------------------------------------------------------- pre-training
@dataclass
class PretrainResult:
    model: NsaeModel
    history: list[dict]


def pretrain(model: NsaeModel, source: Dataset, cfg: TrainConfig, loss_cfg: L.LossConfig,
             progress: bool = False, noise_params: NoiseParams = NoiseParams()) -> PretrainResult:
    """SGD over shuffled, augmented mini-batches of the source domain.

    The model is updated in place. ``history`` holds one row per epoch with
    the batch-averaged loss terms.
    """
    classes = source.classes
    if model.num_classes != len(classes):
        raise ConfigurationError(
            f"head has {model.num_classes} outputs but the source domain has {len(classes)} classes")
    labels = np.searchsorted(classes, source.labels)
    pc = cfg.pretrain
    params = pretrain_params(model, loss_cfg)
    opt = SGD(params, pc.lr, pc.momentum, pc.weight_decay)
    rng = rng_for(cfg.seed, "pretrain")
    noise_rng = rng_for(cfg.seed, "pretrain-noise")
    guard = _Guard("pretrain")
    history = []
    for epoch in range(pc.epochs):
        sums: dict[str, float] = {}
        batches = _batches(len(source), pc.batch_size, rng)
        for b, idx in enumerate(batches):
            x = source.images[idx]
            if pc.augment:
                x = np.stack([augment(im, rng, cfg.augmentation) for im in x])
            x_noisy = None
            if loss_cfg.noise_kind is not None:
                x_noisy = np.stack([inject_noise(im, loss_cfg.noise_kind, noise_rng, noise_params) for im in x])
            terms = L.nsae_terms(x, labels[idx], model, loss_cfg, x_noisy)
            value = terms["total"].item()
            guard.check(value, epoch, b)
            _step(terms["total"], opt)
            for k, t in terms.items():
                sums[k] = sums.get(k, 0.0) + t.item()
        row = {"epoch": epoch}
        row.update({k: v / len(batches) for k, v in sums.items()})
        history.append(row)
        if progress:
            log.info("pretrain epoch %d: %s", epoch, {k: round(v, 4) for k, v in row.items()})
    return PretrainResult(model, history)


HISTORY_FIELDS = ("epoch", "total", "cls_orig", "rec", "cls_recon")


def write_history_csv(history: list[dict], path) -> Path:
    """One row per epoch; terms absent from the objective are left empty."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, ""))
                        for k in HISTORY_FIELDS})
    return path


# ---------------------------------------------------------------- fine-tuning
@dataclass
class FinetuneResult:
    model: NsaeModel
    step1_rec: list[float]  # support reconstruction loss before each step-1 epoch, plus the final value
    step2_loss: list[float]


def augment_support(x: np.ndarray, y: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """The support set plus ``augment_copies - 1`` augmented copies of every image."""
    s2 = cfg.finetune_step2
    if not s2.augment or s2.augment_copies == 1:
        return x, y
    extra = [np.stack([augment(im, rng, cfg.augmentation) for im in x]) for _ in range(s2.augment_copies - 1)]
    return np.concatenate([x, *extra]), np.tile(y, s2.augment_copies)


def finetune_reconstruction(model: NsaeModel, support_x: np.ndarray, cfg: TrainConfig, seed: int) -> list[float]:
    """Step 1: minimize the reconstruction loss of the support images (encoder and decoder only)."""
    s1 = cfg.finetune_step1
    opt = SGD(model.encoder_params() + model.decoder_params(), s1.lr, s1.momentum, s1.weight_decay)
    rng = rng_for(seed, "step1")
    target = model.recon_target(support_x)
    guard = _Guard("finetune step 1")
    curve = []
    for epoch in range(s1.epochs):
        total = 0.0
        for b, idx in enumerate(_batches(len(support_x), s1.batch_size, rng)):
            loss = L.rec_loss(target[idx], model.decode(model.encode(support_x[idx])))
            guard.check(loss.item(), epoch, b)
            total += loss.item() * len(idx)
            _step(loss, opt)
        curve.append(total / len(support_x))
    if s1.epochs:
        curve.append(L.rec_loss(target, model.decode(model.encode(support_x))).item())
    return curve


def finetune_classification(model: NsaeModel, support_x: np.ndarray, support_y: np.ndarray,
                            cfg: TrainConfig, loss_cfg: L.LossConfig, seed: int) -> list[float]:
    """Step 2: fine-tune the encoder (and a fresh linear head for CE) on the support set."""
    s2 = cfg.finetune_step2
    n_way = int(support_y.max()) + 1
    k_shot = int(np.bincount(support_y).min())
    rng = rng_for(seed, "step2")
    x, y = augment_support(support_x, support_y, cfg, rng_for(seed, "support-augment"))
    params = model.encoder_params()
    if loss_cfg.finetune_cls == "CE":
        model.reset_head(n_way, rng_for(seed, "head"))
        params = params + model.head_params()
    elif k_shot < 2:
        raise SplitError(f"distance-based fine-tuning needs K >= 2, got K={k_shot}")
    opt = SGD(params, s2.lr, s2.momentum, s2.weight_decay)
    bs = s2.batch_size_for(k_shot)
    guard = _Guard("finetune step 2")
    losses = []
    for it in range(s2.epochs):
        if loss_cfg.finetune_cls == "CE":
            idx = rng.choice(len(x), size=min(max(bs, 2), len(x)), replace=False)
            loss = L.ce_loss(model.classify(model.encode(x[idx])), y[idx])
        else:
            (px, py), (qx, qy) = pseudo_split(x, y, rng)
            feats = model.encode(np.concatenate([px, qx]))
            ps, qs = feats[:len(px)], feats[len(px):]
            loss = L.distance_loss(qs, qy, L.prototypes(ps, py, n_way))
        guard.check(loss.item(), it, 0)
        losses.append(loss.item())
        _step(loss, opt)
    return losses


def finetune_one_step(model: NsaeModel, support_x, support_y, cfg: TrainConfig,
                      loss_cfg: L.LossConfig, seed: int) -> FinetuneResult:
    """Classification fine-tuning only. Updates ``model`` in place."""
    losses = finetune_classification(model, support_x, support_y, cfg, loss_cfg, seed)
    return FinetuneResult(model, [], losses)


def finetune_two_step(model: NsaeModel, support_x, support_y, cfg: TrainConfig,
                      loss_cfg: L.LossConfig, seed: int) -> FinetuneResult:
    """Reconstruction of the support images, then classification fine-tuning.
    Updates ``model`` in place."""
    curve = finetune_reconstruction(model, support_x, cfg, seed)
    losses = finetune_classification(model, support_x, support_y, cfg, loss_cfg, seed)
    return FinetuneResult(model, curve, losses)


def finetune(model: NsaeModel, support_x, support_y, cfg: TrainConfig, loss_cfg: L.LossConfig,
             seed: int, two_step: bool | None = None) -> FinetuneResult:
    two = cfg.two_step if two_step is None else two_step
    fn = finetune_two_step if two else finetune_one_step
    return fn(model, support_x, support_y, cfg, loss_cfg, seed)

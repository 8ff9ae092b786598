"""Objectives: reconstruction, cross-entropy, batch spectral regularization,
the supervised-autoencoder losses and prototype (cosine-distance) losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

VARIANTS = ("baseline", "SAE", "SAE*", "NSAE")
PRETRAIN_CLS = ("CE", "BSR")
FINETUNE_CLS = ("CE", "D")
NOISE_SETTINGS = ("a", "b")


class LabelError(ValueError):
    pass


class PrototypeError(ValueError):
    pass


class DegenerateDirectionError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_rec: float = 1.0
    lambda_recon_cls: float = 1.0
    lambda_bsr: float = 0.001
    pretrain_cls: str = "CE"
    finetune_cls: str = "CE"
    variant: str = "NSAE"
    # handcrafted-noise pre-training: None, or (kind, setting) with setting "a"
    # (encoder only, clean + noisy images classified) or "b" (adds the decoder
    # and reconstruction loss; reconstructions are not classified)
    noise_kind: str | None = None
    noise_setting: str | None = None

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_recon_cls", "lambda_bsr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pretrain_cls not in PRETRAIN_CLS:
            raise ValueError(f"pretrain_cls must be one of {PRETRAIN_CLS}")
        if self.finetune_cls not in FINETUNE_CLS:
            raise ValueError(f"finetune_cls must be one of {FINETUNE_CLS}")
        if (self.noise_kind is None) != (self.noise_setting is None):
            raise ValueError("noise_kind and noise_setting go together")
        if self.noise_setting is not None and self.noise_setting not in NOISE_SETTINGS:
            raise ValueError(f"noise_setting must be one of {NOISE_SETTINGS}")

    @property
    def combo(self) -> str:
        return f"{self.pretrain_cls}+{self.finetune_cls}"

    @property
    def uses_decoder(self) -> bool:
        if self.noise_setting is not None:
            return self.noise_setting == "b"
        return self.variant != "baseline"


# ---------------------------------------------------------------- basic losses
def rec_loss(x_target, x_hat: Tensor) -> Tensor:
    """Batch mean of the per-sample Euclidean norm of the flattened difference."""
    target = x_target if isinstance(x_target, Tensor) else Tensor(np.asarray(x_target, dtype=x_hat.dtype))
    if target.shape != x_hat.shape:
        raise DimensionError(f"reconstruction {x_hat.shape} vs target {target.shape}")
    diff = (x_hat - target).reshape(x_hat.shape[0], -1)
    return nx.row_norm(diff).mean()


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels


def ce_loss(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    return -nx.pick(nx.log_softmax(logits), labels).mean()


def bsr_penalty(features: Tensor) -> Tensor:
    """Sum of squared singular values of the batch feature matrix, computed
    as its squared Frobenius norm (the two are identical)."""
    return (features * features).sum()


def bsr_loss(logits: Tensor, labels, features: Tensor, lambda_bsr: float) -> Tensor:
    return ce_loss(logits, labels) + lambda_bsr * bsr_penalty(features)


def cls_loss(kind: str, logits: Tensor, labels, features: Tensor, cfg: LossConfig) -> Tensor:
    if kind == "CE":
        return ce_loss(logits, labels)
    if kind == "BSR":
        return bsr_loss(logits, labels, features, cfg.lambda_bsr)
    raise ValueError(f"unknown classification loss {kind!r}")


# ---------------------------------------------------------------- model losses
def sae_loss(x, y, model, cfg: LossConfig) -> Tensor:
    feat = model.encode(x)
    recon = model.decode(feat)
    cls = cls_loss(cfg.pretrain_cls, model.classify(feat), y, feat, cfg)
    return cls + cfg.lambda_rec * rec_loss(model.recon_target(x), recon)


def nsae_terms(x, y, model, cfg: LossConfig, x_noisy=None) -> dict[str, Tensor]:
    """Loss terms of one pre-training batch for the configured variant.

    Returns ``total`` plus the unweighted ``cls_orig``, ``rec`` and
    ``cls_recon`` terms (absent terms are omitted).
    """
    kind = cfg.pretrain_cls
    terms: dict[str, Tensor] = {}
    feat = model.encode(x)
    terms["cls_orig"] = cls_loss(kind, model.classify(feat), y, feat, cfg)

    if cfg.noise_setting is not None:
        if x_noisy is None:
            raise ValueError("handcrafted-noise pre-training needs a noisy batch")
        nfeat = model.encode(x_noisy)
        terms["cls_recon"] = cls_loss(kind, model.classify(nfeat), y, nfeat, cfg)
        total = terms["cls_orig"] + cfg.lambda_recon_cls * terms["cls_recon"]
        if cfg.noise_setting == "b":
            terms["rec"] = rec_loss(model.recon_target(x), model.decode(feat))
            total = total + cfg.lambda_rec * terms["rec"]
        terms["total"] = total
        return terms

    if cfg.variant == "baseline":
        terms["total"] = terms["cls_orig"]
        return terms

    recon = model.decode(feat)
    terms["rec"] = rec_loss(model.recon_target(x), recon)
    if cfg.variant == "NSAE":
        rfeat = model.encode(recon)
        terms["cls_recon"] = cls_loss(kind, model.classify(rfeat), y, rfeat, cfg)
        cls_weight = 1.0
    elif cfg.variant == "SAE*":
        cls_weight = 2.0
    else:
        cls_weight = 1.0
    total = terms["cls_orig"] * cls_weight if cls_weight != 1.0 else terms["cls_orig"]
    total = total + cfg.lambda_rec * terms["rec"]
    if "cls_recon" in terms:
        total = total + cfg.lambda_recon_cls * terms["cls_recon"]
    terms["total"] = total
    return terms


def nsae_loss(x, y, model, cfg: LossConfig, x_noisy=None) -> Tensor:
    return nsae_terms(x, y, model, cfg, x_noisy)["total"]


# ---------------------------------------------------------------- prototypes
def prototypes(features: Tensor, labels, n_classes: int) -> Tensor:
    """Per-class mean of feature rows, as an (n_classes, F) tensor."""
    labels = _check_labels(labels, n_classes)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise PrototypeError(f"classes without features: {np.flatnonzero(counts == 0).tolist()}")
    avg = np.zeros((n_classes, len(labels)), dtype=features.dtype)
    avg[labels, np.arange(len(labels))] = 1.0
    avg /= counts[:, None]
    return nx.matmul(Tensor(avg), features)


def cosine_distance(queries: Tensor, protos: Tensor) -> Tensor:
    """Pairwise 1 - cos(q, c), shape (n_queries, n_prototypes)."""
    qn, pn = nx.row_norm(queries), nx.row_norm(protos)
    if np.any(qn.data == 0):
        raise DegenerateDirectionError(f"zero-norm query rows: {np.flatnonzero(qn.data == 0).tolist()}")
    if np.any(pn.data == 0):
        raise DegenerateDirectionError(f"zero-norm prototypes: {np.flatnonzero(pn.data == 0).tolist()}")
    qu = queries / qn.reshape(-1, 1)
    pu = protos / pn.reshape(-1, 1)
    return 1.0 - nx.matmul(qu, nx.transpose(pu))


def distance_logits(queries: Tensor, protos: Tensor) -> Tensor:
    return -cosine_distance(queries, protos)


def distance_probs(queries: Tensor, protos: Tensor) -> Tensor:
    return nx.exp(nx.log_softmax(distance_logits(queries, protos)))


def distance_loss(query_features: Tensor, query_labels, protos: Tensor) -> Tensor:
    """Negative mean log-probability of the true class under the distance softmax."""
    return ce_loss(distance_logits(query_features, protos), query_labels)

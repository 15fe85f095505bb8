"""Supervised contrastive losses, the Fourier embedding transform and the
error-sensitive count loss.

All functions are pure and differentiable through torch autograd; call
``.backward()`` on the returned loss (or use :func:`value_and_grad`) to get
gradients with respect to the embeddings or logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn.functional as F


class EmptyPositivesWarning(UserWarning):
    """Raised (as a warning) when no anchor in a batch has a positive."""


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    w0: float = 1.0
    w1: float = 1.0
    normalize_embeddings: bool = True
    epsilon: float = 1e-20
    count_scale: float = 1.0 / 70.0
    # "concat": [w0*z, w1*|rfft(z)|]; "sum": w0*z + w1*|fft(z)|
    fourier_mode: str = "concat"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.count_scale > 0:
            raise ValueError(f"count_scale must be > 0, got {self.count_scale}")
        if self.w0 == 0 and self.w1 == 0:
            raise ValueError("w0 and w1 cannot both be zero")
        if self.fourier_mode not in ("concat", "sum"):
            raise ValueError(f"unknown fourier_mode {self.fourier_mode!r}")


@dataclass
class EmbeddingBatch:
    """Projection-head outputs ``embeddings`` (B x D) with integer ``labels`` (B,)."""

    embeddings: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be B x D, got shape {tuple(self.embeddings.shape)}")
        self.labels = torch.as_tensor(self.labels, dtype=torch.long, device=self.embeddings.device)
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ValueError("labels must be a vector with one entry per embedding row")
        if self.embeddings.shape[0] < 2:
            raise ValueError("a contrastive batch needs at least 2 samples")

    def check(self, num_classes: Optional[int] = None) -> None:
        if not torch.isfinite(self.embeddings).all():
            raise ValueError("embeddings contain non-finite values")
        if num_classes is not None:
            if self.labels.min() < 0 or self.labels.max() >= num_classes:
                raise ValueError(f"labels outside class range 0..{num_classes - 1}")


@dataclass
class SupConResult:
    loss: torch.Tensor
    per_anchor: torch.Tensor
    # anchors whose positive set was empty (contributed zero)
    n_skipped: int
    empty_positives: bool


@dataclass
class CountPrediction:
    """Class probabilities (B x C) with argmax counts and optional truths."""

    probabilities: torch.Tensor
    true_count: Optional[torch.Tensor] = None

    @property
    def predicted_count(self) -> torch.Tensor:
        return predict_counts(self.probabilities)


def predict_counts(probabilities: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties resolve to the lowest count."""
    p = probabilities.detach()
    best = p.max(dim=1, keepdim=True).values
    idx = torch.arange(p.shape[1], device=p.device).expand_as(p)
    # first index attaining the max, explicitly rather than relying on argmax
    masked = torch.where(p == best, idx, torch.full_like(idx, p.shape[1]))
    return masked.min(dim=1).values


def supcon_loss(
    batch: EmbeddingBatch,
    cfg: LossConfig = LossConfig(),
    anchor_class: Optional[int] = None,
    reduction: str = "sum",
) -> SupConResult:
    """Supervised contrastive loss summed (or averaged) over anchors.

    For anchor ``i`` the term is ``-mean_{p in P(i)} log softmax_{a != i}(z_i . z_a / tau)[p]``
    where ``P(i)`` holds the other samples sharing ``i``'s label. Anchors with no
    positive contribute zero and are counted in ``n_skipped``.

    ``anchor_class`` restricts the anchors to one label (the rotating-positive
    mode); all other samples still appear in every denominator. With
    ``reduction="mean"`` the loss is divided by the number of contributing anchors.
    """
    batch.check()
    z = batch.embeddings
    if cfg.normalize_embeddings:
        z = F.normalize(z, dim=1)
    return _supcon_from_normalized(z, batch.labels, cfg.temperature, anchor_class, reduction)


def _supcon_from_normalized(z, labels, temperature, anchor_class, reduction) -> SupConResult:
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = z @ z.T / temperature
    log_denom = torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = logits - log_denom

    pos = (labels[:, None] == labels[None, :]) & ~eye
    anchors = torch.ones(n, dtype=torch.bool, device=z.device)
    if anchor_class is not None:
        anchors = labels == anchor_class
    pos = pos & anchors[:, None]
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0

    pos_f = pos.to(log_prob.dtype)
    per_anchor = -(pos_f * log_prob).sum(dim=1) / n_pos.clamp(min=1).to(log_prob.dtype)
    n_contrib = int(has_pos.sum())
    n_skipped = int(anchors.sum()) - n_contrib
    empty = n_contrib == 0
    if empty:
        warnings.warn("no anchor in the batch has a positive; loss is 0", EmptyPositivesWarning, stacklevel=3)

    if reduction == "sum":
        loss = per_anchor.sum()
    elif reduction == "mean":
        loss = per_anchor.sum() / max(n_contrib, 1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return SupConResult(loss=loss, per_anchor=per_anchor, n_skipped=n_skipped, empty_positives=empty)


def fourier_embed(z: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Weighted combination of ``z`` and the magnitude spectrum of its FFT over features.

    In ``concat`` mode the output has ``D + D//2 + 1`` columns; in ``sum`` mode
    ``D`` columns. Rows are L2-normalized afterwards when the config asks for it.
    """
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError("fourier_embed needs a B x D matrix with D >= 2")
    if not torch.isfinite(z).all():
        raise ValueError("embeddings contain non-finite values")
    if cfg.fourier_mode == "concat":
        spectrum = torch.fft.rfft(z, dim=1).abs()
        out = torch.cat([cfg.w0 * z, cfg.w1 * spectrum], dim=1)
    else:
        out = cfg.w0 * z + cfg.w1 * torch.fft.fft(z, dim=1).abs()
    if cfg.normalize_embeddings:
        out = F.normalize(out, dim=1)
    return out


def fourier_supcon_loss(
    batch: EmbeddingBatch,
    cfg: LossConfig = LossConfig(),
    anchor_class: Optional[int] = None,
    reduction: str = "sum",
) -> SupConResult:
    """:func:`supcon_loss` evaluated on :func:`fourier_embed` of the embeddings."""
    batch.check()
    z = fourier_embed(batch.embeddings, cfg)
    return supcon_loss(EmbeddingBatch(z, batch.labels), cfg, anchor_class, reduction)


def error_sensitive_terms(pred: CountPrediction, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-sample ``[count_scale*(T - P) - 1] * ln(p + epsilon)``.

    ``P`` is the argmax count and ``p`` its probability. The sign of ``T - P``
    is kept, so over-counting costs more than under-counting.
    """
    probs = pred.probabilities
    if pred.true_count is None:
        raise ValueError("error-sensitive loss needs true counts")
    if probs.ndim != 2:
        raise ValueError("probabilities must be B x C")
    if not torch.isfinite(probs).all() or (probs < 0).any() or (probs > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    truth = torch.as_tensor(pred.true_count, device=probs.device)
    predicted = predict_counts(probs)
    p_k = probs.gather(1, predicted[:, None]).squeeze(1)
    weight = cfg.count_scale * (truth - predicted).to(probs.dtype) - 1.0
    return weight * torch.log(p_k + cfg.epsilon)


def error_sensitive_loss(pred: CountPrediction, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Batch mean of :func:`error_sensitive_terms`."""
    return error_sensitive_terms(pred, cfg).mean()


def error_sensitive_loss_from_logits(logits: torch.Tensor, true_count, cfg: LossConfig = LossConfig()):
    return error_sensitive_loss(CountPrediction(torch.softmax(logits, dim=1), true_count), cfg)


def value_and_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor):
    """Return ``(fn(x), d fn / d x)`` for a scalar-valued ``fn``."""
    x = x.detach().clone().requires_grad_(True)
    value = fn(x)
    (grad,) = torch.autograd.grad(value, x)
    return value.detach(), grad


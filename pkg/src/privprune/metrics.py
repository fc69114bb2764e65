"""Evaluation metrics: PSNR, SSIM, MSE, attack accuracy, re-id rank-1.

All image metrics are pure per-image functions reported with their batch
mean. PSNR of an identical pair is capped at the 100 dB sentinel so report
fields stay finite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F

from .errors import ValidationError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
REPORT_SCHEMA_VERSION = 1


@dataclass
class BatchMetric:
    per_image: torch.Tensor
    mean: float

    def __float__(self):
        return self.mean


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() < 2:
        raise ValidationError("expected batched images (N, ...)")


def mse_l2(a: torch.Tensor, b: torch.Tensor) -> BatchMetric:
    """Per-image mean squared error and its batch mean."""
    _check_pair(a, b)
    per = (a - b).flatten(1).pow(2).mean(dim=1)
    return BatchMetric(per, float(per.mean()))


def psnr(a: torch.Tensor, b: torch.Tensor, max_val: float = 1.0) -> BatchMetric:
    """10*log10(max_val^2 / MSE) per image, capped at 100 dB for MSE -> 0."""
    if max_val <= 0:
        raise ValidationError("max_val must be > 0")
    mse = mse_l2(a, b).per_image.to(torch.float64)
    vals = torch.full_like(mse, PSNR_CAP_DB)
    nonzero = mse > 0
    vals[nonzero] = torch.clamp(
        10.0 * torch.log10(max_val ** 2 / mse[nonzero]), max=PSNR_CAP_DB)
    return BatchMetric(vals, float(vals.mean()))


def _gaussian_window(window_size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(window_size, dtype=torch.float64) - (window_size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11,
         max_val: float = 1.0, sigma: float = 1.5) -> BatchMetric:
    """Windowed structural similarity, Gaussian-weighted, channel-averaged.

    Stabilizers C1=(0.01*max_val)^2, C2=(0.03*max_val)^2; statistics are
    Gaussian-weighted population moments over valid windows.
    """
    _check_pair(a, b)
    if window_size % 2 == 0 or window_size < 3:
        raise ValidationError("window_size must be odd and >= 3")
    if a.dim() != 4:
        raise ValidationError("expected (N, C, H, W) images")
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ValidationError(
            f"image {tuple(a.shape[-2:])} smaller than window {window_size}")

    n, c = a.shape[:2]
    kernel = _gaussian_window(window_size, sigma).expand(c, 1, window_size, window_size)
    a64, b64 = a.to(torch.float64), b.to(torch.float64)

    def filt(t):
        return F.conv2d(t, kernel, groups=c)

    mu_a, mu_b = filt(a64), filt(b64)
    var_a = filt(a64 * a64) - mu_a * mu_a
    var_b = filt(b64 * b64) - mu_b * mu_b
    cov = filt(a64 * b64) - mu_a * mu_b

    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
               ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    per = ssim_map.flatten(1).mean(dim=1)
    return BatchMetric(per, float(per.mean()))


def attack_accuracy(recons, labels, classifier) -> float:
    """Fraction of reconstructions a reference classifier assigns to their
    source's target label (the sample's true class at desk scale)."""
    images = recons.images if hasattr(recons, "images") else recons
    labels = torch.as_tensor(labels)
    if images.shape[0] != labels.shape[0]:
        raise ValidationError("reconstruction/label count mismatch")
    forward = classifier.forward_full if hasattr(classifier, "forward_full") else classifier
    was_training = getattr(classifier, "training", False)
    if hasattr(classifier, "eval"):
        classifier.eval()
    try:
        with torch.no_grad():
            logits = forward(images)
    finally:
        if hasattr(classifier, "train"):
            classifier.train(was_training)
    if logits.dim() != 2:
        raise ValidationError("classifier must return (N, num_classes) logits")
    if int(labels.max()) >= logits.shape[1]:
        raise ValidationError(
            f"labels reach {int(labels.max())} but classifier has {logits.shape[1]} classes")
    return float((logits.argmax(dim=1) == labels).double().mean())


def reid_rank1(query_embeddings: torch.Tensor, gallery_embeddings: torch.Tensor,
               query_ids, gallery_ids=None) -> float:
    """Rank-1 accuracy under cosine similarity, excluding self-matches.

    When `gallery_ids` is omitted the gallery is taken to be the query set
    itself and index-equal pairs are excluded. Zero-norm embeddings are
    scored as misses and flagged.
    """
    if gallery_embeddings.numel() == 0 or gallery_embeddings.shape[0] == 0:
        raise ValidationError("gallery must be nonempty")
    query_ids = torch.as_tensor(query_ids)
    same_set = gallery_ids is None
    gallery_ids = query_ids if same_set else torch.as_tensor(gallery_ids)
    if not torch.isfinite(query_embeddings).all() or not torch.isfinite(gallery_embeddings).all():
        raise ValidationError("embeddings must be finite")

    q_norm = query_embeddings.norm(dim=1)
    g_norm = gallery_embeddings.norm(dim=1)
    zero_q = q_norm == 0
    if bool(zero_q.any()) or bool((g_norm == 0).any()):
        logger.warning("rank-1: %d query / %d gallery zero-norm embeddings scored as misses",
                       int(zero_q.sum()), int((g_norm == 0).sum()))
    q = query_embeddings / q_norm.clamp(min=1e-12).unsqueeze(1)
    g = gallery_embeddings / g_norm.clamp(min=1e-12).unsqueeze(1)
    sim = q @ g.T
    if same_set:
        sim.fill_diagonal_(-float("inf"))
    top1 = sim.argmax(dim=1)
    hits = (gallery_ids[top1] == query_ids) & ~zero_q
    return float(hits.double().mean())


DROP_METRICS = ("psnr", "ssim", "mse", "attack_accuracy", "prediction_accuracy")


@dataclass
class AttackReport:
    """Privacy/utility bundle for one (defense, attack) pair."""

    psnr_mean: float
    ssim_mean: float
    mse_mean: float
    attack_accuracy: float
    prediction_accuracy: float
    drops_vs_baseline: dict | None = None
    metadata: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.ssim_mean <= 1.0 + 1e-9:
            raise ValidationError(f"ssim_mean {self.ssim_mean} outside [-1, 1]")
        for name in ("attack_accuracy", "prediction_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} {v} outside [0, 1]")

    def _metric(self, name: str) -> float:
        return {
            "psnr": self.psnr_mean, "ssim": self.ssim_mean, "mse": self.mse_mean,
            "attack_accuracy": self.attack_accuracy,
            "prediction_accuracy": self.prediction_accuracy,
        }[name]

    def with_drops(self, baseline: "AttackReport") -> "AttackReport":
        """Relative drops (baseline - this) / baseline, per the percentage-drop
        convention; None where the baseline value is zero."""
        drops = {}
        for name in DROP_METRICS:
            base = baseline._metric(name)
            drops[f"{name}_drop"] = None if base == 0 else (base - self._metric(name)) / base
        return AttackReport(self.psnr_mean, self.ssim_mean, self.mse_mean,
                            self.attack_accuracy, self.prediction_accuracy,
                            drops_vs_baseline=drops, metadata=dict(self.metadata))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "AttackReport":
        return cls.from_dict(json.loads(s))

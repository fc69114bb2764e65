"""Comparison defenses: noise, dropout of the transmitted intermediate, and
random skip connections. These perturb the wire (or the evaluation graph) at
inference time; both the cloud side and any attacker observe the perturbed
intermediate."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, ValidationError
from .models import ResidualBlock, SplitModel

DEFENSE_KINDS = ("none", "noise", "dropout", "skip", "patrol", "patrol-no-prune")


@dataclass
class DefenseSpec:
    kind: str = "none"
    strength: float = 0.0  # sigma (noise), drop ratio p (dropout), skip probability p
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigurationError(f"unknown defense kind {self.kind!r}")
        if self.kind == "noise" and self.strength < 0:
            raise ValidationError("noise sigma must be >= 0")
        if self.kind in ("dropout", "skip") and not 0.0 <= self.strength <= 1.0:
            raise ValidationError("drop/skip probability must be in [0, 1]")

    @property
    def trains_model(self) -> bool:
        return self.kind in ("patrol", "patrol-no-prune")


def apply_noise(intermediate: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    """Add Gaussian noise with std sigma * (batch activation std); sigma=0 is identity."""
    if sigma < 0:
        raise ValidationError("sigma must be >= 0")
    if sigma == 0:
        return intermediate
    g = torch.Generator().manual_seed(seed)
    scale = sigma * float(intermediate.std())
    return intermediate + scale * torch.randn(intermediate.shape, generator=g,
                                              dtype=intermediate.dtype)


def apply_dropout(intermediate: torch.Tensor, p: float, seed: int = 0) -> torch.Tensor:
    """Zero each element independently with probability p; no 1/(1-p) rescaling
    (inference-time perturbation, not training dropout)."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError("p must be in [0, 1]")
    if p == 0:
        return intermediate
    g = torch.Generator().manual_seed(seed)
    keep = (torch.rand(intermediate.shape, generator=g) >= p).to(intermediate.dtype)
    return intermediate * keep


class SkipDefenseView(nn.Module):
    """Evaluation view of a split model where each shape-preserving conv layer
    is independently bypassed with probability p per forward pass."""

    def __init__(self, model: SplitModel, p: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise ValidationError("p must be in [0, 1]")
        self.model = copy.deepcopy(model)
        self.p = p
        self._generator = torch.Generator().manual_seed(seed)
        eligible = self._eligible_convs(self.model)
        if not eligible:
            raise ConfigurationError("model has no shape-preserving conv layers to skip")
        for conv in eligible:
            conv.register_forward_hook(self._maybe_skip)

    @staticmethod
    def _eligible_convs(model: SplitModel):
        convs = []
        for block in model.all_blocks:
            if not isinstance(block, ResidualBlock) or block.branch_removed:
                continue
            for conv in (block.conv1, block.conv2):
                if conv.in_channels == conv.out_channels and conv.stride == (1, 1):
                    convs.append(conv)
        return convs

    def _maybe_skip(self, module, inputs, output):
        if self.p == 0:
            return output
        if torch.rand((), generator=self._generator) < self.p:
            return inputs[0]
        return output

    def reset_rng(self, seed: int):
        self._generator = torch.Generator().manual_seed(seed)

    # mirror the SplitModel evaluation surface
    @property
    def arch(self):
        return self.model.arch

    @property
    def task_mode(self):
        return self.model.task_mode

    @property
    def split_index(self):
        return self.model.split_index

    def forward_full(self, x, masks=None):
        return self.model.forward_full(x, masks=masks)

    def forward_edge(self, x, masks=None):
        return self.model.forward_edge(x, masks=masks)

    def trunk_forward(self, x, masks=None):
        return self.model.trunk_forward(x, masks=masks)

    def forward(self, x, masks=None):
        return self.forward_full(x, masks=masks)


def apply_skip(model: SplitModel, p: float, seed: int = 0) -> SkipDefenseView:
    return SkipDefenseView(model, p, seed=seed)


def perturb_intermediate(intermediate: torch.Tensor, spec: DefenseSpec,
                         seed: int) -> torch.Tensor:
    """Wire perturbation for the given defense (identity for graph/training
    defenses)."""
    if spec.kind == "noise":
        return apply_noise(intermediate, spec.strength, seed=seed)
    if spec.kind == "dropout":
        return apply_dropout(intermediate, spec.strength, seed=seed)
    return intermediate


def defended_predictions(model, masks, spec: DefenseSpec, x: torch.Tensor,
                         seed: int = 0) -> torch.Tensor:
    """Full inference through the defended pipeline: edge -> (perturb) -> cloud."""
    target = apply_skip(model, spec.strength, seed=seed) if spec.kind == "skip" else model
    inner = target.model if isinstance(target, SkipDefenseView) else target
    was_training = inner.training
    inner.eval()
    try:
        with torch.no_grad():
            intermediate = target.forward_edge(x, masks=masks)
            intermediate = perturb_intermediate(intermediate, spec, seed=seed)
            preds = inner.forward_cloud(intermediate)
    finally:
        inner.train(was_training)
    return preds

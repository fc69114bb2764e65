"""Soft-mask training (FISTA) and physical pruning surgery.

The mask objective is   pred_loss + lambda1*||m||_1 + lambda2*||m||_2
with ||m||_2 the Euclidean norm. FISTA splits it as smooth part
(pred_loss + lambda2 term) plus the l1 term handled by the shrinkage prox.
Mask values live in float64 so the optimizer math is exact at test
tolerances; they are cast to the activation dtype when applied.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import NumericError, SurgeryError, ValidationError
from .models import GRANULARITIES, ResidualBlock, SplitModel, StructureRef

MASK_INITS = ("normal", "ones")


@dataclass
class PruneConfig:
    lambda1: float = 1.0
    lambda2: float = 10.0
    tau: float = 0.0
    mask_step: float = 1e-6
    keep_min: int = 1
    nonneg: bool = False   # project masks to [0, inf) after the prox step
    restart: bool = False  # adaptive (function) restart of the FISTA momentum

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda1 and lambda2 must be >= 0")
        if self.mask_step <= 0:
            raise ValidationError("mask_step must be > 0")
        if self.keep_min < 1:
            raise ValidationError("keep_min must be >= 1")


class _MaskView:
    """Mask container with substituted values (same structure metadata)."""

    def __init__(self, values, granularity, slices):
        self.values = values
        self.granularity = granularity
        self._slices = slices

    def values_for_block(self, block_index):
        start, end = self._slices.get(block_index, (0, 0))
        if end == start:
            return None
        return self.values[start:end]


class SoftMaskSet:
    """One trainable scalar per maskable structure, plus FISTA state.

    `values` is the current iterate, `aux` the extrapolation point the next
    smooth gradient must be evaluated at, `t` the momentum scalar (>= 1).
    """

    def __init__(self, values: torch.Tensor, granularity: str,
                 structures: list[StructureRef], aux: torch.Tensor | None = None,
                 t: float = 1.0):
        if granularity not in GRANULARITIES:
            raise ValidationError(f"unknown mask granularity {granularity!r}")
        if t < 1.0:
            raise ValidationError("momentum scalar t must be >= 1")
        self.values = values.detach().to(torch.float64)
        self.aux = self.values.clone() if aux is None else aux.detach().to(torch.float64)
        self.t = float(t)
        self.granularity = granularity
        self.structures = list(structures)
        if len(self.structures) != self.values.numel():
            raise ValidationError(
                f"{self.values.numel()} mask values for {len(self.structures)} structures")
        self._slices = self._build_slices(self.structures)

    @staticmethod
    def _build_slices(structures):
        slices, start = {}, 0
        current, count = None, 0
        for i, ref in enumerate(structures):
            if ref.block != current:
                if current is not None:
                    slices[current] = (start, start + count)
                    start += count
                current, count = ref.block, 0
            count += 1
        if current is not None:
            slices[current] = (start, start + count)
        return slices

    @classmethod
    def initialize(cls, model: SplitModel, granularity: str, seed: int = 0,
                   init: str = "normal") -> "SoftMaskSet":
        if init not in MASK_INITS:
            raise ValidationError(f"unknown mask init {init!r}")
        structures = model.maskable_structures(granularity)
        n = len(structures)
        if init == "ones":
            values = torch.ones(n, dtype=torch.float64)
        else:
            g = torch.Generator().manual_seed(seed)
            values = torch.randn(n, generator=g, dtype=torch.float64)
        return cls(values, granularity, structures)

    def values_for_block(self, block_index: int):
        start, end = self._slices.get(block_index, (0, 0))
        if end == start:
            return None
        return self.values[start:end]

    def view_at(self, values: torch.Tensor) -> _MaskView:
        """A mask view with the same layout but substituted values (e.g. the
        auxiliary point, as an autograd leaf)."""
        if values.numel() != self.values.numel():
            raise ValidationError("substituted values have wrong cardinality")
        return _MaskView(values, self.granularity, self._slices)

    def replace(self, values, aux, t) -> "SoftMaskSet":
        return SoftMaskSet(values, self.granularity, self.structures, aux=aux, t=t)

    def restarted(self) -> "SoftMaskSet":
        """Drop the momentum: auxiliary point back to the iterate, t back to 1."""
        return SoftMaskSet(self.values, self.granularity, self.structures,
                           aux=self.values.clone(), t=1.0)

    def state_dict(self) -> dict:
        return dict(values=self.values.clone(), aux=self.aux.clone(), t=self.t,
                    granularity=self.granularity,
                    structures=[s.to_dict() for s in self.structures])

    @classmethod
    def from_state_dict(cls, state: dict) -> "SoftMaskSet":
        structures = [StructureRef(**d) for d in state["structures"]]
        return cls(state["values"], state["granularity"], structures,
                   aux=state["aux"], t=state["t"])

    def __len__(self):
        return self.values.numel()


def soft_threshold(v, t):
    """l1 proximal operator: sign(v) * max(|v| - t, 0). Accepts scalars or tensors."""
    if isinstance(t, torch.Tensor):
        if (t < 0).any():
            raise ValidationError("soft_threshold requires t >= 0")
    elif t < 0:
        raise ValidationError("soft_threshold requires t >= 0")
    if isinstance(v, torch.Tensor):
        return torch.sign(v) * torch.clamp(torch.abs(v) - t, min=0)
    return math.copysign(1.0, v) * max(abs(v) - t, 0.0) if v != 0 else 0.0


def fista_step(masks: SoftMaskSet, smooth_grad: torch.Tensor,
               config: PruneConfig) -> SoftMaskSet:
    """One accelerated proximal step.

    `smooth_grad` must be the gradient of the smooth part (prediction loss +
    lambda2 Euclidean-norm term) evaluated at `masks.aux`; the l1 term is
    applied through the shrinkage prox with threshold mask_step * lambda1.
    """
    grad = smooth_grad.detach().to(torch.float64)
    if grad.numel() != len(masks):
        raise ValidationError(
            f"gradient cardinality {grad.numel()} != mask cardinality {len(masks)}")
    bad = torch.nonzero(~torch.isfinite(grad))
    if bad.numel():
        raise NumericError(f"non-finite mask gradient at index {int(bad[0])}")
    x_prev = masks.values
    x_new = soft_threshold(masks.aux - config.mask_step * grad,
                           config.mask_step * config.lambda1)
    if config.nonneg:
        x_new = x_new.clamp(min=0)
    t_new = (1.0 + math.sqrt(1.0 + 4.0 * masks.t ** 2)) / 2.0
    aux_new = x_new + ((masks.t - 1.0) / t_new) * (x_new - x_prev)
    return masks.replace(x_new, aux_new, t_new)


def smooth_norm_gradient(values: torch.Tensor, lambda2: float) -> torch.Tensor:
    """Gradient of lambda2*||m||_2 (Euclidean); defined as 0 at m = 0."""
    norm = torch.linalg.vector_norm(values)
    if norm == 0:
        return torch.zeros_like(values)
    return lambda2 * values / norm


def mask_objective(pred_loss: float, masks: SoftMaskSet, config: PruneConfig) -> float:
    v = masks.values
    return float(pred_loss
                 + config.lambda1 * v.abs().sum()
                 + config.lambda2 * torch.linalg.vector_norm(v))


@dataclass(frozen=True)
class SparsityReport:
    param_ratio: float      # parameter-weighted fraction with mask <= tau
    structure_ratio: float  # plain structure-count fraction

    def to_dict(self):
        return dict(param_ratio=self.param_ratio, structure_ratio=self.structure_ratio)


def sparsity(masks: SoftMaskSet, tau: float) -> SparsityReport:
    """Fraction of structures (and of their parameters) at or below tau."""
    n = len(masks)
    if n == 0:
        return SparsityReport(0.0, 0.0)
    below = masks.values <= tau
    counts = torch.tensor([s.param_count for s in masks.structures], dtype=torch.float64)
    total = float(counts.sum())
    param_ratio = float(counts[below].sum() / total) if total > 0 else 0.0
    return SparsityReport(param_ratio, float(below.sum()) / n)


def _check_cardinality(model: SplitModel, masks: SoftMaskSet):
    refs = model.maskable_structures(masks.granularity)
    if len(refs) != len(masks):
        raise ValidationError(
            f"model has {len(refs)} maskable structures, mask set has {len(masks)}")


def _prune_channels(block: ResidualBlock, values: torch.Tensor, config: PruneConfig):
    """Remove sub-tau hidden channels, fold survivors' masks into bn1 affine."""
    keep = values > config.tau
    if int(keep.sum()) < config.keep_min:
        top = torch.argsort(values, descending=True)[:config.keep_min]
        keep = torch.zeros_like(keep)
        keep[top] = True
    kept_idx = torch.nonzero(keep).flatten()
    removed_idx = torch.nonzero(~keep).flatten().tolist()

    m = values[kept_idx].to(block.conv1.weight.dtype)
    old_conv1, old_bn1, old_conv2 = block.conv1, block.bn1, block.conv2
    new_hidden = len(kept_idx)

    conv1 = nn.Conv2d(block.in_channels, new_hidden, 3, stride=block.stride,
                      padding=1, bias=False)
    conv1.weight.data = old_conv1.weight.data[kept_idx].clone()
    bn1 = nn.BatchNorm2d(new_hidden)
    bn1.weight.data = old_bn1.weight.data[kept_idx] * m
    bn1.bias.data = old_bn1.bias.data[kept_idx] * m
    bn1.running_mean.data = old_bn1.running_mean.data[kept_idx].clone()
    bn1.running_var.data = old_bn1.running_var.data[kept_idx].clone()
    bn1.num_batches_tracked.data = old_bn1.num_batches_tracked.data.clone()
    conv2 = nn.Conv2d(new_hidden, block.out_channels, 3, padding=1, bias=False)
    conv2.weight.data = old_conv2.weight.data[:, kept_idx].clone()

    block.conv1, block.bn1, block.conv2 = conv1, bn1, conv2
    return removed_idx


def _prune_block(block: ResidualBlock, value: float, config: PruneConfig) -> bool:
    """Remove the residual branch if value <= tau, else fold it into bn2."""
    if value <= config.tau:
        if not isinstance(block.shortcut, (nn.Identity, nn.Sequential)):
            raise SurgeryError("removing this block's branch would disconnect the graph")
        from .models import _remove_branch
        _remove_branch(block)
        return True
    m = float(value)
    block.bn2.weight.data *= m
    block.bn2.bias.data *= m
    return False


def count_parameters(model: SplitModel):
    """(edge_params, total_params); stubs of removed branches are excluded."""
    def block_params(block):
        if getattr(block, "branch_removed", False):
            return sum(p.numel() for p in block.shortcut.parameters())
        return sum(p.numel() for p in block.parameters())

    stem = sum(p.numel() for p in model.stem.parameters())
    edge = stem + sum(block_params(b) for b in model.edge_blocks)
    cloud = sum(block_params(b) for b in model.cloud_blocks)
    head = sum(p.numel() for p in model.head.parameters())
    if model.aux_classifier is not None:
        head += sum(p.numel() for p in model.aux_classifier.parameters())
    return edge, edge + cloud + head


def recalibrate_norm_stats(model: SplitModel, batches):
    """Recompute BatchNorm running statistics with one pass over `batches`.

    Uses cumulative averaging so the result is an exact mean over the pass.
    """
    norms = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    saved_momentum = [bn.momentum for bn in norms]
    for bn in norms:
        bn.reset_running_stats()
        bn.momentum = None
    was_training = model.training
    model.train()
    with torch.no_grad():
        for x in batches:
            model.forward_full(x)
    for bn, mom in zip(norms, saved_momentum):
        bn.momentum = mom
    model.train(was_training)


def prune_surgery(model: SplitModel, masks: SoftMaskSet, config: PruneConfig,
                  calibration=None):
    """Physically remove structures with mask <= tau; fold surviving masks.

    Returns (pruned_model, manifest). The pruned model needs no masks. When
    `calibration` (an iterable of input batches) is given, normalization
    statistics are recomputed afterwards; function equivalence against the
    zeroed-mask reference holds for the pre-recalibration transformation.
    """
    _check_cardinality(model, masks)
    pruned = copy.deepcopy(model)
    spars = sparsity(masks, config.tau)
    edge_before, total_before = count_parameters(model)

    removed = []
    layers = []
    for i, block in enumerate(pruned.edge_blocks):
        values = masks.values_for_block(i)
        if values is None:
            continue
        if not isinstance(block, ResidualBlock):
            raise SurgeryError(f"edge block {i} is not a prunable residual block")
        before_hidden = block.hidden_channels
        if masks.granularity == "channel":
            removed_idx = _prune_channels(block, values, config)
            removed.extend(f"edge{i}.conv1:c{c}" for c in removed_idx)
            layers.append(dict(block=i, kind="channel",
                               channels_before=before_hidden,
                               channels_after=block.hidden_channels))
        else:
            was_removed = _prune_block(block, float(values[0]), config)
            if was_removed:
                removed.append(f"edge{i}.branch")
            layers.append(dict(block=i, kind="block",
                               channels_before=before_hidden,
                               channels_after=0 if was_removed else before_hidden,
                               branch_removed=was_removed))

    edge_after, total_after = count_parameters(pruned)
    manifest = dict(
        granularity=masks.granularity,
        tau=config.tau,
        removed_structures=removed,
        layers=layers,
        edge_params_before=edge_before,
        edge_params_after=edge_after,
        total_params_before=total_before,
        total_params_after=total_after,
        param_compression_edge=1.0 - edge_after / edge_before,
        param_compression_total=1.0 - total_after / total_before,
        mask_sparsity=spars.to_dict(),
    )
    if calibration is not None:
        recalibrate_norm_stats(pruned, calibration)
    return pruned, manifest

"""Sampled block-wise local Lipschitz estimation and its regularization loss.

For a chain of edge blocks f_1..f_N, a single Gaussian probe delta is added
to the input and propagated through a perturbed copy of the activation chain.
Block 1's constant is  ||f_1(x+d) - f_1(x)||_1 / ||d||_1  and block i >= 2
uses the ratio of consecutive activation gaps:

    k_i = ||b_i - a_i||_1 / (||b_{i-1} - a_{i-1}||_1 + eps)

with per-sample l1 norms and the sup over inputs approximated by the batch
maximum (or mean). Estimates stay attached to the autograd graph so the
loss  sum_i alpha_i * k_i  can be minimized over edge parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import NumericError, ValidationError
from .models import SplitModel

AGGREGATIONS = ("max", "mean")


@dataclass
class LipschitzConfig:
    alphas: tuple[float, ...] = (5.0, 0.2, 0.01, 0.005)
    noise_scale: float = 0.1
    aggregation: str = "max"
    epsilon: float = 1e-8
    per_block_probes: bool = False  # alternative mode: fresh probe at each block input

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.noise_scale <= 0:
            raise ValidationError("noise_scale must be > 0")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")


@dataclass
class LipschitzEstimate:
    k_values: torch.Tensor  # (N,), nonnegative, autograd-attached
    probe_seed: int

    def detached(self) -> list[float]:
        return [float(k) for k in self.k_values.detach()]


def _per_sample_l1(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).abs().sum(dim=1)


def _aggregate(ratios: torch.Tensor, denominators: torch.Tensor,
               config: LipschitzConfig, block_index: int) -> torch.Tensor:
    if config.aggregation == "mean":
        return ratios.mean()
    valid = denominators >= config.epsilon
    if not bool(valid.any()):
        raise NumericError(
            f"all probe denominators collapsed below epsilon at block {block_index}")
    return ratios[valid].max()


def _draw_probe(x: torch.Tensor, noise_scale: float, generator) -> torch.Tensor:
    """One shared Gaussian probe, scaled per sample by the input's std."""
    probe = torch.randn((1,) + x.shape[1:], generator=generator, dtype=x.dtype)
    per_sample_std = x.flatten(1).std(dim=1).clamp(min=1e-12)
    scale = noise_scale * per_sample_std.view(-1, *([1] * (x.dim() - 1)))
    return probe * scale


def estimate_block_lipschitz(model: SplitModel, masks, x: torch.Tensor,
                             config: LipschitzConfig, probe_seed: int = 0) -> LipschitzEstimate:
    """Sampled per-block local Lipschitz constants for the edge partition.

    Runs the model in eval mode (restored afterwards) so the estimate is a
    pure, deterministic function of (parameters, masks, batch, probe_seed).
    """
    if x.numel() == 0 or x.shape[0] < 1:
        raise ValidationError("estimation needs a nonempty batch")
    n_blocks = model.block_count
    if n_blocks < 1:
        raise ValidationError("model has no edge blocks")

    generator = torch.Generator().manual_seed(probe_seed)
    was_training = model.training
    model.eval()
    try:
        if config.per_block_probes:
            ks = _estimate_per_block_probes(model, masks, x, config, generator)
        else:
            ks = _estimate_input_probe(model, masks, x, config, generator)
    finally:
        model.train(was_training)
    return LipschitzEstimate(torch.stack(ks), probe_seed)


def _estimate_input_probe(model, masks, x, config, generator):
    delta = _draw_probe(x, config.noise_scale, generator)
    clean = model.block_activations(x, masks=masks)
    perturbed = model.block_activations(x + delta, masks=masks)

    ks = []
    prev_gap = _per_sample_l1(delta.expand_as(x))
    for i, (a, b) in enumerate(zip(clean, perturbed)):
        gap = _per_sample_l1(b - a)
        ratios = gap / (prev_gap + config.epsilon) if i > 0 else gap / prev_gap
        ks.append(_aggregate(ratios, prev_gap, config, i))
        prev_gap = gap
    return ks


def _estimate_per_block_probes(model, masks, x, config, generator):
    # fresh probe at each block's own input; block 1's input is the stem output
    clean = model.block_activations(x, masks=masks)
    inputs = [model.stem(x)] + clean[:-1]
    ks = []
    for i, (block, inp) in enumerate(zip(model.edge_blocks, inputs)):
        mask, gran = model._block_mask(masks, i)
        delta = _draw_probe(inp, config.noise_scale, generator)
        a = block(inp, mask=mask, granularity=gran)
        b = block(inp + delta, mask=mask, granularity=gran)
        denom = _per_sample_l1(delta.expand_as(inp))
        ratios = _per_sample_l1(b - a) / denom
        ks.append(_aggregate(ratios, denom, config, i))
    return ks


def lipschitz_loss(estimate: LipschitzEstimate, config: LipschitzConfig) -> torch.Tensor:
    """Weighted sum  sum_i alpha_i * k_i  (gradient flows through k_i)."""
    k = estimate.k_values
    if len(config.alphas) != k.numel():
        raise ValidationError(
            f"{len(config.alphas)} alphas for {k.numel()} block constants")
    alphas = torch.as_tensor(config.alphas, dtype=k.dtype)
    return (alphas * k).sum()

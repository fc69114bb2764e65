"""Surrogate inversion model and the adversarial reconstruction game.

The defender alternates with a surrogate attacker: the surrogate trains a
decoder to reconstruct inputs from the trunk activation (reconstruction
distance = batch mean of per-sample Euclidean distance), while the defender
minimizes  pred_loss - beta * reconstruction_distance  with the surrogate
frozen. Only one side's parameters may change at a time.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigurationError, NumericError, ValidationError
from .models import SplitModel


class _Refiner(nn.Module):
    """Shape-preserving refinement with an input skip, so near-identity maps
    are directly representable."""

    def __init__(self, c_in, width, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width + c_in, c_out, 3, padding=1)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        return self.conv2(torch.cat([h, x], dim=1))


class InversionModel(nn.Module):
    """Up-sampling decoder mapping an activation back to image space."""

    def __init__(self, layers: nn.Sequential, input_spec: tuple, output_spec: tuple):
        super().__init__()
        self.layers = layers
        self.input_spec = tuple(input_spec)    # (C, H, W) at the attachment point
        self.output_spec = tuple(output_spec)  # raw-input (C, H, W)
        self.last_holdout_loss: float | None = None

    def forward(self, activation):
        if tuple(activation.shape[1:]) != self.input_spec:
            raise ValidationError(
                f"activation shape {tuple(activation.shape[1:])} != "
                f"inverter input spec {self.input_spec}")
        return self.layers(activation)


def build_decoder(input_shape, output_shape, seed: int = 0, min_channels: int = 16) -> InversionModel:
    """Mirror decoder: one stride-2 transposed-conv stage per 2x down-sampling
    between `input_shape` and `output_shape`, channel counts halving toward the
    output, final 3x3 conv. Raw decoder output is unbounded; attack emission
    clamps reconstructions to the [0,1] image range."""
    c_in, h_in, w_in = input_shape
    c_out, h_out, w_out = output_shape
    if h_out % h_in or w_out % w_in or (h_out // h_in) != (w_out // w_in):
        raise ConfigurationError(
            f"cannot mirror activation {input_shape} to output {output_shape}")
    factor = h_out // h_in
    if factor < 1 or factor & (factor - 1):
        raise ConfigurationError(f"up-sampling factor {factor} is not a power of 2")
    stages = int(math.log2(factor))

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if stages == 0:
            # nothing to upsample: shape-preserving refinement with input skip
            body: nn.Module = _Refiner(c_in, max(min_channels, c_in * 2), c_out)
        else:
            layers: list[nn.Module] = []
            ch = c_in
            for _ in range(stages):
                nxt = max(min_channels, ch // 2)
                layers += [
                    nn.ConvTranspose2d(ch, nxt, 3, stride=2, padding=1, output_padding=1),
                    nn.ReLU(),
                ]
                ch = nxt
            layers += [nn.Conv2d(ch, c_out, 3, padding=1)]
            body = nn.Sequential(*layers)
        decoder = InversionModel(body, input_shape, output_shape)
    return decoder


def _probe_shape(forward_fn, input_shape) -> tuple:
    with torch.no_grad():
        out = forward_fn(torch.zeros((1,) + tuple(input_shape)))
    return tuple(out.shape[1:])


def build_surrogate_inverter(model: SplitModel, seed: int = 0,
                             input_shape: tuple | None = None) -> InversionModel:
    """Decoder attached to the edge output (the transmitted activation),
    inverting every deployed layer back to the raw input. In the canonical
    defended deployment the whole conv stack sits on the edge, so this is the
    last conv activation."""
    if input_shape is None:
        if model.arch is None:
            raise ConfigurationError(
                "model has no architecture spec; pass input_shape explicitly")
        input_shape = (model.arch.in_channels, model.arch.image_size, model.arch.image_size)
    was_training = model.training
    model.eval()
    try:
        act_shape = _probe_shape(lambda t: model.forward_edge(t), input_shape)
    finally:
        model.train(was_training)
    return build_decoder(act_shape, tuple(input_shape), seed=seed)


def adversarial_loss(x: torch.Tensor, x_rec: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Batch mean of the per-sample Euclidean distance ||x - x_rec||_2."""
    if x.shape != x_rec.shape:
        raise ValidationError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    sq = (x - x_rec).flatten(1).pow(2).sum(dim=1)
    return sq.mean() if squared else sq.clamp(min=0).sqrt().mean()


def defender_adv_objective(pred_loss, adv_loss, beta):
    """Defender objective  pred_loss - beta * adv_loss  (surrogate frozen)."""
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    return pred_loss - beta * adv_loss


def train_surrogate(inverter: InversionModel, model: SplitModel, masks, dataset,
                    passes: int, seed: int = 0, lr: float = 1e-3,
                    batch_size: int = 128, holdout_fraction: float = 0.1) -> InversionModel:
    """Train the surrogate decoder against the frozen trunk.

    The defended model's parameters (including normalization buffers) are
    untouched; returns the inverter with `last_holdout_loss` recorded.
    """
    if passes < 1:
        raise ValidationError("passes must be >= 1")
    generator = torch.Generator().manual_seed(seed)
    n = len(dataset)
    n_holdout = max(1, int(n * holdout_fraction)) if n > 1 else 0
    perm = torch.randperm(n, generator=generator)
    holdout = dataset.subset(perm[:n_holdout]) if n_holdout else None
    train = dataset.subset(perm[n_holdout:])

    was_training = model.training
    model.eval()
    inverter.train()
    optimizer = torch.optim.Adam(inverter.parameters(), lr=lr)
    step = 0
    try:
        for _ in range(passes):
            for x, _ in train.batches(batch_size, shuffle=True, generator=generator):
                with torch.no_grad():
                    act = model.forward_edge(x, masks=masks)
                loss = adversarial_loss(x, inverter(act))
                if not torch.isfinite(loss):
                    raise NumericError(f"surrogate loss diverged at step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
        if holdout is not None:
            inverter.eval()
            with torch.no_grad():
                losses = [float(adversarial_loss(x, inverter(model.forward_edge(x, masks=masks))))
                          for x, _ in holdout.batches(batch_size)]
            inverter.last_holdout_loss = sum(losses) / len(losses)
    finally:
        model.train(was_training)
        inverter.eval()
    return inverter

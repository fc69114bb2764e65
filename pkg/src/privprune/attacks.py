"""Model-inversion attacks used for evaluation.

Black-box: a mirror decoder trained on (intermediate, input) pairs obtained
through a query-only oracle; the attacker never touches edge parameters.
White-box: direct gradient optimization of a candidate input to match a
target activation, with a total-variation prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adversarial import InversionModel, adversarial_loss, build_decoder
from .data import ArrayDataset
from .defenses import DefenseSpec, perturb_intermediate
from .errors import AttackError, NumericError, ValidationError
from .models import SplitModel
from .utils import derive_seed

ATTACK_MODES = ("black-box", "white-box")


@dataclass
class AttackConfig:
    mode: str = "black-box"
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 128
    whitebox_steps: int = 1000
    whitebox_step_size: float = 0.05
    tv_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ValidationError(f"unknown attack mode {self.mode!r}")
        if self.tv_weight < 0:
            raise ValidationError("tv_weight must be >= 0")
        if self.mode == "white-box" and self.whitebox_steps < 1:
            raise ValidationError("whitebox_steps must be >= 1 in white-box mode")


class EdgeOracle:
    """Query-only view of the deployed edge partition.

    Exposes forward queries plus the publicly known input/activation shapes;
    parameters are never reachable through this interface. Wire defenses
    (noise/dropout) are applied inside the oracle with per-call seeds so
    repeated querying is reproducible.
    """

    def __init__(self, forward_fn, input_shape, defense: DefenseSpec | None = None,
                 seed: int = 0):
        self._forward = forward_fn
        self._defense = defense if defense is not None else DefenseSpec()
        self.seed = seed
        self._calls = 0
        self.input_shape = tuple(input_shape)
        with torch.no_grad():
            probe = self._forward(torch.zeros((1,) + self.input_shape))
        self.activation_shape = tuple(probe.shape[1:])

    @classmethod
    def from_split_model(cls, model: SplitModel, masks=None,
                         defense: DefenseSpec | None = None, seed: int = 0,
                         input_shape=None) -> "EdgeOracle":
        if input_shape is None:
            if model.arch is None:
                raise ValidationError("model has no arch spec; pass input_shape")
            input_shape = (model.arch.in_channels, model.arch.image_size,
                           model.arch.image_size)
        inner = model.model if hasattr(model, "model") else model  # unwrap defense views

        def forward_fn(x):
            was_training = inner.training
            inner.eval()
            try:
                with torch.no_grad():
                    return model.forward_edge(x, masks=masks).detach()
            finally:
                inner.train(was_training)

        return cls(forward_fn, input_shape, defense=defense, seed=seed)

    def query(self, x: torch.Tensor, call_seed: int | None = None) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValidationError(
                f"query shape {tuple(x.shape[1:])} != oracle input {self.input_shape}")
        try:
            act = self._forward(x)
        except Exception as exc:  # noqa: BLE001 - surface as attack failure
            raise AttackError(f"edge oracle failed: {exc}") from exc
        if call_seed is None:
            call_seed = derive_seed(self.seed, self._calls)
            self._calls += 1
        return perturb_intermediate(act, self._defense, seed=call_seed)


def train_blackbox_inverter(oracle: EdgeOracle, attacker_data: ArrayDataset,
                            config: AttackConfig) -> InversionModel:
    """Train a mirror inverter on (activation, input) pairs from the oracle."""
    inverter = build_decoder(oracle.activation_shape, oracle.input_shape,
                             seed=derive_seed(config.seed, 11), min_channels=32)
    optimizer = torch.optim.Adam(inverter.parameters(), lr=config.lr)
    steps_per_epoch = max(1, -(-len(attacker_data) // config.batch_size))
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, config.epochs * steps_per_epoch))
    generator = torch.Generator().manual_seed(derive_seed(config.seed, 12))
    inverter.train()
    step = 0
    for _ in range(config.epochs):
        for x, _ in attacker_data.batches(config.batch_size, shuffle=True,
                                          generator=generator):
            act = oracle.query(x, call_seed=derive_seed(config.seed, 13, step))
            loss = adversarial_loss(x, inverter(act))
            if not torch.isfinite(loss):
                raise NumericError(f"inverter training diverged at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            schedule.step()
            step += 1
    inverter.eval()
    return inverter


@dataclass
class ReconstructionBatch:
    images: torch.Tensor              # [0,1], index-aligned with sources
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.numel() and (float(self.images.min()) < 0.0
                                    or float(self.images.max()) > 1.0):
            raise ValidationError("reconstructions must lie in [0, 1]")


def run_blackbox_attack(inverter: InversionModel, oracle: EdgeOracle,
                        eval_data) -> ReconstructionBatch:
    """Reconstruct every evaluation sample; deterministic given the inverter."""
    images = eval_data.images if hasattr(eval_data, "images") else eval_data
    if tuple(images.shape[1:]) != oracle.input_shape:
        raise ValidationError("evaluation images do not match the oracle input shape")
    if tuple(inverter.input_spec) != oracle.activation_shape:
        raise AttackError("inverter was trained against a different oracle signature")
    inverter.eval()
    recons = []
    with torch.no_grad():
        for i in range(0, images.shape[0], 256):
            batch = images[i:i + 256]
            act = oracle.query(batch, call_seed=derive_seed(oracle.seed, 17, i))
            recons.append(inverter(act).clamp(0.0, 1.0))
    return ReconstructionBatch(torch.cat(recons), list(range(images.shape[0])))


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation, summed per sample, averaged over the batch."""
    dh = (x[..., 1:, :] - x[..., :-1, :]).abs().flatten(1).sum(dim=1)
    dw = (x[..., :, 1:] - x[..., :, :-1]).abs().flatten(1).sum(dim=1)
    return (dh + dw).mean()


def whitebox_invert(model: SplitModel, target_activation: torch.Tensor,
                    config: AttackConfig, masks=None,
                    input_shape=None) -> torch.Tensor:
    """Optimize a candidate input so its edge activation matches the target.

    Objective: mean per-sample ||f_e(x) - target||_2^2 + tv_weight * TV(x),
    from a uniform-noise start, cosine-decayed Adam, iterates clamped to [0,1].
    """
    if config.whitebox_steps < 1:
        raise ValidationError("whitebox_steps must be >= 1")
    if input_shape is None:
        if model.arch is None:
            raise ValidationError("model has no arch spec; pass input_shape")
        input_shape = (model.arch.in_channels, model.arch.image_size,
                       model.arch.image_size)
    n = target_activation.shape[0]
    g = torch.Generator().manual_seed(derive_seed(config.seed, 19))
    candidate = torch.rand((n,) + tuple(input_shape), generator=g).requires_grad_(True)

    was_training = model.training
    model.eval()
    _frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam([candidate], lr=config.whitebox_step_size)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=config.whitebox_steps)
    try:
        for step in range(config.whitebox_steps):
            act = model.forward_edge(candidate, masks=masks)
            match = (act - target_activation).flatten(1).pow(2).sum(dim=1).mean()
            objective = match + config.tv_weight * total_variation(candidate)
            if not torch.isfinite(objective):
                raise NumericError(f"white-box objective diverged at step {step}")
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            schedule.step()
            with torch.no_grad():
                candidate.clamp_(0.0, 1.0)
    finally:
        for p, flag in zip(model.parameters(), _frozen):
            p.requires_grad_(flag)
        model.train(was_training)
    return candidate.detach().clamp(0.0, 1.0)


def run_whitebox_attack(model: SplitModel, oracle: EdgeOracle, eval_data,
                        config: AttackConfig, masks=None) -> ReconstructionBatch:
    """White-box reconstruction of every evaluation sample from its observed
    (possibly defense-perturbed) activation."""
    images = eval_data.images if hasattr(eval_data, "images") else eval_data
    recons = []
    for i in range(0, images.shape[0], 64):
        batch = images[i:i + 64]
        target = oracle.query(batch, call_seed=derive_seed(oracle.seed, 17, i))
        recons.append(whitebox_invert(model, target, config, masks=masks,
                                      input_shape=oracle.input_shape))
    return ReconstructionBatch(torch.cat(recons), list(range(images.shape[0])))

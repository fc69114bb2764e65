"""Defended training loop: per-batch adversarial, Lipschitz and mask phases.

Every batch runs up to three phases in fixed order:

  A  update model parameters on  pred_loss - beta * reconstruction_distance
     (surrogate frozen),
  B  update model parameters on  pred_loss + lipschitz_loss,
  C  one FISTA step on the soft masks (model frozen, gradient taken at the
     masks' auxiliary point).

The surrogate inverter retrains every `surrogate_period` epochs (and, unless
strict mode is requested, once at the first epoch so the defender never
optimizes against a random decoder). Training is deterministic given the
seed. Phase hygiene: A/B touch only model parameters, C only masks, and the
surrogate phase only the inverter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

import torch

from .adversarial import (InversionModel, adversarial_loss, build_surrogate_inverter,
                          defender_adv_objective, train_surrogate)
from .data import ArrayDataset, DatasetBundle
from .errors import NumericError, SurgeryError, ValidationError
from .lipschitz import LipschitzConfig, estimate_block_lipschitz, lipschitz_loss
from .metrics import reid_rank1
from .models import SplitModel
from .pruning import (PruneConfig, SoftMaskSet, fista_step, prune_surgery,
                      smooth_norm_gradient, sparsity)
from .utils import derive_seed, fingerprint_module, fingerprint_tensors, seed_all

LOSS_SPECS = ("cross-entropy", "cross-entropy+triplet")


@dataclass
class TrainConfig:
    epochs: int = 12
    model_lr: float = 3e-4
    mask_lr: float = 5e-3
    batch_size: int = 128
    beta: float = 0.0004
    loss_spec: str = "cross-entropy"
    task_mode: str = "classification"
    prune: PruneConfig = field(default_factory=PruneConfig)
    lip: LipschitzConfig = field(default_factory=LipschitzConfig)
    surrogate_period: int = 10
    surrogate_passes: int = 1
    surrogate_lr: float = 1e-3
    seed: int = 0
    mask_granularity: str = "channel"
    mask_init: str = "normal"
    warm_start_surrogate: bool = True
    combined_objective: bool = False
    use_adv: bool = True
    use_lip: bool = True
    use_prune: bool = True
    trace_phases: bool = False
    triplet_margin: float = 0.3

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.surrogate_period < 1:
            raise ValidationError("surrogate_period must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.loss_spec not in LOSS_SPECS:
            raise ValidationError(f"unknown loss_spec {self.loss_spec!r}")
        # FISTA step size is the mask learning rate
        self.prune.mask_step = self.mask_lr


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def to_ndjson(self, path):
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def from_ndjson(cls, path) -> "TrainHistory":
        with open(path) as f:
            return cls(records=[json.loads(line) for line in f if line.strip()])


def _batch_hard_triplet(embeddings: torch.Tensor, labels: torch.Tensor,
                        margin: float) -> torch.Tensor:
    """Batch-hard triplet loss on l2-normalized embeddings."""
    emb = torch.nn.functional.normalize(embeddings, dim=1)
    dist = torch.cdist(emb, emb)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = dist.masked_fill(~same | eye, float("-inf")).max(dim=1).values
    neg = dist.masked_fill(same, float("inf")).min(dim=1).values
    valid = torch.isfinite(pos) & torch.isfinite(neg)
    if not bool(valid.any()):
        return torch.zeros((), dtype=embeddings.dtype)
    return torch.clamp(pos[valid] - neg[valid] + margin, min=0).mean()


def _prediction_loss(model: SplitModel, outputs, labels, config: TrainConfig):
    if model.task_mode == "classification":
        return torch.nn.functional.cross_entropy(outputs, labels)
    logits = model.aux_classifier(outputs)
    loss = torch.nn.functional.cross_entropy(logits, labels)
    if config.loss_spec == "cross-entropy+triplet":
        loss = loss + _batch_hard_triplet(outputs, labels, config.triplet_margin)
    return loss


def evaluate_accuracy(model: SplitModel, dataset: ArrayDataset, masks=None,
                      batch_size: int = 256) -> float:
    """Top-1 accuracy (classification) or self-gallery rank-1 (embedding)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if model.task_mode == "classification":
                hits = total = 0
                for x, y in dataset.batches(batch_size):
                    hits += int((model.forward_full(x, masks=masks).argmax(dim=1) == y).sum())
                    total += len(y)
                return hits / max(total, 1)
            embs = torch.cat([model.forward_full(x, masks=masks)
                              for x, _ in dataset.batches(batch_size)])
            return reid_rank1(embs, embs, dataset.labels)
    finally:
        model.train(was_training)


class _PhaseTracer:
    def __init__(self, enabled: bool, model, masks, inverter, sink: list):
        self.enabled = enabled
        self.model, self.masks, self.inverter, self.sink = model, masks, inverter, sink

    def _snap(self):
        return dict(
            theta=fingerprint_module(self.model),
            masks=(fingerprint_tensors([self.masks.values, self.masks.aux])
                   if self.masks is not None else None),
            adv=fingerprint_module(self.inverter) if self.inverter is not None else None,
        )

    def record(self, epoch, batch, phase, before, after):
        self.sink.append(dict(epoch=epoch, batch=batch, phase=phase,
                              before=before, after=after))

    def phase(self, epoch, batch, phase):
        return _TraceCtx(self, epoch, batch, phase)


class _TraceCtx:
    def __init__(self, tracer, epoch, batch, phase):
        self.tracer, self.epoch, self.batch, self.phase = tracer, epoch, batch, phase

    def __enter__(self):
        if self.tracer.enabled:
            self.before = self.tracer._snap()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self.tracer.enabled and exc_type is None:
            self.tracer.record(self.epoch, self.batch, self.phase,
                               self.before, self.tracer._snap())
        return False


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _check_finite(loss, phase, epoch, batch):
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss in phase {phase} at epoch {epoch}, batch {batch}")


def _mask_fista_update(model, masks, x, y, config, epoch=0, batch=0):
    """Gradient of the smooth objective at the auxiliary point, then one
    FISTA step. The model (parameters and buffers) is untouched."""
    aux = masks.aux.clone().requires_grad_(True)
    view = masks.view_at(aux)
    was_training = model.training
    model.eval()
    _set_requires_grad(model, False)
    try:
        outputs = model.forward_full(x, masks=view)
        pred_loss = _prediction_loss(model, outputs, y, config)
        _check_finite(pred_loss, "C", epoch, batch)
        (grad,) = torch.autograd.grad(pred_loss, aux)
    finally:
        _set_requires_grad(model, True)
        model.train(was_training)
    s = float(torch.linalg.vector_norm(aux.detach()))
    smooth = float(pred_loss.detach()) + config.prune.lambda2 * s
    grad = grad + smooth_norm_gradient(aux.detach(), config.prune.lambda2)
    return fista_step(masks, grad, config.prune), smooth


def train_defense(model: SplitModel, dataset: DatasetBundle, config: TrainConfig):
    """Run the full defended training loop.

    Returns (model, masks, inverter, history); `masks` is None when pruning
    is disabled and `inverter` is None when adversarial training is disabled.
    """
    seed_all(config.seed)
    if config.use_lip:
        # alpha weights cover up to the architecture's block count; use the
        # first N for the configured split
        n = model.block_count
        if len(config.lip.alphas) < n:
            raise ValidationError(
                f"{len(config.lip.alphas)} alpha weights for {n} edge blocks")
        if len(config.lip.alphas) > n:
            config = replace(config, lip=replace(config.lip,
                                                 alphas=config.lip.alphas[:n]))
    masks = (SoftMaskSet.initialize(model, config.mask_granularity,
                                    seed=derive_seed(config.seed, 1),
                                    init=config.mask_init)
             if config.use_prune else None)
    inverter = (build_surrogate_inverter(model, seed=derive_seed(config.seed, 2))
                if config.use_adv else None)
    history = TrainHistory()
    tracer = _PhaseTracer(config.trace_phases, model, masks, inverter, history.trace)
    optimizer = torch.optim.RMSprop(model.parameters(), lr=config.model_lr)
    data_gen = torch.Generator().manual_seed(derive_seed(config.seed, 3))
    prev_smooth = None

    def maybe_train_surrogate(epoch):
        nonlocal inverter
        with tracer.phase(epoch, -1, "surrogate"):
            inverter = train_surrogate(
                inverter, model, masks, dataset.attacker,
                passes=config.surrogate_passes,
                seed=derive_seed(config.seed, 4, epoch),
                lr=config.surrogate_lr, batch_size=config.batch_size)
            tracer.inverter = inverter

    for epoch in range(1, config.epochs + 1):
        if config.use_adv and (
                epoch % config.surrogate_period == 0
                or (config.warm_start_surrogate and epoch == 1)):
            maybe_train_surrogate(epoch)

        epoch_pred, epoch_lip, epoch_adv, epoch_k, n_batches = 0.0, 0.0, 0.0, None, 0
        model.train()
        for b, (x, y) in enumerate(dataset.train.batches(
                config.batch_size, shuffle=True, generator=data_gen)):
            if config.combined_objective:
                pred_f, lip_f, adv_f, k_now = _combined_step(
                    model, masks, inverter, x, y, config, optimizer, epoch, b)
            else:
                pred_f, lip_f, adv_f, k_now = _literal_phases(
                    model, masks, inverter, x, y, config, optimizer, epoch, b, tracer)
            if masks is not None:
                with tracer.phase(epoch, b, "C"):
                    masks, smooth = _mask_fista_update(model, masks, x, y,
                                                       config, epoch, b)
                    # adaptive restart: an ascent of the smooth objective means
                    # the momentum has overshot; drop it
                    if config.prune.restart and prev_smooth is not None \
                            and smooth > prev_smooth:
                        masks = masks.restarted()
                    prev_smooth = smooth
                    tracer.masks = masks
            epoch_pred += pred_f
            epoch_lip += lip_f
            epoch_adv += adv_f
            epoch_k = k_now if k_now is not None else epoch_k
            n_batches += 1

        denom = max(n_batches, 1)
        spars = sparsity(masks, config.prune.tau) if masks is not None else None
        history.records.append(dict(
            epoch=epoch,
            pred_loss=epoch_pred / denom,
            lip_loss=epoch_lip / denom,
            adv_loss=epoch_adv / denom,
            k_values=epoch_k if epoch_k is not None else [],
            sparsity=spars.to_dict() if spars is not None else None,
            eval_accuracy=evaluate_accuracy(model, dataset.eval, masks=masks),
            surrogate_holdout_loss=(inverter.last_holdout_loss
                                    if inverter is not None else None),
        ))
    model.eval()
    return model, masks, inverter, history


def _literal_phases(model, masks, inverter, x, y, config, optimizer, epoch, b, tracer):
    """Phase A (adversarial step) then phase B (Lipschitz step), per the
    statement order of the training procedure."""
    adv_f = 0.0
    if config.use_adv:
        with tracer.phase(epoch, b, "A"):
            inverter.eval()  # surrogate must stay bit-identical in phase A
            edge = model.forward_edge(x, masks=masks)
            h = edge
            for block in model.cloud_blocks:
                h = block(h)
            pred_loss = _prediction_loss(model, model.head_forward(h), y, config)
            adv = adversarial_loss(x, inverter(edge))
            objective = defender_adv_objective(pred_loss, adv, config.beta)
            _check_finite(objective, "A", epoch, b)
            optimizer.zero_grad()
            objective.backward()
            optimizer.step()
            adv_f = float(adv.detach())

    with tracer.phase(epoch, b, "B"):
        pred_loss = _prediction_loss(model, model.forward_full(x, masks=masks), y, config)
        k_now = None
        if config.use_lip:
            estimate = estimate_block_lipschitz(
                model, masks, x, config.lip,
                probe_seed=derive_seed(config.seed, 5, epoch, b))
            lip = lipschitz_loss(estimate, config.lip)
            objective = pred_loss + lip
            k_now = estimate.detached()
            lip_f = float(lip.detach())
        else:
            objective = pred_loss
            lip_f = 0.0
        _check_finite(objective, "B", epoch, b)
        optimizer.zero_grad()
        objective.backward()
        optimizer.step()
    return float(pred_loss.detach()), lip_f, adv_f, k_now


def _combined_step(model, masks, inverter, x, y, config, optimizer, epoch, b):
    """Ablation mode: one step on  pred - beta*adv + lip."""
    edge = model.forward_edge(x, masks=masks)
    h = edge
    for block in model.cloud_blocks:
        h = block(h)
    pred_loss = _prediction_loss(model, model.head_forward(h), y, config)
    objective = pred_loss
    adv_f = lip_f = 0.0
    k_now = None
    if config.use_adv:
        inverter.eval()
        adv = adversarial_loss(x, inverter(edge))
        objective = objective - config.beta * adv
        adv_f = float(adv.detach())
    if config.use_lip:
        estimate = estimate_block_lipschitz(
            model, masks, x, config.lip,
            probe_seed=derive_seed(config.seed, 5, epoch, b))
        lip = lipschitz_loss(estimate, config.lip)
        objective = objective + lip
        lip_f, k_now = float(lip.detach()), estimate.detached()
    _check_finite(objective, "combined", epoch, b)
    optimizer.zero_grad()
    objective.backward()
    optimizer.step()
    return float(pred_loss.detach()), lip_f, adv_f, k_now


def train_baseline(model: SplitModel, dataset: DatasetBundle, config: TrainConfig):
    """Plain supervised training: no masks, no Lipschitz or adversarial terms."""
    seed_all(config.seed)
    optimizer = torch.optim.RMSprop(model.parameters(), lr=config.model_lr)
    data_gen = torch.Generator().manual_seed(derive_seed(config.seed, 3))
    history = TrainHistory()
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, n = 0.0, 0
        for b, (x, y) in enumerate(dataset.train.batches(
                config.batch_size, shuffle=True, generator=data_gen)):
            loss = _prediction_loss(model, model.forward_full(x), y, config)
            _check_finite(loss, "baseline", epoch, b)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            n += 1
        history.records.append(dict(
            epoch=epoch,
            pred_loss=total / max(n, 1),
            lip_loss=0.0, adv_loss=0.0, k_values=[], sparsity=None,
            eval_accuracy=evaluate_accuracy(model, dataset.eval),
            surrogate_holdout_loss=None,
        ))
    model.eval()
    return model, history


EQUIVALENCE_TOLERANCE = 1e-3


def finalize(model: SplitModel, masks: SoftMaskSet, config: TrainConfig,
             calibration=None, check_inputs: int = 100):
    """Prune, verify function preservation, then optionally recalibrate.

    Surgery equivalence is checked against the model with sub-tau masks set
    to exactly zero, before any normalization recalibration; deviation above
    the tolerance raises SurgeryError with the artifacts retained.
    """
    pruned, manifest = prune_surgery(model, masks, config.prune, calibration=None)
    deviation = _surgery_deviation(model, masks, pruned, config.prune.tau,
                                   n_inputs=check_inputs, seed=config.seed)
    manifest["equivalence_max_relative_deviation"] = deviation
    if deviation > EQUIVALENCE_TOLERANCE:
        raise SurgeryError(
            f"pruned model deviates {deviation:.3e} (> {EQUIVALENCE_TOLERANCE}) "
            "from the zeroed-mask reference")
    if calibration is not None:
        from .pruning import recalibrate_norm_stats
        recalibrate_norm_stats(pruned, calibration)
    return pruned, manifest


def _surgery_deviation(model, masks, pruned, tau, n_inputs=100, seed=0,
                       sample_shape=None):
    if sample_shape is None:
        if model.arch is None:
            raise ValidationError("model has no arch spec; pass sample_shape")
        arch = model.arch
        sample_shape = (arch.in_channels, arch.image_size, arch.image_size)
    zeroed = masks.values.clone()
    zeroed[zeroed <= tau] = 0.0
    view = masks.view_at(zeroed)
    g = torch.Generator().manual_seed(derive_seed(seed, 7))
    x = torch.rand((n_inputs,) + tuple(sample_shape), generator=g)
    was_training = (model.training, pruned.training)
    model.eval(), pruned.eval()
    try:
        with torch.no_grad():
            ref = model.forward_full(x, masks=view)
            out = pruned.forward_full(x)
    finally:
        model.train(was_training[0]), pruned.train(was_training[1])
    num = (out - ref).flatten(1).norm(dim=1)
    den = ref.flatten(1).norm(dim=1).clamp(min=1e-12)
    return float((num / den).max())

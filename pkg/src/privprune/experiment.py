"""Staged experiment execution with on-disk resumability.

Each (config, seed) run owns output_root/<config-hash>/seed<k>/ and walks the
stage sequence pretrain -> train -> prune -> attack -> evaluate. A stage
ledger records completed stages with their artifact paths; reruns load
completed stages instead of recomputing them. Pretrained backbones and the
reference attack-accuracy classifier depend only on the model/dataset/seed
subset of the config, so they are cached once under output_root/pretrained/
and shared across defenses.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import attacks as atk
from .config import ExperimentConfig
from .data import ingest_dataset
from .defenses import DefenseSpec, apply_skip, defended_predictions
from .errors import ValidationError
from .metrics import AttackReport, attack_accuracy, mse_l2, psnr, ssim
from .models import (ArchSpec, arch_from_name, build_split_model, load_checkpoint,
                     resplit, save_checkpoint)
from .pruning import SoftMaskSet
from .trainer import TrainHistory, evaluate_accuracy, finalize, train_baseline, train_defense
from .utils import derive_seed

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "train", "prune", "attack", "evaluate")

OUTPUT_ROOT_ENV = "PRIVPRUNE_OUTPUT_ROOT"


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    run_dir: str
    status: str = "pending"          # pending | completed | failed:<stage>
    stage_status: dict = field(default_factory=dict)   # stage -> ran | cached | skipped
    timings: dict = field(default_factory=dict)        # stage -> seconds
    artifacts: dict = field(default_factory=dict)      # name -> path
    reports: dict = field(default_factory=dict)        # attack mode -> AttackReport dict
    error: str | None = None

    def to_dict(self):
        return asdict(self)


def output_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, config.output_dir))


def _arch_for(config: ExperimentConfig) -> ArchSpec:
    m, d = config.model, config.dataset
    overrides = dict(image_size=d.resolution, num_classes=d.num_classes,
                     embed_dim=m.embed_dim)
    if m.base_channels is not None:
        overrides["base_channels"] = m.base_channels
    if m.num_blocks is not None:
        overrides["num_blocks"] = m.num_blocks
    if m.widths is not None:
        overrides["widths"] = tuple(m.widths)
    if m.strides is not None:
        overrides["strides"] = tuple(m.strides)
    return arch_from_name(m.arch, **overrides)


def _shared_cache_key(config: ExperimentConfig, seed: int, tag: str) -> str:
    model = asdict(config.model)
    model.pop("split_index")  # pretrained weights do not depend on the cut point
    payload = json.dumps(dict(
        model=model, dataset=asdict(config.dataset),
        pretrain_epochs=config.train.pretrain_epochs,
        model_lr=config.train.model_lr, batch_size=config.train.batch_size,
        loss_spec=config.train.loss_spec, seed=seed, tag=tag,
    ), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


class _Stages:
    """Stage ledger stored as stages.json inside the run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / "stages.json"
        self.data = {}
        if self.path.exists():
            self.data = json.loads(self.path.read_text())

    def done(self, stage: str) -> bool:
        return stage in self.data

    def artifacts(self, stage: str) -> dict:
        return self.data.get(stage, {})

    def mark(self, stage: str, artifacts: dict):
        self.data[stage] = artifacts
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _pretrained_model(config: ExperimentConfig, bundle, seed: int, root: Path):
    cache_dir = root / "pretrained"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{_shared_cache_key(config, seed, 'backbone')}.pt"
    arch = _arch_for(config)
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return resplit(model, config.model.split_index), str(path), True
    model = build_split_model(arch, config.model.split_index,
                              task_mode=config.model.task_mode,
                              seed=derive_seed(seed, 100))
    model, _ = train_baseline(model, bundle, config.pretrain_config(seed))
    save_checkpoint(path, model)
    return model, str(path), False


def _reference_classifier(config: ExperimentConfig, bundle, seed: int, root: Path):
    """Reference model for the attack-accuracy metric: a clean classifier on
    the same task (always classification over the dataset's classes)."""
    cache_dir = root / "pretrained"
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{_shared_cache_key(config, seed, 'refclf')}.pt"
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return model
    arch = _arch_for(config)
    model = build_split_model(arch, config.model.split_index,
                              task_mode="classification",
                              seed=derive_seed(seed, 101))
    cfg = config.pretrain_config(seed)
    cfg.task_mode = "classification"
    cfg.loss_spec = "cross-entropy"
    model, _ = train_baseline(model, bundle, cfg)
    save_checkpoint(path, model)
    return model


def run_experiment(config: ExperimentConfig, until_stage: str | None = None,
                   force: bool = False) -> list[RunRecord]:
    """Execute all stages (or up to `until_stage`) for every configured seed."""
    if until_stage is not None and until_stage not in STAGES:
        raise ValidationError(f"unknown stage {until_stage!r}; stages: {STAGES}")
    records = []
    for seed in config.seeds:
        records.append(_run_single(config, seed, until_stage, force))
    return records


def _run_single(config: ExperimentConfig, seed: int, until_stage, force) -> RunRecord:
    root = output_root(config)
    run_dir = root / config.hash / f"seed{seed}"
    for sub in ("checkpoints", "manifests", "reconstructions", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config.to_yaml())
    record = RunRecord(config.hash, seed, str(run_dir))
    stages = _Stages(run_dir)
    if force:
        stages.data = {}

    state: dict = {}
    stage_fns = dict(pretrain=_stage_pretrain, train=_stage_train, prune=_stage_prune,
                     attack=_stage_attack, evaluate=_stage_evaluate)
    # dataset ingestion is cheap and deterministic; redo it every invocation
    try:
        state["bundle"] = ingest_dataset(config.dataset, seed=derive_seed(seed, 0))
    except Exception as exc:
        record.status = "failed:ingest"
        record.error = f"[ingest] {type(exc).__name__}: {exc}"
        _write_record(record, run_dir)
        return record
    state["root"] = root

    for stage in STAGES:
        t0 = time.perf_counter()
        try:
            if stages.done(stage):
                _load_stage(stage, config, seed, state, stages.artifacts(stage))
                record.stage_status[stage] = "cached"
            else:
                artifacts = stage_fns[stage](config, seed, state, run_dir)
                stages.mark(stage, artifacts)
                record.artifacts.update(artifacts)
                record.stage_status[stage] = "ran"
        except Exception as exc:
            record.status = f"failed:{stage}"
            record.error = f"[{stage}] {type(exc).__name__}: {exc}"
            logger.exception("stage %s failed for seed %d", stage, seed)
            _write_record(record, run_dir)
            return record
        record.timings[stage] = time.perf_counter() - t0
        record.artifacts.update(stages.artifacts(stage))
        if stage == "evaluate":
            record.reports = {mode: json.loads(Path(p).read_text())
                              for mode, p in stages.artifacts(stage).items()}
        if until_stage is not None and stage == until_stage:
            break
    record.status = "completed"
    _write_record(record, run_dir)
    return record


def _write_record(record: RunRecord, run_dir: Path):
    (run_dir / "record.json").write_text(
        json.dumps(record.to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------- stages --

def _stage_pretrain(config, seed, state, run_dir):
    model, path, cached = _pretrained_model(config, state["bundle"], seed, state["root"])
    state["pretrained"] = model
    return {"pretrained": path}


def _load_stage(stage, config, seed, state, artifacts):
    if stage == "pretrain":
        state["pretrained"], _, _ = load_checkpoint(artifacts["pretrained"])
    elif stage == "train":
        model, mask_state, _ = load_checkpoint(artifacts["defended"])
        state["defended"] = model
        state["masks"] = SoftMaskSet.from_state_dict(mask_state) if mask_state else None
        state["history_path"] = artifacts["history"]
    elif stage == "prune":
        if "pruned" in artifacts:
            state["deployed"], _, _ = load_checkpoint(artifacts["pruned"])
        else:
            state["deployed"] = state["defended"]
    elif stage == "attack":
        state["recon_paths"] = artifacts


def _stage_train(config, seed, state, run_dir):
    bundle = state["bundle"]
    defense = config.defense
    if defense.trains_model:
        model = state["pretrained"]
        tcfg = config.train_config(seed)
        model, masks, inverter, history = train_defense(model, bundle, tcfg)
        state["defended"], state["masks"] = model, masks
        defended_path = run_dir / "checkpoints" / "defended.pt"
        save_checkpoint(defended_path, model, masks=masks)
        if inverter is not None:
            torch.save(inverter.state_dict(),
                       run_dir / "checkpoints" / "surrogate.pt")
    else:
        # perturbation defenses keep the pretrained model
        state["defended"], state["masks"] = state["pretrained"], None
        history = TrainHistory()
        defended_path = run_dir / "checkpoints" / "defended.pt"
        save_checkpoint(defended_path, state["defended"])
    history_path = run_dir / "history.ndjson"
    history.to_ndjson(history_path)
    state["history_path"] = str(history_path)
    artifacts = {"defended": str(defended_path), "history": str(history_path)}
    if config.train.trace_phases:
        trace_path = run_dir / "phase_trace.json"
        trace_path.write_text(json.dumps(history.trace))
        artifacts["trace"] = str(trace_path)
    return artifacts


def _stage_prune(config, seed, state, run_dir):
    if config.defense.kind != "patrol" or state["masks"] is None:
        state["deployed"] = state["defended"]
        return {}
    bundle = state["bundle"]
    calib = [x for x, _ in bundle.train.subset(range(min(1024, len(bundle.train))))
             .batches(config.train.batch_size)]
    pruned, manifest = finalize(state["defended"], state["masks"],
                                config.train_config(seed), calibration=calib)
    state["deployed"] = pruned
    pruned_path = run_dir / "checkpoints" / "pruned.pt"
    save_checkpoint(pruned_path, pruned)
    manifest_path = run_dir / "manifests" / "pruning.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {"pruned": str(pruned_path), "manifest": str(manifest_path)}


def _deployed_oracle(config, seed, state):
    """Oracle over the deployed edge model with the wire defense applied."""
    model = state["deployed"]
    defense = config.defense
    if defense.kind == "skip":
        model = apply_skip(model, defense.strength, seed=derive_seed(seed, 40))
    wire = defense if defense.kind in ("noise", "dropout") else DefenseSpec()
    return atk.EdgeOracle.from_split_model(model, masks=None, defense=wire,
                                           seed=derive_seed(seed, 41))


def _stage_attack(config, seed, state, run_dir):
    bundle = state["bundle"]
    oracle = _deployed_oracle(config, seed, state)
    limit = min(config.attack.eval_limit, len(bundle.eval))
    eval_subset = bundle.eval.subset(range(limit))
    artifacts = {}
    state["recons"] = {}
    for mode in config.attack.modes():
        acfg = config.attack.runtime(mode, derive_seed(seed, 42))
        if mode == "black-box":
            inverter = atk.train_blackbox_inverter(oracle, bundle.attacker, acfg)
            torch.save(inverter.state_dict(), run_dir / "checkpoints" / "inverter.pt")
            recon = atk.run_blackbox_attack(inverter, oracle, eval_subset)
        else:
            target_model = state["deployed"]
            recon = atk.run_whitebox_attack(target_model, oracle, eval_subset, acfg)
        path = _save_reconstructions(recon, eval_subset, run_dir, mode)
        artifacts[mode] = path
        state["recons"][mode] = recon
    return artifacts


def _save_reconstructions(recon, eval_subset, run_dir, mode):
    out = run_dir / "reconstructions" / f"{mode}.pt"
    torch.save(dict(images=recon.images, source_ids=recon.source_ids), out)
    index = run_dir / "reconstructions" / f"{mode}_index.json"
    index.write_text(json.dumps(dict(
        file=out.name, source_ids=list(recon.source_ids))))
    _save_preview_images(recon, run_dir / "reconstructions" / mode)
    return str(out)


def _save_preview_images(recon, directory: Path):
    from PIL import Image
    import numpy as np

    directory.mkdir(parents=True, exist_ok=True)
    for i in range(recon.images.shape[0]):
        arr = (recon.images[i].permute(1, 2, 0).numpy() * 255).astype(np.uint8)
        Image.fromarray(arr).save(directory / f"recon_{i:04d}.png")


def _stage_evaluate(config, seed, state, run_dir):
    bundle = state["bundle"]
    limit = min(config.attack.eval_limit, len(bundle.eval))
    eval_subset = bundle.eval.subset(range(limit))
    classifier = _reference_classifier(config, bundle, seed, state["root"])
    pred_acc = _defended_accuracy(config, seed, state, bundle)
    artifacts = {}
    for mode in config.attack.modes():
        recon = state.get("recons", {}).get(mode)
        if recon is None:
            data = torch.load(state["recon_paths"][mode], weights_only=True)
            recon = atk.ReconstructionBatch(data["images"], data["source_ids"])
        originals = eval_subset.images
        report = AttackReport(
            psnr_mean=psnr(recon.images, originals).mean,
            ssim_mean=ssim(recon.images, originals).mean,
            mse_mean=mse_l2(recon.images, originals).mean,
            attack_accuracy=attack_accuracy(recon, eval_subset.labels, classifier),
            prediction_accuracy=pred_acc,
            metadata=dict(defense=config.defense.kind,
                          defense_strength=config.defense.strength,
                          attack_mode=mode, seed=seed, config_hash=config.hash,
                          name=config.name),
        )
        path = run_dir / "reports" / f"report_{mode}.json"
        path.write_text(report.to_json())
        artifacts[mode] = str(path)
    return artifacts


def _defended_accuracy(config, seed, state, bundle) -> float:
    """Utility of the deployed pipeline, with any wire perturbation applied."""
    model = state["deployed"]
    defense = config.defense
    if defense.kind in ("none", "patrol", "patrol-no-prune"):
        return evaluate_accuracy(model, bundle.eval)
    if model.task_mode == "classification":
        hits = total = 0
        for i, (x, y) in enumerate(bundle.eval.batches(256)):
            preds = defended_predictions(model, None, defense, x,
                                         seed=derive_seed(seed, 43, i))
            hits += int((preds.argmax(dim=1) == y).sum())
            total += len(y)
        return hits / max(total, 1)
    from .metrics import reid_rank1
    embs = torch.cat([defended_predictions(model, None, defense, x,
                                           seed=derive_seed(seed, 43, i))
                      for i, (x, _) in enumerate(bundle.eval.batches(256))])
    return reid_rank1(embs, embs, bundle.eval.labels)

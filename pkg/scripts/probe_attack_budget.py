"""Probe attack strength vs training budget on cached grid2 models."""
import json
import sys
from pathlib import Path

import torch

from privprune.attacks import AttackConfig, EdgeOracle, run_blackbox_attack, train_blackbox_inverter
from privprune.data import DatasetSpec, ingest_dataset
from privprune.metrics import psnr, ssim
from privprune.models import load_checkpoint, resplit
from privprune.utils import derive_seed

GRID = Path("/tmp/grid2")
spec = DatasetSpec(train_size=1536, eval_size=256, attacker_size=768,
                   resolution=32, num_classes=10)
bundle = ingest_dataset(spec, seed=derive_seed(0, 0))
eval_subset = bundle.eval.subset(range(128))

pre = sorted((GRID / "pretrained").glob("*.pt"))
undef, _, _ = load_checkpoint(pre[0])
undef = resplit(undef, 2).eval()

# find run dirs: identify defended/pruned checkpoints
models = {"undef-split2": (undef, None)}
for run in sorted(GRID.iterdir()):
    pruned = run / "seed0" / "checkpoints" / "pruned.pt"
    if pruned.exists():
        cfg = (run / "seed0" / "config.yaml").read_text()
        tag = "D" if "0.5" in cfg and "0.02" in cfg else ("F" if "use_adv: false" in cfg else "E")
        m, _, _ = load_checkpoint(pruned)
        models[f"patrol-{tag}-{run.name[:4]}"] = (m.eval(), None)

for name, (model, masks) in models.items():
    oracle = EdgeOracle.from_split_model(model, masks=masks, seed=derive_seed(0, 41))
    for epochs, lr, bs in [(6, 1e-3, 128), (12, 5e-3, 64)]:
        acfg = AttackConfig(epochs=epochs, lr=lr, batch_size=bs, seed=derive_seed(0, 42))
        inv = train_blackbox_inverter(oracle, bundle.attacker, acfg)
        rec = run_blackbox_attack(inv, oracle, eval_subset)
        p = psnr(rec.images, eval_subset.images).mean
        s = ssim(rec.images, eval_subset.images).mean
        print(f"{name:24s} ep={epochs:2d} lr={lr} bs={bs}: psnr={p:.3f} ssim={s:.3f}")

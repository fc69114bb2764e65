"""Second grid: alpha scaling, beta strength, mask pressure + diagnostics."""
import json
import sys
import time
from pathlib import Path

import torch

from privprune.config import config_from_dict
from privprune.experiment import run_experiment
from privprune.models import load_checkpoint
from privprune.pruning import SoftMaskSet

OUT = sys.argv[1]
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0

base = {
    "name": "grid2",
    "output_dir": OUT,
    "seeds": [SEED],
    "dataset": {"train_size": 1536, "eval_size": 256, "attacker_size": 768,
                "resolution": 32, "num_classes": 10},
    "train": {"epochs": 14, "pretrain_epochs": 8, "mask_init": "ones",
              "surrogate_period": 5},
    "attack": {"epochs": 6, "eval_limit": 128},
}

undef = dict(base, model={"arch": "desk4", "split_index": 2}, defense={"kind": "none"})
rec_u = run_experiment(config_from_dict(undef))[0]
u = rec_u.reports["black-box"]
print(f"undefended: psnr={u['psnr_mean']:.3f} ssim={u['ssim_mean']:.3f} "
      f"acc={u['prediction_accuracy']:.3f}")

cases = [
    ("D", dict(mask_lr=3e-3, prune={"lambda1": 1.0, "lambda2": 2.0}, beta=0.01,
               lip={"alphas": [0.5, 0.02, 0.001, 0.0005]})),
    ("E", dict(mask_lr=3e-3, prune={"lambda1": 1.0, "lambda2": 2.0}, beta=0.01,
               lip={"alphas": [0.1, 0.004, 0.0002, 0.0001]})),
    ("F", dict(mask_lr=3e-3, prune={"lambda1": 1.0, "lambda2": 2.0}, beta=0.0,
               use_adv=False, use_lip=False)),
]

for tag, tweaks in cases:
    t0 = time.time()
    patrol = dict(base, model={"arch": "desk4", "split_index": 4},
                  defense={"kind": "patrol"})
    patrol["train"] = dict(base["train"], **tweaks)
    rec = run_experiment(config_from_dict(patrol))[0]
    if rec.status != "completed":
        print(f"{tag}: {rec.status} {rec.error}")
        continue
    p = rec.reports["black-box"]
    run_dir = Path(rec.run_dir)
    man = json.loads((run_dir / "manifests" / "pruning.json").read_text())
    hist = [json.loads(l) for l in open(run_dir / "history.ndjson")]
    _, mask_state, _ = load_checkpoint(run_dir / "checkpoints" / "defended.pt")
    masks = SoftMaskSet.from_state_dict(mask_state)
    neg = int((masks.values < -1e-9).sum())
    zero = int((masks.values.abs() <= 1e-9).sum())
    print(f"{tag} ({time.time()-t0:.0f}s): "
          f"psnr={p['psnr_mean']:.3f} ({(u['psnr_mean']-p['psnr_mean'])/u['psnr_mean']:+.1%}) "
          f"ssim={p['ssim_mean']:.3f} ({(u['ssim_mean']-p['ssim_mean'])/u['ssim_mean']:+.1%}) "
          f"acc={p['prediction_accuracy']:.3f} compr={man['param_compression_edge']:.2f}")
    print(f"   masks: neg={neg} zero={zero} of {len(masks)}; "
          f"masked_acc_final={hist[-1]['eval_accuracy']:.3f} "
          f"k_final={[round(k,2) for k in hist[-1]['k_values']]}")
    print(f"   acc/epoch: {[round(h['eval_accuracy'],2) for h in hist]}")
    print(f"   spars/epoch: {[round(h['sparsity']['structure_ratio'],2) for h in hist]}")

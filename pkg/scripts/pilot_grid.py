"""Grid pilot over mask-pressure settings for the desk defense config."""
import json
import sys
import time
from pathlib import Path

from privprune.config import config_from_dict
from privprune.experiment import run_experiment

OUT = sys.argv[1]
SEED = 0

base = {
    "name": "grid",
    "output_dir": OUT,
    "seeds": [SEED],
    "dataset": {"train_size": 1536, "eval_size": 256, "attacker_size": 768,
                "resolution": 32, "num_classes": 10},
    "train": {"epochs": 12, "pretrain_epochs": 8, "mask_init": "ones",
              "surrogate_period": 5},
    "attack": {"epochs": 6, "eval_limit": 128},
}

undef = dict(base, model={"arch": "desk4", "split_index": 2}, defense={"kind": "none"})
rec_u = run_experiment(config_from_dict(undef))[0]
u = rec_u.reports["black-box"]
print(f"undefended: psnr={u['psnr_mean']:.3f} ssim={u['ssim_mean']:.3f} "
      f"acc={u['prediction_accuracy']:.3f} att={u['attack_accuracy']:.3f}")

for tag, mask_lr, lam1, lam2 in [
        ("A", 5e-3, 1.0, 1.0),
        ("B", 5e-3, 1.0, 10.0),
        ("C", 1e-2, 0.5, 1.0)]:
    t0 = time.time()
    patrol = dict(base, model={"arch": "desk4", "split_index": 4},
                  defense={"kind": "patrol"})
    patrol["train"] = dict(base["train"], mask_lr=mask_lr,
                           prune={"lambda1": lam1, "lambda2": lam2})
    rec = run_experiment(config_from_dict(patrol))[0]
    if rec.status != "completed":
        print(f"{tag}: {rec.status} {rec.error}")
        continue
    p = rec.reports["black-box"]
    man = json.loads((Path(rec.run_dir) / "manifests" / "pruning.json").read_text())
    hist = [json.loads(l) for l in open(Path(rec.run_dir) / "history.ndjson")]
    spars = [round(h["sparsity"]["structure_ratio"], 2) for h in hist]
    accs = [round(h["eval_accuracy"], 2) for h in hist]
    print(f"{tag} lr={mask_lr} l1={lam1} l2={lam2} ({time.time()-t0:.0f}s): "
          f"psnr={p['psnr_mean']:.3f} ({(u['psnr_mean']-p['psnr_mean'])/u['psnr_mean']:+.1%}) "
          f"ssim={p['ssim_mean']:.3f} ({(u['ssim_mean']-p['ssim_mean'])/u['ssim_mean']:+.1%}) "
          f"acc={p['prediction_accuracy']:.3f} att={p['attack_accuracy']:.3f} "
          f"compr={man['param_compression_edge']:.2f}")
    print(f"   sparsity/epoch: {spars}")
    print(f"   acc/epoch:      {accs}")

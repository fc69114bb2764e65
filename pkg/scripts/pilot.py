"""Pilot run for desk-scale defense settings: undefended split-2 vs the
defended 4-block pruned model, one seed, printing the directional metrics."""
import json
import sys
import time
from pathlib import Path

from privprune.config import config_from_dict
from privprune.experiment import run_experiment

OUT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/pilot"
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0
MASK_INIT = sys.argv[3] if len(sys.argv) > 3 else "normal"
MASK_LR = float(sys.argv[4]) if len(sys.argv) > 4 else 5e-3
LAMBDA1 = float(sys.argv[5]) if len(sys.argv) > 5 else 1.0
EPOCHS = int(sys.argv[6]) if len(sys.argv) > 6 else 10

base = {
    "name": "pilot",
    "output_dir": OUT,
    "seeds": [SEED],
    "dataset": {"train_size": 1536, "eval_size": 256, "attacker_size": 768,
                "resolution": 32, "num_classes": 10},
    "train": {"epochs": EPOCHS, "pretrain_epochs": 6, "mask_init": MASK_INIT,
              "mask_lr": MASK_LR, "surrogate_period": 5,
              "prune": {"lambda1": LAMBDA1}},
    "attack": {"epochs": 6, "eval_limit": 128},
}

t0 = time.time()
undef = dict(base, model={"arch": "desk4", "split_index": 2},
             defense={"kind": "none"})
cfg_u = config_from_dict(undef)
rec_u = run_experiment(cfg_u)[0]
t1 = time.time()
print(f"undefended: {rec_u.status} in {t1-t0:.0f}s")
print("  report:", json.dumps(rec_u.reports.get("black-box", {}), default=str)[:300])

patrol = dict(base, model={"arch": "desk4", "split_index": 4},
              defense={"kind": "patrol"})
cfg_p = config_from_dict(patrol)
rec_p = run_experiment(cfg_p)[0]
t2 = time.time()
print(f"patrol: {rec_p.status} in {t2-t1:.0f}s")
print("  report:", json.dumps(rec_p.reports.get("black-box", {}), default=str)[:300])
if rec_p.error:
    print("  error:", rec_p.error)

man = Path(rec_p.run_dir) / "manifests" / "pruning.json"
if man.exists():
    m = json.loads(man.read_text())
    print(f"  compression edge={m['param_compression_edge']:.3f} "
          f"total={m['param_compression_total']:.3f} "
          f"structures={m['mask_sparsity']['structure_ratio']:.3f}")

if rec_u.reports and rec_p.reports:
    u, p = rec_u.reports["black-box"], rec_p.reports["black-box"]
    for k in ("psnr_mean", "ssim_mean", "prediction_accuracy", "attack_accuracy", "mse_mean"):
        drop = (u[k] - p[k]) / u[k] if u[k] else float("nan")
        print(f"  {k}: undef={u[k]:.4f} patrol={p[k]:.4f} rel_drop={drop:+.3%}")
print(f"total {time.time()-t0:.0f}s")

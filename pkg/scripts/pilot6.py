"""Ablation trio at split 3 (attack headroom), two strength variants."""
import json
import sys
import time
from pathlib import Path

from privprune.config import config_from_dict
from privprune.experiment import run_experiment

OUT = sys.argv[1]
SEEDS = [int(s) for s in (sys.argv[2] if len(sys.argv) > 2 else "0,1").split(",")]

BASE = {
    "name": "abl3",
    "output_dir": OUT,
    "seeds": SEEDS,
    "dataset": {"train_size": 1536, "eval_size": 256, "attacker_size": 768,
                "resolution": 32, "num_classes": 10},
    "train": {
        "epochs": 12, "pretrain_epochs": 8,
        "mask_init": "normal", "mask_lr": 1.5e-3,
        "surrogate_period": 3, "surrogate_passes": 4, "surrogate_lr": 5e-3,
        "beta": 0.3,
        "prune": {"lambda1": 0.4, "lambda2": 0.4, "nonneg": True, "restart": True},
        "lip": {"alphas": [0.2, 0.008, 0.0004], "aggregation": "mean"},
    },
    "attack": {"epochs": 8, "lr": 5e-3, "batch_size": 64, "eval_limit": 128},
}


def run(tag, train_over=None):
    cfg = json.loads(json.dumps(BASE))
    cfg["model"] = {"arch": "desk4", "split_index": 3}
    cfg["defense"] = {"kind": "patrol"}
    if train_over:
        cfg["train"].update(train_over)
    t0 = time.time()
    recs = run_experiment(config_from_dict(cfg))
    out = {}
    for rec in recs:
        if rec.status != "completed":
            print(f"{tag} seed{rec.seed}: {rec.status} {rec.error}")
            continue
        r = rec.reports["black-box"]
        man = json.loads((Path(rec.run_dir) / "manifests" / "pruning.json").read_text())
        out[rec.seed] = (r["psnr_mean"], r["ssim_mean"], r["prediction_accuracy"],
                         man["param_compression_edge"])
    line = f"{tag:16s} ({time.time()-t0:4.0f}s):"
    for seed, (p, s, a, c) in sorted(out.items()):
        line += f"  s{seed}: psnr={p:.2f} ssim={s:.3f} acc={a:.2f} compr={c:.2f}"
    print(line)
    return out


t0 = time.time()
for variant, over in [("v1", {}),
                      ("v2-strong", {"beta": 1.0,
                                     "lip": {"alphas": [0.5, 0.02, 0.001],
                                             "aggregation": "mean"}})]:
    print(f"--- {variant} ---")
    only = run(f"{variant} prune-only", dict(over, use_adv=False, use_lip=False))
    lip = run(f"{variant} prune+lip", dict(over, use_adv=False))
    adv = run(f"{variant} prune+adv", dict(over, use_lip=False))
    for seed in SEEDS:
        if all(seed in d for d in (only, lip, adv)):
            print(f"  seed{seed}: lip<only psnr {lip[seed][0] < only[seed][0]} "
                  f"ssim {lip[seed][1] < only[seed][1]}; "
                  f"adv<only psnr {adv[seed][0] < only[seed][0]} "
                  f"ssim {adv[seed][1] < only[seed][1]}")
print(f"total {time.time()-t0:.0f}s")

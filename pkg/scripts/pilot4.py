"""Pilot with restart + nonneg + normal init and rebalanced strengths."""
import json
import sys
import time
from pathlib import Path

from privprune.config import config_from_dict
from privprune.experiment import run_experiment

OUT = sys.argv[1]
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0

BASE = {
    "name": "desk",
    "output_dir": OUT,
    "seeds": [SEED],
    "dataset": {"train_size": 1536, "eval_size": 256, "attacker_size": 768,
                "resolution": 32, "num_classes": 10},
    "train": {
        "epochs": 12, "pretrain_epochs": 8,
        "mask_init": "normal", "mask_lr": 1.5e-3,
        "surrogate_period": 5, "surrogate_passes": 2, "surrogate_lr": 5e-3,
        "beta": 0.05,
        "prune": {"lambda1": 0.4, "lambda2": 0.4, "nonneg": True, "restart": True},
        "lip": {"alphas": [0.05, 0.002, 0.0001, 0.00005], "aggregation": "mean"},
    },
    "attack": {"epochs": 12, "lr": 5e-3, "batch_size": 64, "eval_limit": 128,
               "whitebox_steps": 800, "whitebox_step_size": 0.1, "tv_weight": 2.0},
}


def run(tag, model_over, defense, train_over=None, attack_mode="black-box"):
    cfg = json.loads(json.dumps(BASE))
    cfg["model"] = model_over
    cfg["defense"] = defense
    cfg["attack"]["mode"] = attack_mode
    if train_over:
        cfg["train"].update(train_over)
    t0 = time.time()
    rec = run_experiment(config_from_dict(cfg))[0]
    dt = time.time() - t0
    if rec.status != "completed":
        print(f"{tag}: {rec.status} {rec.error}")
        return None
    man_path = Path(rec.run_dir) / "manifests" / "pruning.json"
    man = json.loads(man_path.read_text()) if man_path.exists() else None
    line = f"{tag:16s} ({dt:5.0f}s):"
    for mode, r in rec.reports.items():
        line += (f" {mode[:5]}: psnr={r['psnr_mean']:.2f} ssim={r['ssim_mean']:.3f} "
                 f"acc={r['prediction_accuracy']:.3f} att={r['attack_accuracy']:.2f}")
    if man:
        line += f" compr={man['param_compression_edge']:.2f}"
    print(line)
    hist_path = Path(rec.run_dir) / "history.ndjson"
    if hist_path.exists() and defense.get("kind") == "patrol":
        recs = [json.loads(l) for l in open(hist_path)]
        if recs and recs[0].get("sparsity"):
            print("   spars:", [round(r["sparsity"]["structure_ratio"], 2) for r in recs])
            print("   acc:  ", [round(r["eval_accuracy"], 2) for r in recs])
            print("   adv:  ", [round(r["adv_loss"], 2) for r in recs])
    return rec.reports


t_start = time.time()
undef = run("undef-split2", {"arch": "desk4", "split_index": 2},
            {"kind": "none"}, attack_mode="both")
patrol = run("patrol", {"arch": "desk4", "split_index": 4}, {"kind": "patrol"})
prune_only = run("prune-only", {"arch": "desk4", "split_index": 4},
                 {"kind": "patrol"}, {"use_adv": False, "use_lip": False})
prune_lip = run("prune+lip", {"arch": "desk4", "split_index": 4},
                {"kind": "patrol"}, {"use_adv": False})
prune_adv = run("prune+adv", {"arch": "desk4", "split_index": 4},
                {"kind": "patrol"}, {"use_lip": False})
p3 = run("patrol-split3", {"arch": "desk4", "split_index": 3}, {"kind": "patrol"})
p2 = run("patrol-split2", {"arch": "desk4", "split_index": 2}, {"kind": "patrol"})

if all(x is not None for x in (undef, patrol, prune_only, prune_lip, prune_adv, p3, p2)):
    u = undef["black-box"]
    print("\n== criterion quantities ==")
    for tag, rep in [("patrol", patrol), ("prune-only", prune_only),
                     ("prune+lip", prune_lip), ("prune+adv", prune_adv),
                     ("split3", p3), ("split2", p2)]:
        r = rep["black-box"]
        print(f"{tag:12s} psnr_drop={(u['psnr_mean']-r['psnr_mean'])/u['psnr_mean']:+.1%} "
              f"ssim_drop={(u['ssim_mean']-r['ssim_mean'])/u['ssim_mean']:+.1%} "
              f"acc_drop={(u['prediction_accuracy']-r['prediction_accuracy'])*100:+.1f}pts")
    print(f"whitebox {undef['white-box']['psnr_mean']:.2f} >= blackbox {u['psnr_mean']:.2f}: "
          f"{undef['white-box']['psnr_mean'] >= u['psnr_mean']}")
    print(f"lip<only: {prune_lip['black-box']['psnr_mean'] < prune_only['black-box']['psnr_mean']}"
          f" adv<only: {prune_adv['black-box']['psnr_mean'] < prune_only['black-box']['psnr_mean']}")
    print(f"split3 {p3['black-box']['psnr_mean']:.2f} < split2 {p2['black-box']['psnr_mean']:.2f}: "
          f"{p3['black-box']['psnr_mean'] < p2['black-box']['psnr_mean']}")
print(f"total {time.time()-t_start:.0f}s")

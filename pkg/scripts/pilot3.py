"""Full acceptance-shaped pilot for one seed: all defense arms + both attacks."""
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
        "mask_init": "ones", "mask_lr": 2e-3,
        "surrogate_period": 5, "surrogate_passes": 2, "surrogate_lr": 5e-3,
        "beta": 0.02,
        "prune": {"lambda1": 1.5, "lambda2": 1.0, "nonneg": True},
        "lip": {"alphas": [0.5, 0.02, 0.001, 0.0005], "aggregation": "mean"},
    },
    "attack": {"epochs": 12, "lr": 5e-3, "batch_size": 64, "eval_limit": 128,
               "whitebox_steps": 300, "whitebox_step_size": 0.05},
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
    out = {}
    for mode, rep in rec.reports.items():
        out[mode] = rep
    man_path = Path(rec.run_dir) / "manifests" / "pruning.json"
    man = json.loads(man_path.read_text()) if man_path.exists() else None
    bb = out.get("black-box", {})
    extra = f" compr={man['param_compression_edge']:.2f}" if man else ""
    print(f"{tag:16s} ({dt:5.0f}s): " + " ".join(
        f"{m[:5]}: psnr={r['psnr_mean']:.2f} ssim={r['ssim_mean']:.3f} "
        f"acc={r['prediction_accuracy']:.3f}" for m, r in out.items()) + extra)
    return out, man


t_start = time.time()
undef, _ = run("undef-split2", {"arch": "desk4", "split_index": 2},
               {"kind": "none"}, attack_mode="both")
patrol, man = run("patrol", {"arch": "desk4", "split_index": 4}, {"kind": "patrol"})
prune_only, _ = run("prune-only", {"arch": "desk4", "split_index": 4},
                    {"kind": "patrol"}, {"use_adv": False, "use_lip": False})
prune_lip, _ = run("prune+lip", {"arch": "desk4", "split_index": 4},
                   {"kind": "patrol"}, {"use_adv": False})
prune_adv, _ = run("prune+adv", {"arch": "desk4", "split_index": 4},
                   {"kind": "patrol"}, {"use_lip": False})
p3, _ = run("patrol-split3", {"arch": "desk4", "split_index": 3}, {"kind": "patrol"})
p2, _ = run("patrol-split2", {"arch": "desk4", "split_index": 2}, {"kind": "patrol"})

u = undef["black-box"]
print("\n== criterion quantities ==")
for tag, rep in [("patrol", patrol), ("prune-only", prune_only),
                 ("prune+lip", prune_lip), ("prune+adv", prune_adv),
                 ("split3", p3), ("split2", p2)]:
    r = rep["black-box"]
    print(f"{tag:12s} psnr_drop={(u['psnr_mean']-r['psnr_mean'])/u['psnr_mean']:+.1%} "
          f"ssim_drop={(u['ssim_mean']-r['ssim_mean'])/u['ssim_mean']:+.1%} "
          f"acc_drop={(u['prediction_accuracy']-r['prediction_accuracy'])*100:+.1f}pts "
          f"att_drop={(u['attack_accuracy']-r['attack_accuracy'])/u['attack_accuracy'] if u['attack_accuracy'] else float('nan'):+.1%}")
print(f"whitebox vs blackbox undefended: {undef['white-box']['psnr_mean']:.2f} vs {u['psnr_mean']:.2f}")
print(f"ablation: lip<only: {prune_lip['black-box']['psnr_mean'] < prune_only['black-box']['psnr_mean']}, "
      f"adv<only: {prune_adv['black-box']['psnr_mean'] < prune_only['black-box']['psnr_mean']}")
print(f"depth: split3 psnr {p3['black-box']['psnr_mean']:.2f} < split2 {p2['black-box']['psnr_mean']:.2f}: "
      f"{p3['black-box']['psnr_mean'] < p2['black-box']['psnr_mean']}")
print(f"total {time.time()-t_start:.0f}s")

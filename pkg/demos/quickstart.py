"""Source training, GMM distillation and source-free adaptation on a small shift.

Runs in well under a minute:

    python demos/quickstart.py
"""

from dataclasses import replace

from sfsseg.cli import build_datasets, resolve_config
from sfsseg.evaluation import evaluate_model
from sfsseg.model import SegmentationModel
from sfsseg.pipeline import Pipeline

cfg = resolve_config({
    "domain": {"width": 24, "height": 24, "slices_per_volume": 4,
               "gain": [1.0, 0.6, 1.1, 0.7, 0.9], "bias": [1.0, 1.5, 1.2, 1.6, 0.8]},
    "data": {"seed": 3, "n_source": 96, "n_target": 64, "n_test": 32},
    "model": {"embed_dim": 8, "encoder_channels": [8, 16], "skip_connections": True},
    "train": {"iterations": 600, "batch_size": 8, "lr": 0.003},
    "adapt": {"iterations": 300, "batch_size": 4, "lr": 2e-4, "rho": 0.97, "t": 3, "pseudo_mode": "source-prior"},
})
data = build_datasets(cfg)

pipe = Pipeline(SegmentationModel(cfg.model, seed=0), cfg.train, cfg.adapt)
losses = pipe.train_source(data["source"])
print(f"source CE {losses[:20].mean():.3f} -> {losses[-20:].mean():.3f}")
print(f"source-domain test Dice {evaluate_model(pipe.model, data['source_test'])[0].macro_dice:.3f}")

# the GMM is all that crosses into adaptation; the source set can go
gmm = pipe.prepare_internal(data["source"])
del data["source"], data["source_test"]
print("pseudo-class priors", gmm.priors.round(3).tolist())

report = pipe.adapt(data["target"].without_labels(), eval_data=data["test"])
pre, post = report.pre_metrics, report.post_metrics
print(f"target Dice {pre.macro_dice:.3f} -> {post.macro_dice:.3f}")
print(f"W(target, pseudo) {report.bound_pre.w_target_pseudo:.3f} -> {report.bound_post.w_target_pseudo:.3f}")
print("label moves (% of pre-adaptation class; of those, % that left the true class / reached it)")
for r in report.migration.rows():
    if r["from"] != r["to"] and r["pct_switched"]:
        print(f"  {r['from']} -> {r['to']}: {r['pct_switched']:5.1f}%  wrong {r['pct_switched_wrong']:5.1f}"
              f"  right {r['pct_switched_right']:5.1f}")

"""
Rank first, then calibrate
==========================

Phase one learns to order images from synthetic groups only. Phase two
takes that branch and fits it to absolute scores with squared error.
This is a scaled-down run (about a minute on one core); the acceptance
suite runs the full-size version.
"""

import numpy as np

from siamrank.corpus import build_corpus, synthetic_references
from siamrank.dataset import LabeledSample, synthetic_mos
from siamrank.metrics import evaluate_model, score_histograms
from siamrank.trainer import TrainConfig, finetune_regression, train_ranking

# %%
# 16 references; 12 train the ranker, 4 are never seen until evaluation.
refs = synthetic_references(16, size=96, seed=1)
ids = list(refs)
corpus = build_corpus(refs, kinds=("gaussian_blur",), seed=1)
train, held_out = corpus.subset(ids[:12]), corpus.subset(ids[12:])
print(f"train groups {len(train.groups)}, held-out groups {len(held_out.groups)}")

# %%
# Phase one. Only the within-group level order is used.
ckpt, report = train_ranking(TrainConfig(iterations=800, lr_step=400), train)
print(f"ranking: mean per-pair loss {report.losses[0]:.3f} -> {report.final_loss():.4f}, "
      f"{report.forward_count} forwards, {report.wall_time:.0f}s")

# %%
# Do scores on unseen references fall with blur level?
hist = score_histograms(ckpt.spec, ckpt.params, held_out, crops_per_image=30)
print("held-out level means:", np.round(hist.level_means("gaussian_blur"), 3))
print(f"SROCC(score, level rank): {hist.level_srocc('gaussian_blur'):.3f}")

# %%
# Phase two. A monotone stand-in for opinion scores: 100 for level 0
# down to 0 for level 4.
def labeled(c):
    return [LabeledSample(im, synthetic_mos(k, g.n), f"{g.reference_id}/{k}", g.reference_id)
            for g in c.groups for k, im in enumerate(g.distorted)]


tuned, ft = finetune_regression(ckpt, labeled(train), TrainConfig.finetune_defaults(iterations=500))
result = evaluate_model(tuned.spec, tuned.params, labeled(held_out), crops_per_image=30)
print(f"fine-tune: squared error {ft.losses[0]:.0f} -> {ft.final_loss():.0f}")
print("held-out:", result.summary())
for row in result.per_image_scores[:5]:
    print(f"  {row[0]:<12} y={row[1]:6.1f}  y_hat={row[2]:6.1f}")

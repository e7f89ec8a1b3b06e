"""
Convergence at equal compute
============================

Both strategies get the same number of forward passes per iteration.
The all-pairs batch turns 10 images into 20 comparable pairs; random
sampling turns the same 10 forwards into 5 pairs. The probe loss is
measured on fixed centre crops of every training group.
"""

import sys

from siamrank.corpus import build_corpus, synthetic_references
from siamrank.trainer import RankingProbe, TrainConfig, train_ranking

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 600

corpus = build_corpus(synthetic_references(12, size=96, seed=2), kinds=("gaussian_blur",), seed=2)
probe = RankingProbe(corpus.groups, 48)

reports = {}
for strategy in ("efficient", "randompair"):
    cfg = TrainConfig(strategy=strategy, iterations=iterations, probe_every=max(iterations // 12, 1))
    _, reports[strategy] = train_ranking(cfg, corpus, probe=probe)

# %%
print(f"{'forwards':>9}{'efficient':>12}{'random pairs':>14}")
for (it, fc, a), (_, _, b) in zip(reports["efficient"].probe, reports["randompair"].probe):
    print(f"{fc:>9}{a:>12.4f}{b:>14.4f}")

# %%
# How much of the budget does the efficient run need to match the
# baseline's final probe loss?
target = reports["randompair"].probe[-1][2]
reach = next((fc for _, fc, loss in reports["efficient"].probe if loss <= target), None)
total = reports["efficient"].forward_count
if reach is not None:
    print(f"\nefficient reaches {target:.4f} after {reach} of {total} forwards ({reach / total:.0%})")

# %%
# Optional figure (needs matplotlib).
try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    for name, rep in reports.items():
        plt.plot([p[1] for p in rep.probe], [p[2] for p in rep.probe], label=name)
    plt.xlabel("forward passes")
    plt.ylabel("probe ranking loss")
    plt.legend()
    plt.savefig("convergence.png", dpi=120)
    print("saved convergence.png")

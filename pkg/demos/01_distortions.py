"""
Ranked images from one reference
================================

Distorting a pristine image at increasing strength gives a set of images
whose quality order is known without asking anyone. This script builds
such groups for the three distortion kinds and checks the order with PSNR.
"""

import sys
from pathlib import Path

import numpy as np

from siamrank.distortion import KINDS, DistortionSpec, psnr, synthesize_ranked_group, synthetic_reference
from siamrank.pgm import write_pgm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/distortions")

# %%
# A procedural reference. Dead-leaves scenes (stacked opaque discs with
# power-law radii) have edges at every scale, much like photographs.
reference = synthetic_reference(seed=0, size=128)
print(f"reference: {reference.shape}, mean {reference.mean():.3f}, std {reference.std():.3f}")

# %%
# One group per kind on the default five-level grid, mildest first.
groups = {kind: synthesize_ranked_group(reference, DistortionSpec(kind, seed=1), "scene0") for kind in KINDS}

print(f"\n{'kind':<16}" + "".join(f"{'level ' + str(k):>10}" for k in range(5)))
for kind, g in groups.items():
    print(f"{kind:<16}" + "".join(f"{psnr(reference, d):>10.2f}" for d in g.distorted))

# %%
# PSNR falls along every row, so level index is a valid quality order.
# Each group of n images yields n(n-1)/2 ordered pairs for free.
g = groups["gaussian_blur"]
print(f"\n{g.n} levels -> {len(g.ordered_pairs())} ordered pairs, first few: {g.ordered_pairs()[:4]}")

# %%
# Save everything as 8-bit PGM for a look in any image viewer.
write_pgm(out / "reference.pgm", reference)
for kind, g in groups.items():
    for k, d in enumerate(g.distorted):
        write_pgm(out / kind / f"level_{k}.pgm", d)
print(f"\nwrote {1 + sum(g.n for g in groups.values())} images under {out}/")

# %%
# A flat image survives JPEG-style coding at any quality: only the block
# mean (DC term) is non-zero and its quantisation step is small.
flat = np.full((32, 32), 0.42)
worst = np.abs(synthesize_ranked_group(flat, DistortionSpec("jpeg_proxy")).distorted[-1] - flat).max()
print(f"flat image after quality 10: max change {worst * 255:.2f}/255")

"""
All pairs from one backward pass
================================

A Siamese ranking network normally runs both branches for every pair.
When the branches share weights, the gradient of a hinge loss summed over
all pairs only depends on one coefficient per image. Every image then
needs one forward and the batch needs one backward.
"""

import numpy as np

from siamrank.distortion import DistortionSpec, synthesize_ranked_group, synthetic_reference
from siamrank.ranking_loss import (
    ComparabilityMatrix,
    batch_loss,
    efficient_gradient,
    max_relative_difference,
    naive_pairwise_gradient,
    output_gradient_coefficients,
)
from siamrank.tensor_core import default_spec, init_params

# %%
# Three scores where image 0 is best and image 2 worst. With margin 0.5,
# pair (0,1) is violated by 0.7, pair (0,2) by 0.3, pair (1,2) by 0.1.
labels = ComparabilityMatrix.full_order(3, eps=0.5)
scores = np.array([1.0, 1.2, 0.8])
coeffs = output_gradient_coefficients(scores, labels)
print("labels l_ij:\n", labels.labels)
print("batch loss:", batch_loss(scores, labels))
print("dL/ds (one coefficient per image):", coeffs.c)

# %%
# The coefficients always sum to zero: raising every score by the same
# amount cannot change a loss built from score differences.
print("sum of coefficients:", coeffs.c.sum())

# %%
# Now through a real network. A six-level blur group, a 48x48 crop, and
# float64 weights so the two paths can be compared to roundoff.
ref = synthetic_reference(3, 96)
group = synthesize_ranked_group(ref, DistortionSpec("gaussian_blur", (0.5, 1, 1.5, 2.5, 3.5, 5)))
batch = np.stack([d[24:72, 24:72] for d in group.distorted])[:, None]
spec = default_spec(48)
params = init_params(spec, seed=0, dtype=np.float64)
labels = ComparabilityMatrix.full_order(group.n)

fast = efficient_gradient(spec, params, batch, labels)
slow = naive_pairwise_gradient(spec, params, batch, labels)
print(f"\nloss {fast.loss:.6f} vs {slow.loss:.6f}")
print(f"forwards: efficient {fast.forward_count}, per-pair {slow.forward_count}")
print(f"max relative gradient difference: {max_relative_difference(fast.grads, slow.grads):.1e}")

# %%
# For one group of n levels the per-pair route costs n^2 - n forwards,
# so the saving grows linearly with group size.
print(f"\n{'n':>3}{'efficient':>11}{'per-pair':>10}{'ratio':>7}")
for n in (2, 4, 6, 8, 12):
    print(f"{n:>3}{n:>11}{n * n - n:>10}{n - 1:>7}")

"""From point annotations to training masks, and how the segmentation loss behaves.

Run: python demos/01_masks_and_loss.py
"""
import numpy as np

from cellularity import LossConfig, PointAnnotationSet, synthesize_masks, total_loss
from cellularity.losses import gradient_check

# A pathologist clicks nucleus centers; each click becomes a 15 px disk.
clicks = PointAnnotationSet("demo", [(20, 20, "Malignant"), (28, 22, "Malignant"),
                                     (50, 40, "Lymphocyte"), (10, 55, "Normal")])
masks = synthesize_masks(clicks, 64, 64)
for name in masks.channels:
    print(f"{name:<11} {int(masks.channel(name).sum()):5d} px")

# The loss mixes cross-entropy with a soft Jaccard term. A prediction equal to
# the masks scores about -alpha; a blurry guess scores worse.
truth = {c: masks.channel(c) for c in masks.channels}
perfect = total_loss(truth, truth)
blurry = total_loss(truth, {c: np.full((64, 64), 0.5) for c in masks.channels})
print(f"loss at target {perfect:.4f}, loss of a flat 0.5 guess {blurry:.4f}")

# Weighting Malignant more heavily changes the loss only through relative weights.
cfg = LossConfig()
assert abs(total_loss(truth, truth, cfg.scaled(10)) - perfect) < 1e-12

# The analytic gradient agrees with finite differences.
check = gradient_check(size=16, trials=300, seed=0)
print(f"gradient check over {check['trials']} coordinates: worst relative error {check['max_rel_error']:.2e}")

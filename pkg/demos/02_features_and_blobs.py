"""What the 81 hand-crafted features see in a probability map.

Run: python demos/02_features_and_blobs.py
"""
import numpy as np

from cellularity import extract_features, log_blobs
from cellularity.features import describe_feature
from cellularity.synth import SynthParams, make_patch

patch = make_patch(SynthParams(seed=2), index=0)
malignant = patch.maps.channel("Malignant")
n_planted = sum(1 for *_, c in patch.annotations.points if c == "Malignant")
print(f"{patch.patch_id}: {n_planted} malignant nuclei planted, cellularity {patch.true_cellularity:.3f}")

# Blob detection finds roughly one blob per nucleus; touching nuclei can merge.
for t in (0.02, 0.24, 0.5):
    print(f"  blobs with center value > {t}: {len(log_blobs(malignant, t))}")

features = extract_features(patch.maps)
print(f"{features.size} features; the largest few:")
for i in np.argsort(-features)[:5]:
    print(f"  {describe_feature(int(i)):<32} {features[i]:10.2f}")

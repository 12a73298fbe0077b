"""Train the boosted-tree regressor on synthetic patches and measure agreement.

Run: python demos/03_train_and_evaluate.py   (about ten seconds)
"""
import numpy as np

from cellularity import GbtParams, ScorePairSet, extract_features, feature_importance, fit
from cellularity.features import describe_feature
from cellularity.metrics import evaluation_report
from cellularity.synth import SynthParams, generate

patches = generate(SynthParams(seed=7), 300)
X = np.array([extract_features(p.maps) for p in patches])
y = np.array([p.true_cellularity for p in patches])

model = fit(X[:240], y[:240], GbtParams(n_rounds=300))
print(f"training MSE {model.train_mse[0]:.4f} -> {model.train_mse[-1]:.6f}")

held_out = ScorePairSet(model.predict(X[240:]), y[240:])
report = evaluation_report(held_out, n_boot=500, seed=0)
for name in ("mse", "kappa4", "icc21"):
    lo, hi = report[name]["ci95"]
    print(f"{name:<7} {report[name]['point']:.4f}  95% CI [{lo:.4f}, {hi:.4f}]")

print("most useful features:")
for idx, gain in feature_importance(model)[:5]:
    print(f"  {describe_feature(idx):<32} gain {gain:.4f}")

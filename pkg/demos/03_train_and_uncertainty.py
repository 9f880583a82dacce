"""Fit the toy model to one phantom, then ask it how sure it is with Monte Carlo dropout.

With the default 700 iterations this takes a few minutes on one CPU core.
"""

import argparse
from pathlib import Path

import numpy as np

from mcswinu.metrics import evaluate
from mcswinu.model import ModelConfig
from mcswinu.train import TrainConfig, finetune
from mcswinu.uncertainty import export_uncertainty, mc_predict, vote
from mcswinu.volumes import CLASS_NAMES, AugmentConfig, PhantomSpec, generate_phantom

parser = argparse.ArgumentParser()
parser.add_argument("--iterations", type=int, default=700)
parser.add_argument("--samples", type=int, default=10)
parser.add_argument("--threshold", type=int, default=5)
parser.add_argument("--out", default="demo_out/uncertainty")
args = parser.parse_args()

vol, lab = generate_phantom(PhantomSpec(), 0)
cfg = TrainConfig(iterations=args.iterations, validate_every=100)
model, log = finetune([(vol, lab)], [(vol, lab)], ModelConfig(), cfg, AugmentConfig.identity(), progress=print)
print(f"best validation Dice {log.best_dice:.3f} at iteration {log.best_iteration}")

stack = mc_predict(model, vol, samples=args.samples, seed=0)
umap = vote(stack, args.threshold)
report = evaluate({"phantom": umap.consensus}, {"phantom": lab})
print("\nconsensus of the dropout samples vs ground truth")
print(report.table())

# where does the model hesitate?
print(f"\n{int(umap.uncertain.sum())} voxels have fewer than {args.threshold} of {args.samples} samples agreeing")
for c, name in enumerate(CLASS_NAMES):
    inside = lab.data == c
    print(f"  {name:<12} mean agreement {umap.agreement[inside].mean():5.2f}   "
          f"uncertain {umap.uncertain[inside].mean():6.2%}")
wrong = umap.consensus.data != lab.data
if wrong.any():
    print(f"mean agreement on misclassified voxels {umap.agreement[wrong].mean():.2f} "
          f"vs {umap.agreement[~wrong].mean():.2f} on correct ones")

files = export_uncertainty(umap, Path(args.out) / "phantom")
z = int(np.argwhere(lab.data == 5)[:, 0].mean())
print(f"\nwrote {files['consensus'].name}, {files['agreement'].name}, {files['uncertain'].name} "
      f"and {len(files['heatmaps'])} heatmap slices; the tumour sits on {files['heatmaps'][z].name}")

"""Self-supervised pre-training on unlabeled phantoms, then fine-tuning from both starts.

Runs a small version of the comparison in the acceptance suite: one seed, short budgets.
"""

import argparse
import tempfile
from pathlib import Path

from mcswinu.model import ModelConfig, save_checkpoint
from mcswinu.pretrain import PretrainConfig, make_pretext_batch, pretrain, rotate
from mcswinu.train import TrainConfig, finetune
from mcswinu.volumes import AugmentConfig, PhantomSpec, generate_phantom

parser = argparse.ArgumentParser()
parser.add_argument("--unlabeled", type=int, default=16)
parser.add_argument("--pretrain-iterations", type=int, default=300)
parser.add_argument("--finetune-iterations", type=int, default=300)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

unlabeled = [generate_phantom(PhantomSpec(), 1000 + s)[0] for s in range(args.unlabeled)]

batch = make_pretext_batch(unlabeled, PretrainConfig(), seed=0)
print(f"one pretext batch: {len(batch.originals)} sub-volumes -> {len(batch.views)} views")
print(f"  rotation targets {batch.rotations.tolist()} about axes {batch.axes.tolist()}")
print(f"  cut-out fraction per view {[round(float(m.mean()), 3) for m in batch.masks]}")
assert (rotate(batch.originals[0], batch.rotations[0], batch.axes[0]) == batch.targets[0]).all()

result = pretrain(unlabeled, ModelConfig(), PretrainConfig(iterations=args.pretrain_iterations, seed=args.seed),
                  progress=print)

labeled = [generate_phantom(PhantomSpec(), s) for s in (10, 11)]
held_out = [generate_phantom(PhantomSpec(), s) for s in (20, 21)]
with tempfile.TemporaryDirectory() as tmp:
    ckpt = Path(tmp) / "pretrained.ckpt"
    save_checkpoint(result.model, ckpt)
    scores = {}
    for init in ("random", str(ckpt)):
        cfg = TrainConfig(iterations=args.finetune_iterations, validate_every=min(50, args.finetune_iterations),
                          seed=args.seed, init=init)
        _, log = finetune(labeled, held_out, ModelConfig(), cfg, AugmentConfig())
        scores["random" if init == "random" else "pretrained"] = log.best_dice
print(f"\nbest held-out Dice with 2 labeled phantoms: random init {scores['random']:.4f}, "
      f"pre-trained encoder {scores['pretrained']:.4f}")

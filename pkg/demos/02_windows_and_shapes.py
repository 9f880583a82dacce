"""Walk a 32^3 patch through the encoder and look at the shifted-window attention mask."""

import numpy as np
import torch

from mcswinu.model import ModelConfig, count_parameters, init_model, patch_partition, shifted_window_mask

cfg = ModelConfig()
model = init_model(cfg, seed=0)
print(f"toy model: embed {cfg.embed_dim}, depths {cfg.depths}, heads {cfg.num_heads}, window {cfg.window_size}")
print(f"parameters: {count_parameters(model):,}")

patch = np.random.default_rng(0).standard_normal(cfg.input_shape).astype(np.float32)
tokens = patch_partition(model, patch)
print(f"patch {cfg.input_shape} -> token grid {tokens.spatial} x {tokens.tokens.shape[-1]} channels")

with torch.no_grad():
    feats = model.encoder(torch.from_numpy(patch)[None, None])
for i, f in enumerate(feats):
    print(f"  stage {i}: {tuple(f.shape[1:])}")

# the shifted grid of the first stage: 16^3 tokens, 4^3 windows, shift 2
mask = shifted_window_mask((16, 16, 16), torch.ones(16, 16, 16, dtype=torch.bool), (4, 4, 4), (2, 2, 2))
blocked = (mask < 0).float().mean(dim=(1, 2))
print(f"\n{mask.shape[0]} windows after the cyclic shift")
print(f"windows with no blocked pairs: {int((blocked == 0).sum())}")
print(f"largest blocked fraction in a window (corner window, 8 wrapped regions): {float(blocked.max()):.3f}")

with torch.no_grad():
    logits = model(torch.from_numpy(patch)[None, None])
print(f"\nlogits {tuple(logits.shape)}; sigmoid probabilities in "
      f"[{float(model.probabilities(logits).min()):.3f}, {float(model.probabilities(logits).max()):.3f}]")

"""Inference paths: full-volume generation, hierarchical encoding,
reconstruction, interpolation, and a latent direction for a structure
volume (miniature training so it finishes quickly).
"""

import numpy as np

from slabgan.inference import (encode_full, fit_direction, generate_full,
                               interpolate, r_squared, reconstruct,
                               ridge_predict, traverse)
from slabgan.networks import desk_config
from slabgan.phantoms import phantom_dataset
from slabgan.training import init_train_state, train_step

cfg = desk_config(full_resolution=32, latent_dim=16, base_channels=4)
vols, labels, records = phantom_dataset(30, extents=(32, 32, 32), base_seed=60)
state = init_train_state(cfg, seed=11)
for step in range(120):
    idx = state.rng.choice(24, size=2, replace=False)
    train_step(state, [vols[i] for i in idx])
print("trained 120 miniature steps")

z = np.random.default_rng(4).standard_normal(cfg.latent_dim).astype(np.float32)
vol = generate_full(state.nets, z)
print(f"generated volume {vol.shape}, range [{vol.min():.2f}, {vol.max():.2f}]")

code = encode_full(state.nets, vols[0])
print(f"encoded latent length {code.z.shape[0]}, |z| = {np.linalg.norm(code.z):.2f}")

rec = reconstruct(state.nets, vols[0])
print(f"reconstruction mean |error| = {np.abs(rec - vols[0][None]).mean():.4f}")

path = interpolate(state.nets, z, code.z, steps=5)
print(f"interpolation endpoints exact: "
      f"{np.array_equal(path[0], generate_full(state.nets, z))} / "
      f"{np.array_equal(path[-1], generate_full(state.nets, code.z))}")

# latent direction for body volume, fitted on encoded training phantoms
latents = np.stack([encode_full(state.nets, v).z for v in vols[:24]])
targets = np.array([r.volumes["body"] for r in records[:24]], float)
direction = fit_direction(latents, targets, target_name="body_volume",
                          ridge_lambda=1.0)
preds = ridge_predict(latents, direction.coef, direction.bias)
print(f"direction fit: train R^2 = {r_squared(targets, preds):.3f}")
_, walk = traverse(state.nets, z, direction, offsets=[-2, -1, 0, 1, 2])
print("predicted body volume along the direction walk:",
      [f"{p:.0f}" for p in walk])

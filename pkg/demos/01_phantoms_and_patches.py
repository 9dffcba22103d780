"""
Synthetic volumes and the two patch samplers.

A phantom is a head-shaped volume with four modality grids and a nested
tumor whose class shares follow typical glioma proportions. Healthy tissue
dominates, so a sampler that picks voxels uniformly sees almost no tumor;
the balanced sampler picks the class first.

    python demos/01_phantoms_and_patches.py
"""

import numpy as np

from tumorseg import datapipe as dp

vol = dp.make_phantom(seed=0)
print(f"phantom {vol.patient_id}: dims (X, Y, Z) = {vol.dims}")
hist = vol.label_histogram()
print("brain-voxel label shares:", np.round(hist.fractions, 4))

prepped = dp.preprocess(vol)
mask = vol.brain_mask
for c, name in enumerate(vol.modalities):
    vals = prepped.data[c][mask]
    print(f"  {name:5s} after clamp + standardize: mean {vals.mean():+.2e}, sd {vals.std():.3f}")

for mode in ("natural", "balanced"):
    ps = dp.sample_patches([prepped], mode, size=33, count=5000, seed=1)
    print(f"{mode:8s} sampler, 5000 patches of 33x33:", np.round(ps.histogram().fractions, 3))

ps = dp.flip_augment(dp.sample_patches([prepped], "balanced", 33, 4, seed=2), enabled=True)
p = ps.patches()
print("flip augmentation doubles the set:", len(ps), "patches;",
      "mirrored copy equals reversed columns:", bool(np.array_equal(p[4], p[0][:, :, ::-1])))

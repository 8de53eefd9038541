"""Where do three different architectures look?

Pretrains a small heterogeneous pool on the digits subset, computes a
normalised CAM per auxiliary for a handful of training images and splits
each map into the region every architecture agrees on (meta mask) and the
region only one of them attends to (hetero mask). A figure is written to
``demos/out/cam_consensus.png``.

    python demos/01_cam_consensus.py
"""
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from metadd import (ArchitectureSpec, AuxiliaryPool, Schedule, cam_variance, freeze, hetero_mask, meta_mask,
                    pretrain)
from metadd.data import ingest_dataset
from metadd.evaluate import cam_stacks
from metadd.masks import erased_fraction

OUT = os.path.join(os.path.dirname(__file__), "out")

torch.set_num_threads(max(1, os.cpu_count() or 1))
data = ingest_dataset("digits", classes=[3, 5, 8], resolution=16)
print(f"digits 3/5/8: {len(data.train_y)} train, {len(data.val_y)} val images at 16 px")

specs = [
    (ArchitectureSpec("conv-residual", 8, 16, 3, 16, in_channels=1), 0.05),
    (ArchitectureSpec("conv-mobile", 8, 16, 3, 16, in_channels=1), 0.05),
    (ArchitectureSpec("attention", 4, 64, 3, 16, patch_size=4, in_channels=1), 0.01),
]
auxes = []
for seed, (spec, lr) in enumerate(specs):
    sched = Schedule(lr=lr, warmup=2, decay=18, batch_size=32, unit="epoch")
    pm = pretrain(spec, (data.train_x, data.train_y), sched, seed, val=(data.val_x, data.val_y))
    print(f"  {spec.arch_id:<24} val top-1 {pm.provenance['final_top1']:.3f}")
    auxes.append(freeze(pm))
pool = AuxiliaryPool(auxes)

# one stack of M maps per image, each map min-max scaled to [0, 1]
x, y = data.train_x[:6], data.train_y[:6]
maps = cam_stacks(pool, x, y)
var = cam_variance(maps, reduce=False)
mu = meta_mask(maps)

print("\nimage  label  cam variance  meta px  " + "  ".join(f"hetero[{m}]" for m in range(pool.M)))
for i in range(len(y)):
    het = [erased_fraction(hetero_mask(maps[i], m, mu[i])) for m in range(pool.M)]
    print(f"{i:>5}  {int(y[i]):>5}  {float(var[i]):>12.4f}  {erased_fraction(mu[i]):>7.2f}  "
          + "  ".join(f"{h:>9.2f}" for h in het))

os.makedirs(OUT, exist_ok=True)
cols = pool.M + 2
fig, axes = plt.subplots(len(y), cols, figsize=(1.6 * cols, 1.6 * len(y)))
for i in range(len(y)):
    panels = [x[i, 0]] + [maps[i, m] for m in range(pool.M)] + [mu[i]]
    for j, img in enumerate(panels):
        ax = axes[i, j]
        ax.imshow(img.numpy(), cmap="gray" if j in (0, cols - 1) else "jet", vmin=0, vmax=1)
        ax.set_xticks([])
        ax.set_yticks([])
for j, title in enumerate(["image"] + [a.split("-d")[0] for a in pool.arch_ids] + ["meta"]):
    axes[0, j].set_title(title, fontsize=8)
fig.tight_layout()
path = os.path.join(OUT, "cam_consensus.png")
fig.savefig(path, dpi=100)
print(f"\nwrote {path}")

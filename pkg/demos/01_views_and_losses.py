# %% [markdown]
# # Views and objectives
#
# Two views of one image form a positive pair. Scale-aware cropping
# restricts each view to a small window, and proximity sampling keeps the
# second window's center within `delta` pixels of the first. This walk-through
# draws a few pairs from a synthetic fault image, renders them, and pushes a
# batch of embeddings through the three objectives.

# %%
import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from scalessl.core import ExperimentConfig, RngStream, validate_config, with_crop_size
from scalessl.objectives import ntxent_loss, ssl_batch_loss, vicreg_loss
from scalessl.synth import SynthSpec, generate
from scalessl.views import make_view_pair

rec = generate(SynthSpec.default("thin_curves", count=1, seed=4))[0]
print(rec.id, rec.pixels.shape, "fault pixels:", int(rec.mask.sum()))

# %% [markdown]
# L/8 of a 96 px image is a 12 px window. `delta` defaults to the crop size.

# %%
cfg = with_crop_size(validate_config(ExperimentConfig(sampling="proximity", crop_divisor=8)), 12)
rng = RngStream(0, "demo/views")
pairs = [make_view_pair(rec, cfg, rng) for _ in range(4)]
for p in pairs:
    du = p.window2.center_u - p.window1.center_u
    dv = p.window2.center_v - p.window1.center_v
    print(f"centers {p.window1.center_u, p.window1.center_v} -> {p.window2.center_u, p.window2.center_v}"
          f"  dist {np.hypot(du, dv):.2f} < {cfg.delta}")

# %%
fig, ax = plt.subplots(2, 5, figsize=(10, 4))
ax[0, 0].imshow(rec.pixels, cmap="gray")
ax[1, 0].imshow(rec.mask, cmap="gray")
for k, p in enumerate(pairs, start=1):
    ax[0, k].imshow(p.view1, cmap="gray")
    ax[1, k].imshow(p.view2, cmap="gray")
for a in ax.ravel():
    a.axis("off")
fig.savefig("views.png", dpi=80)

# %% [markdown]
# ## Objectives on toy embeddings
#
# Identical rows are the worst case for NT-Xent: every candidate is as similar
# as the positive, so the loss equals log(2N - 1).

# %%
N, d = 8, 16
same = torch.ones(2 * N, d, dtype=torch.float64)
print("NT-Xent, identical rows:", ntxent_loss(same).value, "log(2N-1) =", np.log(2 * N - 1))

g = torch.Generator().manual_seed(0)
z1 = torch.randn(N, d, generator=g, dtype=torch.float64)
z2 = z1 + 0.1 * torch.randn(N, d, generator=g, dtype=torch.float64)
rows = torch.stack([z1, z2], 1).reshape(2 * N, d)
print("NT-Xent, near pairs:", ntxent_loss(rows).value)
print("BYOL:", ssl_batch_loss("byol", {"p1": z1, "p2": z2, "t1": z1, "t2": z2}).value)
rep = vicreg_loss(z1, z2)
print("VICReg total", round(rep.value, 4), {k: round(v, 4) for k, v in rep.components.items()})

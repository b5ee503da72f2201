"""
Latent optimisation with three initialisations
===============================================

Runs the optimiser from the encoder code, from the mean code and from a
prototype injected into the medium layers, then plots the loss curves.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from ganedit import InversionConfig, LossWeights, toy_stack
from ganedit.inversion import build_prototype_bank, run_inversion

stack = toy_stack()
g = stack.generator
torch.manual_seed(1)
image = g.synthesize(2.0 * torch.randn(g.layer_count, g.style_dim, dtype=torch.float64)).clamp(-1, 1)
text = "striped knit top"

# a small bank is enough for the toy semantic model
bank = build_prototype_bank(stack, count=2000, seed=0)

curves = {}
for init in ("encoder", "mean", "injection"):
    res = run_inversion(image, text, LossWeights(), InversionConfig(steps=300, init_strategy=init), stack,
                        bank=bank)
    curves[init] = [b.total for b in res.trajectory]
    extra = f" prototype {res.prototype_index}" if res.prototype_index is not None else ""
    print(f"{init:>9}: {curves[init][0]:.4f} -> {curves[init][-1]:.4f}{extra}")

fig, ax = plt.subplots(figsize=(5, 3))
for name, c in curves.items():
    ax.semilogy(c, label=name)
ax.set_xlabel("step")
ax.set_ylabel("total loss")
ax.legend()
fig.tight_layout()
fig.savefig("inversion_curves.png", dpi=120)

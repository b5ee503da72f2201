"""
A reproducible image x prompt run
=================================

Writes a few toy images to disk, runs every (image, prompt) pair, and
shows the files a run directory contains. Running it twice with the same
seed gives byte-identical outputs.
"""

import json
import tempfile
from pathlib import Path

import torch

from ganedit import InversionConfig, LossWeights, toy_stack
from ganedit.pipeline import run_matrix, save_png

stack = toy_stack()
g = stack.generator
root = Path(tempfile.mkdtemp())
torch.manual_seed(3)
for i in range(3):
    code = 2.0 * torch.randn(g.layer_count, g.style_dim, dtype=torch.float64)
    save_png(g.synthesize(code).clamp(-1, 1), root / f"person{i}.png")

images = {p.stem: p for p in sorted(root.glob("*.png"))}
prompts = ["black leather jacket", "lace blouse", "denim overalls"]
records = run_matrix(images, prompts, InversionConfig(steps=200), LossWeights(), stack, root / "run")

for r in records:
    print(r.image_id, r.prompt_id, r.status, f"{r.final_total:.4f}")
print(sorted(str(p.relative_to(root / "run")) for p in (root / "run").iterdir()))
print(json.dumps(json.loads((root / "run" / "summary.json").read_text())["counts"]))

# %%
# The same run from the shell:
#
#     ganedit matrix <images_dir> prompts.txt -o run --steps 200

"""
The editing objective on the toy stack
=======================================

Builds the five-term objective for one image and one prompt, prints each
term, and checks one gradient against finite differences.
"""

import torch

from ganedit import LossWeights, toy_stack
from ganedit.losses import Objective

stack = toy_stack()
g = stack.generator

# a reference image straight out of the generator
torch.manual_seed(0)
image = g.synthesize(2.0 * torch.randn(g.layer_count, g.style_dim, dtype=torch.float64)).clamp(-1, 1)
prompt = stack.semantic.embed_text("black leather jacket")

obj = Objective(image, prompt, LossWeights(), stack)
code = stack.encoder.invert(image)
print("terms at the encoder code:", obj(code).as_dict())

# %%
# Every term is differentiable in the code; compare autograd with a
# central difference along one coordinate.
x = code.rows.clone().requires_grad_(True)
total, _ = obj.terms(x)
total.backward()
h = 1e-5
with torch.no_grad():
    xp, xm = code.rows.clone(), code.rows.clone()
    xp[2, 3] += h
    xm[2, 3] -= h
    fd = (obj.terms(xp)[0] - obj.terms(xm)[0]) / (2 * h)
print(f"d total / d w[2,3]: autograd {float(x.grad[2, 3]):.8f}  finite diff {float(fd):.8f}")

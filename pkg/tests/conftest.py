import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from ganedit.models import toy_stack

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(FIXTURES))

from generate import fixture_image  # noqa: E402


@pytest.fixture(scope="session")
def stack():
    return toy_stack()


@pytest.fixture(scope="session")
def image(stack):
    return fixture_image(stack)


@pytest.fixture(scope="session")
def other_image(stack):
    return fixture_image(stack, seed=321)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def random_code(stack, seed, scale=1.5):
    g = stack.generator
    r = np.random.default_rng(seed)
    return torch.from_numpy(r.normal(0.0, scale, size=(g.layer_count, g.style_dim)))


def central_difference(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, coordinate by coordinate."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def least_squares_minimum(stack, image, lam_im, lam_reg):
    """Closed-form minimum of ``lam_im * L_im + lam_reg * L_reg`` for the linear toy generator.

    Builds the normal equations in numpy from the generator matrix, the
    composition mask and an explicit regulariser matrix. Returns ``(value, code)``.
    """
    g = stack.generator
    n_w, d = g.layer_count, g.style_dim
    a = g.weight.numpy()
    b = g.bias.numpy()
    with torch.no_grad():
        mask = (1.0 - stack.segmenter.parse(image).body).numpy()
    m2 = np.tile(mask.reshape(-1) ** 2, 3)
    target = image.numpy().reshape(-1) - b
    reg = np.zeros((n_w * d, n_w * d))
    for j in range(1, n_w):
        e = np.zeros((d, n_w * d))
        e[:, :d] = np.eye(d)
        e[:, j * d:(j + 1) * d] = -np.eye(d)
        reg += e.T @ e
    reg /= n_w - 1
    hess = lam_im * a.T @ (m2[:, None] * a) + lam_reg * reg
    w = np.linalg.solve(hess, lam_im * a.T @ (m2 * target))
    r = a @ w - target
    value = lam_im * np.sum(m2 * r * r) + lam_reg * w @ reg @ w
    return float(value), w.reshape(n_w, d)

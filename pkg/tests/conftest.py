import numpy as np
import pytest
import torch

from ifer.encoder import EncoderConfig
from ifer.synthesis import GeneratorConfig


def directional_fd_check(loss_fn, tensors, eps=1e-6, rtol=1e-4, seed=0):
    """Compare autograd with central differences along one random direction per tensor.

    ``loss_fn()`` must recompute a float64 scalar from the current tensor values.
    Returns the worst relative error seen.
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        v = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        analytic = 0.0 if g is None else float((g * v).sum())
        with torch.no_grad():
            t.add_(eps * v)
            up = float(loss_fn())
            t.sub_(2 * eps * v)
            down = float(loss_fn())
            t.add_(eps * v)
        numeric = (up - down) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        err = abs(analytic - numeric) / scale
        assert err < rtol, f"tensor {tuple(t.shape)}: analytic {analytic:.10g} numeric {numeric:.10g} rel {err:.3g}"
        worst = max(worst, err)
    return worst


def joint_fd_check(loss_fn, tensors, eps=1e-7, rtol=1e-4, seeds=(0, 1, 2)):
    """Central differences along random directions spanning all tensors at once.

    One Gaussian entry per scalar, so the directional derivative is of the order of
    the full gradient norm. Per-tensor checks can drop below float64 resolution when
    a tensor's own gradient is many orders smaller than the loss. The small default
    step keeps the probe from straddling a leaky-ReLU kink.
    """
    for t in tensors:
        t.grad = None
    grads = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    worst = 0.0
    for seed in seeds:
        gen = torch.Generator().manual_seed(seed)
        dirs = [torch.randn(t.shape, generator=gen, dtype=t.dtype) for t in tensors]
        analytic = sum(0.0 if g is None else float((g * v).sum()) for g, v in zip(grads, dirs))
        with torch.no_grad():
            for t, v in zip(tensors, dirs):
                t.add_(eps * v)
            up = float(loss_fn())
            for t, v in zip(tensors, dirs):
                t.sub_(2 * eps * v)
            down = float(loss_fn())
            for t, v in zip(tensors, dirs):
                t.add_(eps * v)
        numeric = (up - down) / (2 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        assert err < rtol, f"direction {seed}: analytic {analytic:.12g} numeric {numeric:.12g} rel {err:.3g}"
        worst = max(worst, err)
    return worst


def module_fd_check(module, loss_fn, **kwargs):
    params = [p for p in module.parameters() if p.requires_grad]
    return directional_fd_check(loss_fn, params, **kwargs)


@pytest.fixture
def fd_check():
    return directional_fd_check


@pytest.fixture
def module_fd():
    return module_fd_check


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


MICRO_ENCODER = EncoderConfig(image_size=16, patch=2, widths=(4, 4, 8, 8), heads=(1, 1, 1, 1), window=2,
                              branch_windows=(2, 2, 2), n_codes=(1, 1, 1), style_dim=4, structure_dim=4)
MICRO_GENERATOR = GeneratorConfig(resolution=8, style_dim=4, structure_dim=4, channels=(4, 4),
                                  mapping_layers=2, feature_resolutions=(4, 8))


@pytest.fixture
def micro_encoder_cfg():
    return MICRO_ENCODER


@pytest.fixture
def micro_generator_cfg():
    return MICRO_GENERATOR

"""Central finite-difference gradient checking shared by the test suite."""

import numpy as np
import torch


def assert_grad_close(analytic: float, fd: float, rel: float = 1e-3, floor: float = 1e-4):
    """Relative comparison with an absolute floor for vanishing gradients.

    For |grad| below `floor` the finite-difference estimate is dominated by
    truncation/kink noise, so such entries are compared at floor resolution
    (still catching any systematic error larger than rel*floor).
    """
    scale = max(abs(analytic), abs(fd), floor)
    assert abs(analytic - fd) <= rel * scale, (analytic, fd, abs(analytic - fd) / scale)


def fd_param_slice(loss_fn, params: list[torch.Tensor], n_indices: int = 8,
                   h: float = 1e-3, seed: int = 0, rel: float = 1e-3):
    """Check autograd gradients of loss_fn() against central differences.

    loss_fn computes the loss from the current parameter values; params are
    leaf tensors with requires_grad set. n_indices entries are drawn at random
    across all given parameters.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    rng = np.random.default_rng(seed)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    for flat_idx in rng.choice(total, size=n_indices, replace=False):
        pi = 0
        while flat_idx >= sizes[pi]:
            flat_idx -= sizes[pi]
            pi += 1
        p = params[pi]
        flat = p.detach().view(-1)  # view() errors on non-contiguous: writes must land
        orig = float(flat[flat_idx])
        with torch.no_grad():
            flat[flat_idx] = orig + h
            lp = float(loss_fn().detach())
            flat[flat_idx] = orig - h
            lm = float(loss_fn().detach())
            flat[flat_idx] = orig
        fd = (lp - lm) / (2 * h)
        assert_grad_close(float(grads[pi].reshape(-1)[flat_idx]), fd, rel=rel)


def fd_tensor(loss_fn, x: torch.Tensor, n_indices: int = 8, h: float = 1e-4,
              seed: int = 0, rel: float = 1e-3):
    """Check d loss_fn(x) / dx against central differences on random entries."""
    x = x.detach().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    rng = np.random.default_rng(seed)
    flat = x.detach().view(-1)  # view() errors on non-contiguous: writes must land
    gflat = grad.reshape(-1)
    for idx in rng.choice(len(flat), size=min(n_indices, len(flat)), replace=False):
        orig = float(flat[idx])
        with torch.no_grad():
            flat[idx] = orig + h
            lp = float(loss_fn(x).detach())
            flat[idx] = orig - h
            lm = float(loss_fn(x).detach())
            flat[idx] = orig
        assert_grad_close(float(gflat[idx]), (lp - lm) / (2 * h), rel=rel)

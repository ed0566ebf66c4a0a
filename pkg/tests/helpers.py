"""Shared test utilities: finite-difference gradients and tolerances."""

import numpy as np
import torch


def rel_error(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def finite_difference_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar fn w.r.t. tensor x (float64)."""
    assert x.dtype == torch.float64, "finite differences need double precision"
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = float(fn(x))
        flat[i] = orig - h
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad


def analytic_grad(fn, x):
    """Autograd gradient of scalar fn w.r.t. leaf tensor x."""
    x = x.detach().clone().requires_grad_(True)
    value = fn(x)
    value.backward()
    return x.grad.detach().clone()


def module_bytes(module):
    """Concatenated raw bytes of all parameters and buffers (bit compare)."""
    chunks = []
    for _, p in sorted(module.named_parameters()):
        chunks.append(p.detach().numpy().tobytes())
    for _, b in sorted(module.named_buffers()):
        chunks.append(b.detach().numpy().tobytes())
    return b"".join(chunks)

import numpy as np
import torch

torch.set_num_threads(1)


def finite_difference_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function at x (float64)."""
    assert x.dtype == torch.float64, "finite differences need float64 inputs"
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(fn(x))
        flat[i] = orig - eps
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Max |a-b| / max(1e-8, |a|+|b|) over elements, as a scalar."""
    a = a.detach().double()
    b = b.detach().double()
    denom = (a.abs() + b.abs()).clamp_min(1e-8)
    return ((a - b).abs() / denom).max().item()


def check_gradient(fn, x: torch.Tensor, rtol: float = 1e-4, eps: float = 1e-5) -> float:
    """Compare autograd and finite-difference gradients of scalar fn wrt x."""
    x = x.detach().double().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    fd = finite_difference_gradient(fn, x.detach().clone(), eps=eps)
    err = relative_error(grad, fd)
    assert err < rtol, f"gradient mismatch: relative error {err:.3e} >= {rtol}"
    return err


def seeded_uniform(shape, seed, lo=-1.0, hi=1.0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=dtype)


def to_numpy_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()

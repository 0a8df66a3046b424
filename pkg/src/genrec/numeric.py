"""Dense tensor substrate: elementwise/linear ops, stop-gradient, SGD, init and gradient checking.

Reverse-mode differentiation is delegated to torch autograd; the helpers here
pin the conventions the rest of the package relies on (shape errors, LeakyReLU
slope, seeded Xavier init, the L2-coupled SGD update) and provide an
independent central-difference gradient checker.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
from torch import Tensor

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a: Sequence[int], b: Sequence[int]):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def as_tensor(x, dtype: torch.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(x, dtype=dtype or torch.get_default_dtype())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() == 0 or b.dim() == 0 or a.shape[-1] != b.shape[0 if b.dim() == 1 else -2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError("add", a.shape, b.shape) from None
    return a + b


def concat(*xs: Tensor, dim: int = -1) -> Tensor:
    """Concatenate along ``dim``; every other axis must agree."""
    if not xs:
        raise ValueError("concat needs at least one tensor")
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != ref.dim():
            raise ShapeError("concat", ref.shape, x.shape)
        d = dim % ref.dim()
        if any(x.shape[k] != ref.shape[k] for k in range(ref.dim()) if k != d):
            raise ShapeError("concat", ref.shape, x.shape)
    return torch.cat(xs, dim=dim)


def leaky_relu(x: Tensor) -> Tensor:
    return torch.nn.functional.leaky_relu(x, LEAKY_SLOPE)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def sq_l2_dist(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows of ``a`` (n×d) and ``b`` (m×d)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("sq_l2_dist", a.shape, b.shape)
    # Expanded form is cheaper but loses exactness near zero; the explicit
    # difference keeps argmin ties deterministic.
    return ((a.unsqueeze(-2) - b) ** 2).sum(-1)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[Tensor]:
    """Gradients of a scalar loss w.r.t. ``params``; unreachable params get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@torch.no_grad()
def sgd_step(params: Iterable[Tensor], grads: Iterable[Tensor], lr: float, l2: float = 0.0) -> None:
    """In-place ``p <- p - lr * (g + l2 * p)``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.sub_(lr * (g + l2 * p))


def xavier_bound(shape: Sequence[int]) -> float:
    fan_in, fan_out = (shape[0], shape[1]) if len(shape) >= 2 else (shape[0], shape[0])
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], generator: torch.Generator, dtype: torch.dtype | None = None) -> Tensor:
    bound = xavier_bound(shape)
    u = torch.rand(tuple(shape), generator=generator, dtype=dtype or torch.get_default_dtype())
    return (2.0 * u - 1.0) * bound


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``param`` (perturbed in place)."""
    out = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = out.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            up = float(fn())
            flat[k] = orig - eps
            down = float(fn())
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
    return out


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """Norm-wise relative error; falls back to the absolute error for (near-)zero gradients."""
    diff = (analytic - numeric).norm().item()
    denom = max(analytic.norm().item(), numeric.norm().item())
    if denom < 1e-8:
        return diff
    return diff / denom


def gradient_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
) -> dict[str, float]:
    """Compare autograd against central differences for each named parameter.

    Returns the per-parameter relative error. Parameters should be float64.
    """
    names = list(params)
    analytic = backward(fn(), [params[n] for n in names])
    errors = {}
    for name, grad in zip(names, analytic):
        numeric = finite_difference_grad(fn, params[name], eps)
        errors[name] = relative_error(grad.detach(), numeric)
    return errors


def straight_through(z: Tensor, zhat: Tensor) -> Tensor:
    """Value of ``zhat`` bit-for-bit, gradient of identity w.r.t. ``z``.

    Same semantics as ``z + sg(zhat - z)`` but without the rounding that
    expression introduces in the forward value.
    """
    return stop_gradient(zhat) + (z - stop_gradient(z))


class SGD(torch.optim.Optimizer):
    """Plain SGD with the L2 term folded into the gradient."""

    def __init__(self, params, lr: float = 1e-3, l2: float = 0.0):
        super().__init__(params, {"lr": lr, "l2": l2})

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            ps = [p for p in group["params"] if p.grad is not None]
            sgd_step(ps, [p.grad for p in ps], group["lr"], group["l2"])


def make_optimizer(params, kind: str, lr: float, l2: float) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if kind == "sgd":
        return SGD(params, lr=lr, l2=l2)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=l2)
    raise ValueError(f"unknown optimizer {kind!r}")

"""Finite-difference gradient oracle shared by the gradient tests."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call, vmap

FD_STEP = 1e-4
FD_RTOL = 1e-3
# gradients whose norm is below this (both routes) are treated as exactly zero
FD_ZERO = 1e-9


def _flatten(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors])


def central_differences(fn: Callable[[torch.Tensor], torch.Tensor], theta: torch.Tensor,
                        step: float = FD_STEP, chunk: int = 256) -> torch.Tensor:
    """Central differences of a scalar ``fn`` at the flat vector ``theta``.

    Perturbations are evaluated in vmapped chunks; each one moves exactly one
    coordinate, so this is the plain coordinate-wise oracle.
    """
    n = theta.numel()
    grads = torch.empty(n, dtype=theta.dtype)
    batched = vmap(fn)
    with torch.no_grad():
        for lo in range(0, n, chunk):
            idx = torch.arange(lo, min(lo + chunk, n))
            basis = torch.zeros(len(idx), n, dtype=theta.dtype)
            basis[torch.arange(len(idx)), idx] = step
            plus = batched(theta + basis)
            minus = batched(theta - basis)
            grads[idx] = (plus - minus) / (2 * step)
    return grads


def relative_error(fd: torch.Tensor, ad: torch.Tensor) -> float:
    scale = max(float(fd.norm()), float(ad.norm()))
    if scale < FD_ZERO:
        return 0.0
    return float((fd - ad).norm()) / scale


def check_function(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor) -> dict[str, float]:
    """Compare autograd and finite-difference gradients of ``fn(*inputs)`` per input."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    ad = torch.autograd.grad(out, inputs, allow_unused=True)
    errors = {}
    for i, x in enumerate(inputs):
        base = [y.detach() for y in inputs]

        def one(flat, i=i, base=base):
            args = list(base)
            args[i] = flat.view_as(x)
            return fn(*args)

        fd = central_differences(one, x.detach().reshape(-1))
        a = ad[i] if ad[i] is not None else torch.zeros_like(x)
        errors[f"input{i}"] = relative_error(fd, a.reshape(-1))
    return errors


class _Wrap(torch.nn.Module):
    def __init__(self, inner: torch.nn.Module, loss_fn):
        super().__init__()
        self.inner = inner
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn(self.inner)


def check_module(module: torch.nn.Module, loss_fn: Callable[[torch.nn.Module], torch.Tensor]
                 ) -> dict[str, float]:
    """Relative FD error of d loss / d parameter, one entry per named parameter.

    ``loss_fn`` receives the module and may call any of its methods; the
    finite-difference route re-binds every parameter through ``functional_call``.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    names = [n for n, _ in named]
    params = [p.detach().clone() for _, p in named]
    loss = loss_fn(module)
    ad = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    ad_flat = _flatten([g if g is not None else torch.zeros_like(p) for g, p in zip(ad, params)])

    wrapper = _Wrap(module, loss_fn)
    sizes = [p.numel() for p in params]
    shapes = [p.shape for p in params]

    def flat_loss(flat):
        chunks = torch.split(flat, sizes)
        state = {"inner." + n: c.view(s) for n, c, s in zip(names, chunks, shapes)}
        return functional_call(wrapper, state, ())

    fd = central_differences(flat_loss, _flatten(params))
    errors, lo = {}, 0
    for name, size in zip(names, sizes):
        errors[name] = relative_error(fd[lo:lo + size], ad_flat[lo:lo + size])
        lo += size
    return errors


def worst(errors: dict[str, float]) -> tuple[str, float]:
    name = max(errors, key=errors.get)
    return name, errors[name]


def random_weights(shape, seed: int = 0) -> torch.Tensor:
    g = np.random.default_rng(seed)
    return torch.from_numpy(g.standard_normal(shape))

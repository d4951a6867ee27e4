"""Dense tensor ops on top of torch autograd, plus a finite-difference gradient checker.

The ops here are the only numeric primitives the rest of the package leans on
directly; they add shape validation and the numerically careful variants
(max-subtracted softmax, tanh GELU) on top of torch tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if not -x.dim() <= axis < x.dim():
        raise DimensionError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def layernorm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layernorm affine extent {tuple(gain.shape)}/{tuple(bias.shape)} does not match {tuple(x.shape)}"
        )
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    # tanh approximation
    return 0.5 * x * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    checked: list[int] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst < tolerance


def grad_check(
    f: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    tolerance: float | None = None,
    max_checks: int | None = None,
    floor: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_checks`` only that many randomly chosen entries per input are probed,
    which keeps whole-model checks tractable. Inputs are perturbed in place and
    restored afterwards.

    Raises NumericError if ``f`` or any gradient is non-finite, and
    AssertionError if ``tolerance`` is given and exceeded.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    out = f(*inputs)
    if out.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NumericError(f"function value is not finite: {out.item()}")
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    errors, counts = [], []
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            g = torch.zeros_like(x) if g is None else g
            if not torch.isfinite(g).all():
                raise NumericError("autodiff gradient is not finite")
            flat = x.view(-1)
            gflat = g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if max_checks is None or max_checks >= n else rng.choice(n, max_checks, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                hi = f(*inputs).item()
                flat[i] = orig - step
                lo = f(*inputs).item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * step)
                if not math.isfinite(numeric):
                    raise NumericError(f"finite difference not finite at entry {i}")
                a = gflat[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, rel)
            errors.append(worst)
            counts.append(len(idx))
    report = GradCheckReport(errors, counts)
    if tolerance is not None:
        assert report.passed(tolerance), f"gradient check failed: max relative errors {errors}"
    return report

"""Momentum teacher and the KL distillation terms for ITC, MLM and S-MLM."""
from __future__ import annotations

import copy

import torch

from .losses import LossOutput, _zero
from .tensor import log_softmax

DISTILLED_TASKS = ("ITC", "MLM", "SMLM")


class StateError(RuntimeError):
    pass


class ContractError(RuntimeError):
    pass


class MomentumTeacher:
    """EMA clone of a student module. Teacher parameters never require grad."""

    def __init__(self, student: torch.nn.Module, momentum: float = 0.999, weight: float = 1.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if weight < 0:
            raise ValueError("distillation weight must be non-negative")
        self.model = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.momentum = momentum
        self.weight = weight

    def named_parameters(self):
        return self.model.named_parameters()

    @torch.no_grad()
    def update(self, student: torch.nn.Module) -> None:
        ema_update(self.model, student, self.momentum)

    def forward(self, task: str, fn):
        """Run ``fn(teacher_model)`` without a tape; ITM has no teacher."""
        if task not in DISTILLED_TASKS:
            raise ContractError(f"no momentum teacher for task {task}")
        with torch.no_grad():
            return fn(self.model)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, momentum: float) -> None:
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    missing = set(t_params) ^ set(s_params)
    if missing:
        raise StateError(f"teacher and student parameter names differ: {sorted(missing)}")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise StateError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.mul_(momentum).add_(sp.detach(), alpha=1.0 - momentum)


def kl_rows(target_logits: torch.Tensor, logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """KL(softmax(target) || softmax(logits)) along ``dim``; target is treated as constant."""
    t = log_softmax(target_logits.detach(), axis=dim)
    s = log_softmax(logits, axis=dim)
    return (t.exp() * (t - s)).sum(dim=dim)


def distill_itc(S: torch.Tensor, S_teacher: torch.Tensor) -> LossOutput:
    """Row-wise and column-wise KL from teacher similarity softmaxes to the student's, averaged."""
    if S.shape != S_teacher.shape:
        raise ValueError(f"similarity shapes differ: {tuple(S.shape)} vs {tuple(S_teacher.shape)}")
    l1 = kl_rows(S_teacher, S, dim=1).mean()
    l2 = kl_rows(S_teacher, S, dim=0).mean()
    loss = 0.5 * (l1 + l2)
    return LossOutput(loss, {"kd_l1": l1.item(), "kd_l2": l2.item()}, S.numel())


def distill_mlm(logits: torch.Tensor, teacher_logits: torch.Tensor) -> LossOutput:
    if logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {tuple(logits.shape)} vs {tuple(teacher_logits.shape)}")
    if logits.shape[0] == 0:
        return LossOutput(_zero(logits), {"kd": 0.0}, 0)
    loss = kl_rows(teacher_logits, logits).mean()
    return LossOutput(loss, {"kd": loss.item()}, logits.shape[0])

"""Pre-training objectives: contrastive (ITC), matching with patch alignment (ITM), MLM and S-MLM."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tensor import log_softmax
from .tokenize import TokenKind, Vocabulary

WORD, TOKEN = "word", "token"
MASK_RATE = 0.15
ALIGN_WEIGHT = 0.1


@dataclass
class LossOutput:
    loss: torch.Tensor
    parts: dict[str, float] = field(default_factory=dict)
    count: int = 0
    extras: dict = field(default_factory=dict)


def _zero(*tensors: torch.Tensor) -> torch.Tensor:
    """A tape-connected zero so empty losses still backprop (zero) gradients."""
    return sum((t.sum() * 0.0 for t in tensors), torch.zeros((), dtype=tensors[0].dtype))


# contrastive


@dataclass
class ContrastiveBatch:
    image: torch.Tensor  # N_img x d, unit rows
    text: torch.Tensor  # N_txt x d, unit rows
    delta: torch.Tensor  # N_img x N_txt bool
    temperature: torch.Tensor

    def validate(self, atol: float = 1e-6) -> None:
        if float(self.temperature.detach()) <= 0:
            raise ValueError(f"temperature must be positive, got {float(self.temperature.detach())}")
        for name, x in (("image", self.image), ("text", self.text)):
            norms = x.detach().norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=atol):
                raise ValueError(f"{name} representations are not L2-normalized")
        d = self.delta.bool()
        if d.shape != (self.image.shape[0], self.text.shape[0]):
            raise ValueError(f"delta shape {tuple(d.shape)} does not match {self.image.shape[0]}x{self.text.shape[0]}")
        if not d.any(dim=1).all() or not d.any(dim=0).all():
            raise ValueError("every image and every text needs at least one positive")

    @classmethod
    def from_pair_ids(cls, image, text, image_ids: Sequence, text_image_ids: Sequence, temperature):
        """Build delta from pair identifiers, never from text equality."""
        delta = torch.tensor([[ti == ii for ti in text_image_ids] for ii in image_ids], dtype=torch.bool)
        return cls(F.normalize(image, dim=-1), F.normalize(text, dim=-1), delta, temperature)


def similarity(batch: ContrastiveBatch) -> torch.Tensor:
    return batch.image @ batch.text.T / batch.temperature


def itc_loss(batch: ContrastiveBatch) -> LossOutput:
    batch.validate()
    S = similarity(batch)
    if S.shape == (1, 1):
        warnings.warn("contrastive batch with a single pair carries no signal; loss is 0")
        return LossOutput(_zero(S), {"l1": 0.0, "l2": 0.0}, 0, {"sim": S})
    d = batch.delta.to(S.dtype)
    n = d.sum()
    l1 = -(d * log_softmax(S, axis=1)).sum() / n
    l2 = -(d * log_softmax(S, axis=0)).sum() / n
    loss = 0.5 * (l1 + l2)
    return LossOutput(loss, {"l1": l1.item(), "l2": l2.item()}, int(n.item()), {"sim": S})


# matching


def itm_loss(logits: torch.Tensor, labels: torch.Tensor) -> LossOutput:
    """Binary cross-entropy on matching logits; label 1 means matched."""
    logits = logits.reshape(-1)
    labels = torch.as_tensor(labels, dtype=logits.dtype).reshape(-1)
    loss = F.binary_cross_entropy_with_logits(logits, labels)
    return LossOutput(loss, {"bce": loss.item()}, logits.numel())


@dataclass
class OTResult:
    plan: torch.Tensor
    distance: torch.Tensor
    converged: bool
    iterations: int


def ipot(
    cost: torch.Tensor,
    a: torch.Tensor | None = None,
    b: torch.Tensor | None = None,
    beta: float = 0.5,
    iters: int = 200,
    inner: int = 1,
    tol: float = 1e-12,
) -> OTResult:
    """Inexact proximal point OT on (optionally batched) cost matrices.

    Each outer step solves the KL-proximal subproblem around the current plan
    with ``inner`` Sinkhorn scalings of the kernel ``exp(-C/beta) * plan``.
    Marginals default to uniform; zero entries in ``a``/``b`` mark padding.
    Runs on a detached float64 copy of ``cost``.
    """
    single = cost.dim() == 2
    C = cost.detach().to(torch.float64)
    if single:
        C = C.unsqueeze(0)
    B, P, Q = C.shape
    if P < 1 or Q < 1:
        raise ValueError("transport problem needs at least one row and one column")
    if not torch.isfinite(C).all():
        raise ValueError("cost matrix is not finite")
    a = torch.full((B, P), 1.0 / P, dtype=torch.float64) if a is None else a.to(torch.float64).reshape(B, P)
    b = torch.full((B, Q), 1.0 / Q, dtype=torch.float64) if b is None else b.to(torch.float64).reshape(B, Q)
    G = torch.exp(-C / beta)
    plan = a[:, :, None] * b[:, None, :]
    sigma = torch.where(b > 0, 1.0 / Q, 0.0).to(torch.float64)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        K = G * plan
        for _ in range(inner):
            Ks = (K @ sigma[:, :, None])[..., 0]
            delta = torch.where(a > 0, a / Ks.clamp_min(1e-300), 0.0)
            Kd = (K.transpose(1, 2) @ delta[:, :, None])[..., 0]
            sigma = torch.where(b > 0, b / Kd.clamp_min(1e-300), 0.0)
        new = delta[:, :, None] * K * sigma[:, None, :]
        change = (new - plan).abs().sum(dim=(1, 2)).max().item()
        plan = new
        if change < tol:
            converged = True
            break
    dist = (plan * C).sum(dim=(1, 2))
    if single:
        plan, dist = plan[0], dist[0]
    return OTResult(plan, dist, converged, it)


def cosine_cost(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return 1.0 - F.normalize(x, dim=-1) @ F.normalize(y, dim=-1).transpose(-1, -2)


def ipa_distance(img_tokens: torch.Tensor, txt_tokens: torch.Tensor, iters: int = 200, beta: float = 0.5):
    """OT distance between an image-token set and a text-token set.

    The plan is solved on the detached cost and held constant, so gradients
    reach the tokens only through the cost matrix. Returns (distance, plan,
    converged).
    """
    C = cosine_cost(img_tokens, txt_tokens)
    ot = ipot(C, beta=beta, iters=iters)
    plan = ot.plan.to(C.dtype)
    return (plan * C).sum(), plan, ot.converged


def alignment_distances(hidden: torch.Tensor, kinds: torch.Tensor, plans: torch.Tensor | None = None,
                        iters: int = 200, beta: float = 0.5):
    """Per-row OT distance between image-patch and text-word hidden states of a pair batch."""
    img_sel = kinds == TokenKind.IMG_PATCH
    txt_sel = (kinds == TokenKind.TXT_TOKEN) | (kinds == TokenKind.TXT_MASK)
    n_img = int(img_sel.sum(1).max())
    n_txt = int(txt_sel.sum(1).max())
    B, L, d = hidden.shape
    if n_img == 0 or n_txt == 0:
        return _zero(hidden).expand(B), None
    img = torch.zeros(B, n_img, d, dtype=hidden.dtype)
    txt = torch.zeros(B, n_txt, d, dtype=hidden.dtype)
    a = torch.zeros(B, n_img, dtype=torch.float64)
    b = torch.zeros(B, n_txt, dtype=torch.float64)
    for r in range(B):
        ii = img_sel[r].nonzero()[:, 0]
        tt = txt_sel[r].nonzero()[:, 0]
        img[r, : len(ii)] = hidden[r, ii]
        txt[r, : len(tt)] = hidden[r, tt]
        a[r, : len(ii)] = 1.0 / max(len(ii), 1)
        b[r, : len(tt)] = 1.0 / max(len(tt), 1)
    C = cosine_cost(img, txt)
    if plans is None:
        plans = ipot(C, a, b, beta=beta, iters=iters).plan
    return (plans.to(C.dtype) * C).sum(dim=(1, 2)), plans


def itm_with_alignment(
    logits: torch.Tensor,
    hidden: torch.Tensor,
    kinds: torch.Tensor,
    labels: torch.Tensor,
    weight: float = ALIGN_WEIGHT,
    plans: torch.Tensor | None = None,
) -> LossOutput:
    """BCE matching loss plus ``weight`` times the signed alignment distance.

    The distance is added for matched pairs and subtracted for mismatched
    ones. Pass ``plans`` to reuse transport plans from an earlier call.
    """
    base = itm_loss(logits, labels)
    if weight == 0.0:
        return LossOutput(base.loss, {**base.parts, "align": 0.0}, base.count, {"plans": None})
    dist, plans = alignment_distances(hidden, kinds, plans)
    sign = torch.as_tensor(labels, dtype=dist.dtype).reshape(-1) * 2.0 - 1.0
    align = (sign * dist).mean()
    loss = base.loss + weight * align
    return LossOutput(loss, {**base.parts, "align": align.item()}, base.count, {"plans": plans})


# masked language modelling


@dataclass
class MaskedText:
    corrupted: list[int]
    positions: list[int]
    targets: list[int]
    granularity: str
    mode: str = "bidirectional"
    empty: bool = False

    def wrapped(self, vocab: Vocabulary) -> tuple[list[int], list[int]]:
        """Corrupted ids wrapped in [CLS]/[EOS] and prediction positions shifted to match."""
        return [vocab.cls_id, *self.corrupted, vocab.eos_id], [p + 1 for p in self.positions]


def mask_text(
    ids: Sequence[int],
    vocab: Vocabulary,
    rng: np.random.Generator,
    granularity: str = WORD,
    rate: float = MASK_RATE,
    word_ids: Sequence[int] | None = None,
    protected: frozenset[int] | None = None,
) -> MaskedText:
    """Select ``rate`` of the units (words or tokens) for prediction and corrupt them.

    The unit count is ``floor(rate * n + u)`` with ``u ~ U[0,1)``, so the
    expected selection rate is exact, and never below one. Every selected
    token becomes [MASK] 80% of the time, a random regular token 10% and
    stays unchanged 10%. Ids in ``protected`` (all specials by default) are
    never selected.
    """
    if granularity not in (WORD, TOKEN):
        raise ValueError(f"unknown granularity {granularity!r}")
    ids = list(ids)
    protected = vocab.special_ids if protected is None else protected
    maskable = [i for i, t in enumerate(ids) if t not in protected]
    if not maskable:
        return MaskedText(ids, [], [], granularity, empty=True)
    if granularity == WORD:
        wid = list(word_ids) if word_ids is not None else vocab.word_ids(ids)
        units: dict[int, list[int]] = {}
        for i in maskable:
            units.setdefault(wid[i], []).append(i)
        groups = list(units.values())
    else:
        groups = [[i] for i in maskable]
    n = len(groups)
    k = max(1, min(n, int(np.floor(rate * n + rng.random()))))
    chosen = sorted(rng.choice(n, size=k, replace=False))
    positions = sorted(i for g in chosen for i in groups[g])
    corrupted = list(ids)
    regular = vocab.regular_ids
    for i in positions:
        r = rng.random()
        if r < 0.8:
            corrupted[i] = vocab.mask_id
        elif r < 0.9:
            corrupted[i] = regular[rng.integers(len(regular))]
    return MaskedText(corrupted, positions, [ids[i] for i in positions], granularity)


def smoothed_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, smoothing: float) -> torch.Tensor:
    logp = log_softmax(logits, axis=-1)
    nll = -logp.gather(-1, targets[:, None])[:, 0]
    return ((1.0 - smoothing) * nll - smoothing * logp.mean(dim=-1)).mean()


def mlm_loss(hidden: torch.Tensor, targets, head, smoothing: float = 0.1) -> LossOutput:
    """Label-smoothed cross-entropy of ``head(hidden)`` against target ids.

    ``hidden`` holds the states at prediction positions (n x d). The same
    routine serves MLM and S-MLM; only the attention mask upstream differs.
    """
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    logits = head(hidden)
    if targets.numel() == 0:
        return LossOutput(_zero(logits, *head.parameters()), {"ce": 0.0}, 0, {"logits": logits})
    loss = smoothed_cross_entropy(logits, targets, smoothing)
    return LossOutput(loss, {"ce": loss.item()}, targets.numel(), {"logits": logits})


def gather_positions(hidden: torch.Tensor, offsets: Sequence[int], positions: Sequence[Sequence[int]]) -> torch.Tensor:
    """Stack hidden states at per-row positions; ``offsets[r]`` is where row r's text block starts."""
    rows = [r for r, ps in enumerate(positions) for _ in ps]
    cols = [offsets[r] + p for r, ps in enumerate(positions) for p in ps]
    return hidden[rows, cols]

"""Downstream adaptations: retrieval, VQA, captioning, NLVR2 and SNLI-VE on the toy task sets."""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import BIDIRECTIONAL, SEQ2SEQ, MLP, UnifiedTransformer
from .corpus import Scene, TaskExample, vqa_answers
from .losses import TOKEN, ContrastiveBatch, LossOutput, gather_positions, itc_loss, mask_text, mlm_loss
from .tokenize import TokenKind, Vocabulary
from .trainer import build_optimizer, lr_at, resize

log = logging.getLogger(__name__)

TASKS = ("retrieval", "vqa", "caption", "nlvr2", "snli")


@dataclass
class FinetuneConfig:
    total_steps: int = 500
    warmup_steps: int = 50
    peak_lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    grad_clip: float = 1.0
    label_smoothing: float = 0.1
    seed: int = 0


def fit(module: nn.Module, loss_fn: Callable[[np.random.Generator], torch.Tensor], cfg: FinetuneConfig) -> list[float]:
    """Plain fine-tuning loop: AdamW with the pre-training decay policy and linear warmup/decay."""
    rng = np.random.default_rng(cfg.seed)
    opt = build_optimizer(module, cfg.weight_decay)
    losses = []
    module.train()
    for step in range(cfg.total_steps):
        opt.zero_grad(set_to_none=True)
        loss = loss_fn(rng)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite fine-tuning loss at step {step}")
        loss.backward()
        params = [p for p in module.parameters() if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        for g in opt.param_groups:
            g["lr"] = lr_at(step + 1, cfg) * g["lr_scale"]
        opt.step()
        losses.append(loss.item())
    module.eval()
    return losses


def stack_images(scenes: Sequence[Scene], dtype, size: int | None = None) -> torch.Tensor:
    imgs = torch.stack([torch.as_tensor(s.image) for s in scenes]).to(dtype)
    return imgs if size is None else resize(imgs, size)


def encode_texts(vocab: Vocabulary, texts: Sequence[str]) -> list[list[int]]:
    return [vocab.encode(t)[0] for t in texts]


# retrieval


@dataclass
class RetrievalIndex:
    image: torch.Tensor
    text: torch.Tensor
    image_ids: list[int]
    text_image_ids: list[int]

    def __post_init__(self):
        for name, x in (("image", self.image), ("text", self.text)):
            n = x.norm(dim=-1)
            if not torch.allclose(n, torch.ones_like(n), atol=1e-6):
                raise ValueError(f"{name} representations are not L2-normalized")
        if set(self.text_image_ids) - set(self.image_ids):
            raise ValueError("text refers to an image that is not indexed")
        if set(self.image_ids) - set(self.text_image_ids):
            raise ValueError("image without any text partner")

    def truth_i2t(self) -> list[set[int]]:
        return [{j for j, o in enumerate(self.text_image_ids) if o == i} for i in self.image_ids]

    def truth_t2i(self) -> list[set[int]]:
        pos = {i: k for k, i in enumerate(self.image_ids)}
        return [{pos[o]} for o in self.text_image_ids]


def retrieval_score(index: RetrievalIndex) -> torch.Tensor:
    """Inner-product similarities, images x texts; no temperature at inference."""
    return index.image @ index.text.T


def recall_at_k(sims, truth: Sequence[set[int]], k: int) -> float:
    """Fraction of query rows with a true partner among the top ``k`` columns.

    Ties rank the lower column index first.
    """
    sims = np.asarray(torch.as_tensor(sims).detach().cpu().numpy() if torch.is_tensor(sims) else sims)
    n_cand = sims.shape[1]
    if k > n_cand:
        warnings.warn(f"K={k} exceeds {n_cand} candidates; clamping")
        k = n_cand
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    hits = [bool(set(order[q].tolist()) & truth[q]) for q in range(sims.shape[0])]
    return float(np.mean(hits))


class DualEncoder:
    """Separate image and text encoders cloned from one pre-trained unified model."""

    def __init__(self, model: UnifiedTransformer, shared: bool = False):
        self.image_model = model if shared else copy.deepcopy(model)
        self.text_model = model if shared else copy.deepcopy(model)

    def modules(self) -> nn.ModuleList:
        return nn.ModuleList([self.image_model, self.text_model])

    def encode_images(self, images) -> torch.Tensor:
        cls, _ = self.image_model.encode_image(images)
        return F.normalize(cls, dim=-1)

    def encode_texts(self, texts) -> torch.Tensor:
        eos, _, _ = self.text_model.encode_text(texts)
        return F.normalize(eos, dim=-1)

    def itc(self, images, texts, image_ids, text_image_ids) -> LossOutput:
        I, Tx = self.encode_images(images), self.encode_texts(texts)
        delta = torch.tensor([[t == i for t in text_image_ids] for i in image_ids], dtype=torch.bool)
        # both clones carry a temperature; the image side's is used
        return itc_loss(ContrastiveBatch(I, Tx, delta, self.image_model.temperature))


def build_index(enc: DualEncoder, scenes: Sequence[Scene], vocab: Vocabulary, size: int | None = None) -> RetrievalIndex:
    dtype = enc.image_model.dtype
    texts, owners = [], []
    for s in scenes:
        for c in s.captions:
            texts.append(vocab.encode(c)[0])
            owners.append(s.id)
    with torch.no_grad():
        I = enc.encode_images(stack_images(scenes, dtype, size))
        Tx = enc.encode_texts(texts)
    return RetrievalIndex(I, Tx, [s.id for s in scenes], owners)


def evaluate_retrieval(enc: DualEncoder, scenes, vocab, k: int = 1, size: int | None = None) -> dict[str, float]:
    idx = build_index(enc, scenes, vocab, size)
    S = retrieval_score(idx)
    return {
        f"i2t_r@{k}": recall_at_k(S, idx.truth_i2t(), k),
        f"t2i_r@{k}": recall_at_k(S.T, idx.truth_t2i(), k),
    }


def finetune_retrieval(model: UnifiedTransformer, scenes: Sequence[Scene], vocab: Vocabulary,
                       cfg: FinetuneConfig) -> DualEncoder:
    """Clone into unshared encoders and continue with ITC only; zero steps is zero-shot."""
    enc = DualEncoder(model)
    if cfg.total_steps == 0:
        return enc
    dtype = model.dtype

    def loss_fn(rng):
        pick = rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False)
        batch = [scenes[i] for i in pick]
        texts, owners = [], []
        for s in batch:
            c = s.captions[rng.integers(len(s.captions))]
            texts.append(vocab.encode(c)[0])
            owners.append(s.id)
        return enc.itc(stack_images(batch, dtype), texts, [s.id for s in batch], owners).loss

    fit(enc.modules(), loss_fn, cfg)
    return enc


# classification heads


class VQAModel(nn.Module):
    def __init__(self, backbone: UnifiedTransformer, answers: Sequence[str]):
        super().__init__()
        self.backbone = backbone
        self.answers = list(answers)
        d = backbone.cfg.hidden
        self.head = MLP(d, 2 * d, len(self.answers)).to(backbone.dtype)

    def forward(self, images, questions) -> torch.Tensor:
        enc = self.backbone.encode_pair(images, questions, BIDIRECTIONAL)
        return self.head(enc.at(TokenKind.TXT_CLS))


def vqa_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-answer binary cross-entropy against soft targets, mean over answers then batch."""
    if targets.shape != logits.shape:
        raise ValueError(f"target shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}")
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


class NLVR2Model(nn.Module):
    def __init__(self, backbone: UnifiedTransformer):
        super().__init__()
        self.backbone = backbone
        d = backbone.cfg.hidden
        self.head = MLP(2 * d, 2 * d, 1).to(backbone.dtype)

    def joint(self, img1, img2, sentences) -> torch.Tensor:
        B = len(sentences)
        enc = self.backbone.encode_pair(torch.cat([img1, img2]), list(sentences) * 2, BIDIRECTIONAL)
        cls = enc.at(TokenKind.TXT_CLS)
        return torch.cat([cls[:B], cls[B:]], dim=-1)

    def forward(self, img1, img2, sentences) -> torch.Tensor:
        return self.head(self.joint(img1, img2, sentences)).squeeze(-1)


class SNLIModel(nn.Module):
    def __init__(self, backbone: UnifiedTransformer):
        super().__init__()
        self.backbone = backbone
        d = backbone.cfg.hidden
        self.head = MLP(d, 2 * d, 3).to(backbone.dtype)

    def forward(self, images, hypotheses) -> torch.Tensor:
        enc = self.backbone.encode_pair(images, hypotheses, BIDIRECTIONAL)
        return self.head(enc.at(TokenKind.TXT_CLS))


@dataclass
class TaskData:
    examples: list[TaskExample]
    by_id: dict[int, Scene]
    vocab: Vocabulary
    texts: list[list[int]] = field(init=False)

    def __post_init__(self):
        self.texts = encode_texts(self.vocab, [e.text for e in self.examples])

    def images(self, idx, slot: int, dtype) -> torch.Tensor:
        return stack_images([self.by_id[self.examples[i].scene_ids[slot]] for i in idx], dtype)

    def sample(self, rng, n):
        return rng.choice(len(self.examples), size=min(n, len(self.examples)), replace=False)


def _vqa_targets(data: TaskData, idx, answers) -> torch.Tensor:
    t = torch.zeros(len(idx), len(answers))
    for r, i in enumerate(idx):
        t[r, answers.index(data.examples[i].label)] = 1.0
    return t


def finetune_vqa(backbone: UnifiedTransformer, data: TaskData, cfg: FinetuneConfig) -> VQAModel:
    model = VQAModel(copy.deepcopy(backbone), vqa_answers())

    def loss_fn(rng):
        idx = data.sample(rng, cfg.batch_size)
        logits = model(data.images(idx, 0, backbone.dtype), [data.texts[i] for i in idx])
        return vqa_loss(logits, _vqa_targets(data, idx, model.answers))

    fit(model, loss_fn, cfg)
    return model


def finetune_nlvr2(backbone: UnifiedTransformer, data: TaskData, cfg: FinetuneConfig) -> NLVR2Model:
    model = NLVR2Model(copy.deepcopy(backbone))

    def loss_fn(rng):
        idx = data.sample(rng, cfg.batch_size)
        logit = model(data.images(idx, 0, backbone.dtype), data.images(idx, 1, backbone.dtype),
                      [data.texts[i] for i in idx])
        y = torch.tensor([float(data.examples[i].label) for i in idx], dtype=logit.dtype)
        return F.binary_cross_entropy_with_logits(logit, y)

    fit(model, loss_fn, cfg)
    return model


def finetune_snli(backbone: UnifiedTransformer, data: TaskData, cfg: FinetuneConfig) -> SNLIModel:
    model = SNLIModel(copy.deepcopy(backbone))

    def loss_fn(rng):
        idx = data.sample(rng, cfg.batch_size)
        logits = model(data.images(idx, 0, backbone.dtype), [data.texts[i] for i in idx])
        y = torch.tensor([data.examples[i].label for i in idx], dtype=torch.long)
        return F.cross_entropy(logits, y)

    fit(model, loss_fn, cfg)
    return model


@torch.no_grad()
def accuracy(task: str, model: nn.Module, data: TaskData, batch: int = 64) -> float:
    model.eval()
    dtype = model.backbone.dtype
    correct = 0
    for start in range(0, len(data.examples), batch):
        idx = list(range(start, min(start + batch, len(data.examples))))
        texts = [data.texts[i] for i in idx]
        if task == "vqa":
            pred = [model.answers[k] for k in model(data.images(idx, 0, dtype), texts).argmax(-1).tolist()]
        elif task == "nlvr2":
            pred = (model(data.images(idx, 0, dtype), data.images(idx, 1, dtype), texts) > 0).tolist()
        elif task == "snli":
            pred = model(data.images(idx, 0, dtype), texts).argmax(-1).tolist()
        else:
            raise ValueError(f"no accuracy metric for task {task}")
        correct += sum(p == data.examples[i].label for p, i in zip(pred, idx))
    return correct / max(len(data.examples), 1)


# captioning


def mask_caption(ids: Sequence[int], vocab: Vocabulary, rng: np.random.Generator, rate: float = 0.15):
    """Token-level masking of a caption where [EOS] is also a prediction target."""
    full = [vocab.cls_id, *ids, vocab.eos_id]
    protected = frozenset({vocab.cls_id, vocab.pad_id, vocab.mask_id})
    return mask_text(full, vocab, rng, TOKEN, rate=rate, protected=protected)


def caption_step_train(model: UnifiedTransformer, images, captions: Sequence[Sequence[int]],
                       rng: np.random.Generator, smoothing: float = 0.1) -> LossOutput:
    masked = [mask_caption(c, model.vocab, rng) for c in captions]
    enc = model.encode_pair(images, [m.corrupted for m in masked], SEQ2SEQ, wrapped=True)
    offset = int(((enc.kinds[0] == TokenKind.IMG_CLS) | (enc.kinds[0] == TokenKind.IMG_PATCH)).sum())
    h = gather_positions(enc.hidden, [offset] * len(masked), [m.positions for m in masked])
    return mlm_loss(h, [t for m in masked for t in m.targets], model.mlm_head, smoothing)


@dataclass
class Generated:
    ids: list[int]
    truncated: bool


@torch.no_grad()
def caption_generate(model: UnifiedTransformer, images, max_len: int | None = None) -> list[Generated]:
    """Greedy decoding: append [MASK] to [CLS] + generated tokens and read the prediction there."""
    vocab = model.vocab
    images = torch.as_tensor(images).to(model.dtype)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    B = images.shape[0]
    max_len = model.cfg.max_text_len - 2 if max_len is None else min(max_len, model.cfg.max_text_len - 2)
    was_training = model.training
    model.eval()
    gen: list[list[int]] = [[] for _ in range(B)]
    done = [False] * B
    stopped = [False] * B
    for _ in range(max_len + 1):
        texts = [[vocab.cls_id, *g, vocab.mask_id] for g in gen]
        enc = model.encode_pair(images, texts, SEQ2SEQ, wrapped=True)
        nxt = model.mlm_head(enc.at(TokenKind.TXT_MASK)).argmax(-1).tolist()
        for b in range(B):
            if done[b]:
                continue
            if nxt[b] == vocab.eos_id:
                done[b] = stopped[b] = True
            elif len(gen[b]) >= max_len:
                done[b] = True
            else:
                gen[b].append(nxt[b])
        if all(done):
            break
    model.train(was_training)
    return [Generated(g, not s) for g, s in zip(gen, stopped)]


def finetune_caption(backbone: UnifiedTransformer, scenes: Sequence[Scene], vocab: Vocabulary,
                     cfg: FinetuneConfig) -> UnifiedTransformer:
    model = copy.deepcopy(backbone)
    caps = {s.id: vocab.encode(s.captions[0])[0] for s in scenes}

    def loss_fn(rng):
        pick = rng.choice(len(scenes), size=min(cfg.batch_size, len(scenes)), replace=False)
        batch = [scenes[i] for i in pick]
        return caption_step_train(model, stack_images(batch, model.dtype), [caps[s.id] for s in batch],
                                  rng, cfg.label_smoothing).loss

    fit(model, loss_fn, cfg)
    return model


def token_accuracy(generated: Sequence[int], reference: Sequence[int], eos_id: int) -> float:
    """Position-wise agreement over the reference plus its [EOS]."""
    ref = [*reference, eos_id]
    hyp = [*generated, eos_id]
    return sum(1 for i, t in enumerate(ref) if i < len(hyp) and hyp[i] == t) / len(ref)


def evaluate_caption(model: UnifiedTransformer, scenes: Sequence[Scene], vocab: Vocabulary) -> dict[str, float]:
    gens = caption_generate(model, stack_images(scenes, model.dtype))
    refs = [vocab.encode(s.captions[0])[0] for s in scenes]
    acc = [token_accuracy(g.ids, r, vocab.eos_id) for g, r in zip(gens, refs)]
    exact = [g.ids == r for g, r in zip(gens, refs)]
    return {"token_acc": float(np.mean(acc)), "exact": float(np.mean(exact))}

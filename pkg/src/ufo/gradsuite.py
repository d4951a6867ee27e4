"""Finite-difference check of the four pre-training losses on a small float64 model."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import BIDIRECTIONAL, SEQ2SEQ, ModelConfig, UnifiedTransformer
from .corpus import corpus_vocabulary, generate_corpus
from .losses import WORD, ContrastiveBatch, gather_positions, itc_loss, itm_with_alignment, mask_text, mlm_loss
from .tensor import grad_check
from .tokenize import TokenKind
from .trainer import itc_representations

LOSSES = ("ITC", "ITM", "MLM", "SMLM")


@dataclass
class SuiteResult:
    loss: str
    max_rel_error: float
    checked: int
    seconds: float


def build_losses(model: UnifiedTransformer, seed: int = 0) -> dict[str, callable]:
    """Closures over a fixed 2-pair batch; each returns the scalar loss at the current parameters."""
    vocab = model.vocab
    scenes = generate_corpus(2, seed=seed, size=model.cfg.image_size)
    images = torch.stack([torch.as_tensor(s.image) for s in scenes]).to(torch.float64)
    caps = [vocab.encode(s.captions[0])[0] for s in scenes]
    rng = np.random.default_rng(seed)
    masked = [mask_text(c, vocab, rng, WORD) for c in caps]
    wrapped = [m.wrapped(vocab) for m in masked]
    full = [w for w, _ in wrapped]
    positions = [p for _, p in wrapped]
    targets = [t for m in masked for t in m.targets]
    delta = torch.eye(2, dtype=torch.bool)

    def itc():
        I, T = itc_representations(model, images, caps)
        return itc_loss(ContrastiveBatch(I, T, delta, model.temperature)).loss

    # one matched and one mismatched pair
    itm_texts = [caps[0], caps[0]]
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)

    def itm_parts():
        enc = model.encode_pair(images, itm_texts, BIDIRECTIONAL)
        return model.itm_head(enc.at(TokenKind.TXT_CLS)).squeeze(-1), enc

    # transport plans are held fixed at their values for the starting parameters
    with torch.no_grad():
        logits, enc = itm_parts()
        plans = itm_with_alignment(logits, enc.hidden, enc.kinds, labels).extras["plans"]

    def itm():
        logits, enc = itm_parts()
        return itm_with_alignment(logits, enc.hidden, enc.kinds, labels, plans=plans).loss

    def masked_lm(mode):
        def f():
            enc = model.encode_pair(images, full, mode, wrapped=True)
            offset = int(((enc.kinds[0] == TokenKind.IMG_CLS) | (enc.kinds[0] == TokenKind.IMG_PATCH)).sum())
            h = gather_positions(enc.hidden, [offset, offset], positions)
            return mlm_loss(h, targets, model.mlm_head).loss
        return f

    return {"ITC": itc, "ITM": itm, "MLM": masked_lm(BIDIRECTIONAL), "SMLM": masked_lm(SEQ2SEQ)}


def small_model(seed: int = 0, image_size: int = 16) -> UnifiedTransformer:
    vocab = corpus_vocabulary()
    torch.manual_seed(seed)
    cfg = ModelConfig(layers=2, hidden=64, heads=4, image_size=image_size, vocab_size=len(vocab))
    return UnifiedTransformer(cfg, vocab).double()


def run_suite(max_checks: int = 4, step: float = 1e-5, seed: int = 0) -> list[SuiteResult]:
    """Probe ``max_checks`` random entries of every parameter tensor, for each loss."""
    model = small_model(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    out = []
    for name, fn in build_losses(model, seed).items():
        t0 = time.perf_counter()
        report = grad_check(lambda *_: fn(), params, step=step, max_checks=max_checks, seed=seed)
        out.append(SuiteResult(name, report.worst, sum(report.checked), time.perf_counter() - t0))
    return out

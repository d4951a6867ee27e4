"""Toy-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
import time

import numpy as np

from .corpus import Scene, generate_corpus, make_task_sets
from .downstream import (
    DualEncoder,
    FinetuneConfig,
    TaskData,
    accuracy,
    caption_generate,
    evaluate_caption,
    evaluate_retrieval,
    finetune_caption,
    finetune_retrieval,
    finetune_vqa,
    stack_images,
)
from .trainer import Pretrainer, TrainConfig, make_batch, task_loss


def heldout_scenes(n: int = 32, seed: int = 999, size: int = 32, start_id: int = 10_000) -> list[Scene]:
    """``n`` fresh single-caption scenes with pairwise distinct captions."""
    out, seen = [], set()
    k = 0
    while len(out) < n:
        batch = generate_corpus(4 * n, seed=seed + k, size=size, start_id=start_id + 4 * n * k)
        for s in batch:
            if s.captions[0] not in seen and len(out) < n:
                seen.add(s.captions[0])
                out.append(s)
        k += 1
    return out


def zero_shot_recall(tr: Pretrainer, scenes: list[Scene]) -> dict[str, float]:
    """Recall@1 with the pre-trained model serving as both encoders, no fine-tuning."""
    return evaluate_retrieval(DualEncoder(tr.model, shared=True), scenes, tr.vocab)


def compare_strategies(cfg: TrainConfig, seeds, budget: int, heldout: list[Scene]) -> list[dict]:
    """Random-task vs all-losses-every-step at an equal number of loss evaluations.

    The full strategy evaluates every task in each step, so it gets
    ``budget // len(task_set)`` steps (with the schedule scaled to match).
    """
    rows = []
    k = len(cfg.task_set)
    for seed in seeds:
        row = {"seed": seed}
        for strategy, steps in (("random", budget), ("full", budget // k)):
            c = dataclasses.replace(cfg, seed=seed, strategy=strategy, total_steps=steps,
                                    warmup_steps=max(1, cfg.warmup_steps * steps // cfg.total_steps))
            tr = Pretrainer(c)
            tr.run()
            r = zero_shot_recall(tr, heldout)
            row[strategy] = float(np.mean(list(r.values())))
            row[f"{strategy}_evaluations"] = tr.loss_evaluations
        rows.append(row)
    return rows


@dataclasses.dataclass
class PipelineConfig:
    pretrain: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    retrieval: FinetuneConfig = dataclasses.field(default_factory=lambda: FinetuneConfig(total_steps=500))
    caption: FinetuneConfig = dataclasses.field(
        default_factory=lambda: FinetuneConfig(total_steps=3000, warmup_steps=300, peak_lr=1e-3, batch_size=32))
    vqa: FinetuneConfig = dataclasses.field(
        default_factory=lambda: FinetuneConfig(total_steps=3000, warmup_steps=300, peak_lr=1e-3))
    heldout: int = 32
    task_corpus_size: int = 600
    task_corpus_seed: int = 2024


def shared_parameter_check(tr: Pretrainer) -> bool:
    """Every task's gradient lands on one and the same parameter set: the model the optimizer owns."""
    owned = {id(p) for g in tr.optimizer.param_groups for p in g["params"]}
    model_params = {id(p) for p in tr.model.parameters()}
    if owned != model_params:
        return False
    blocks = {id(p) for p in tr.model.blocks.parameters()}
    rng = np.random.default_rng(0)
    for task in tr.cfg.task_set:
        tr.model.zero_grad(set_to_none=True)
        batch = make_batch(task, tr.scenes, tr.vocab, rng, tr.cfg)
        batch.images = batch.images.to(tr.cfg.torch_dtype)
        loss, _ = task_loss(tr.model, None, batch, tr.cfg)
        loss.backward()
        touched = {id(p) for p in tr.model.parameters() if p.grad is not None and p.grad.abs().sum() > 0}
        if not touched <= model_params or not blocks <= touched:
            return False
    tr.model.zero_grad(set_to_none=True)
    return True


def run_pipeline(cfg: PipelineConfig, log=print) -> dict:
    """Pre-train once, then measure zero-shot retrieval, retrieval/caption/VQA fine-tuning."""
    t0 = time.perf_counter()
    tr = Pretrainer(cfg.pretrain)
    tr.run()
    out = {"pretrain_seconds": time.perf_counter() - t0, "loss_evaluations": tr.loss_evaluations}
    log(f"pre-trained {tr.step} steps in {out['pretrain_seconds']:.0f}s")
    out["shared_parameters"] = shared_parameter_check(tr)

    held = heldout_scenes(cfg.heldout, size=cfg.pretrain.max_s)
    zs = zero_shot_recall(tr, held)
    out["zero_shot"] = zs
    log(f"zero-shot {zs}")

    enc = finetune_retrieval(tr.model, held, tr.vocab, cfg.retrieval)
    out["finetuned_retrieval"] = evaluate_retrieval(enc, held, tr.vocab)
    log(f"fine-tuned retrieval {out['finetuned_retrieval']}")

    cap_model = finetune_caption(tr.model, tr.scenes, tr.vocab, cfg.caption)
    memorized = tr.scenes[0]
    g = caption_generate(cap_model, stack_images([memorized], cap_model.dtype))[0]
    out["memorized_caption"] = {"reference": memorized.captions[0], "generated": tr.vocab.detokenize(g.ids),
                                "exact": g.ids == tr.vocab.encode(memorized.captions[0])[0]}
    out["caption_heldout"] = evaluate_caption(cap_model, held, tr.vocab)
    log(f"caption {out['memorized_caption']} held-out {out['caption_heldout']}")

    scenes = generate_corpus(cfg.task_corpus_size, cfg.task_corpus_seed, size=cfg.pretrain.max_s, start_id=50_000)
    sets = make_task_sets(scenes, cfg.task_corpus_seed)
    by_id = {s.id: s for s in scenes}
    vqa = finetune_vqa(tr.model, TaskData(sets["vqa"]["train"], by_id, tr.vocab), cfg.vqa)
    test = TaskData(sets["vqa"]["test"], by_id, tr.vocab)
    out["vqa"] = {"accuracy": accuracy("vqa", vqa, test), "n": len(test.examples)}
    log(f"vqa {out['vqa']}")
    out["seconds"] = time.perf_counter() - t0
    return out

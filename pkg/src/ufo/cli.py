"""Command-line entry point: ``ufo <command> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import ModelConfig, UnifiedTransformer
from .corpus import (
    generate_corpus,
    load_corpus,
    make_task_sets,
    save_corpus,
    split_of,
    vqa_answers,
)
from .downstream import (
    TASKS,
    DualEncoder,
    FinetuneConfig,
    NLVR2Model,
    SNLIModel,
    TaskData,
    VQAModel,
    accuracy,
    caption_generate,
    evaluate_caption,
    evaluate_retrieval,
    finetune_caption,
    finetune_nlvr2,
    finetune_retrieval,
    finetune_snli,
    finetune_vqa,
)
from .tokenize import Vocabulary
from .trainer import Pretrainer, TrainConfig, load_module

log = logging.getLogger("ufo")

METRICS = {"retrieval": "recall@1", "vqa": "accuracy", "caption": "token_accuracy", "nlvr2": "accuracy",
           "snli": "accuracy"}


# checkpoint plumbing for fine-tuned models


def _module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + n: p.detach().numpy().copy() for n, p in module.named_parameters()}


def save_finetuned(path, task: str, model, backbone: UnifiedTransformer, pretrain_cfg: dict) -> None:
    tensors = {
        "meta/task": ckpt.text_tensor(task),
        "meta/model_config": ckpt.text_tensor(json.dumps(dataclasses.asdict(backbone.cfg))),
        "meta/vocab": ckpt.text_tensor(backbone.vocab.dumps()),
        "meta/config": ckpt.text_tensor(json.dumps(pretrain_cfg, sort_keys=True)),
    }
    if task == "retrieval":
        tensors |= _module_tensors(model.image_model, "image_model/") | _module_tensors(model.text_model, "text_model/")
    else:
        tensors |= _module_tensors(model, "model/")
    ckpt.save(path, tensors)


def load_any(path):
    """Returns (task or None for a pre-training checkpoint, model, pre-training config dict)."""
    tensors = ckpt.load(path)
    cfg = json.loads(ckpt.tensor_text(tensors["meta/config"]))
    vocab = Vocabulary.loads(ckpt.tensor_text(tensors["meta/vocab"]))
    if "meta/task" not in tensors:
        tr = Pretrainer(TrainConfig.from_dict(cfg), scenes=[], vocab=vocab)
        load_module(tr.model, tensors, "model/")
        return None, tr.model, cfg
    task = ckpt.tensor_text(tensors["meta/task"])
    mcfg = ModelConfig(**json.loads(ckpt.tensor_text(tensors["meta/model_config"])))
    dtype = torch.float64 if tensors[next(k for k in tensors if not k.startswith("meta/"))].dtype == np.float64 \
        else torch.float32
    backbone = UnifiedTransformer(mcfg, vocab).to(dtype)
    if task == "retrieval":
        model = DualEncoder(backbone)
        load_module(model.image_model, tensors, "image_model/")
        load_module(model.text_model, tensors, "text_model/")
    else:
        model = {"vqa": lambda: VQAModel(backbone, vqa_answers()), "caption": lambda: backbone,
                 "nlvr2": lambda: NLVR2Model(backbone), "snli": lambda: SNLIModel(backbone)}[task]()
        load_module(model, tensors, "model/")
    return task, model, cfg


def corpus_for(args, cfg: dict):
    if getattr(args, "corpus", None):
        return load_corpus(args.corpus)
    return generate_corpus(cfg["corpus_size"], cfg["corpus_seed"], cfg["multi_caption_prob"], cfg["max_s"])


def task_data(task: str, scenes, vocab, split: str) -> TaskData:
    sets = make_task_sets(scenes)
    return TaskData(sets[task][split], {s.id: s for s in scenes}, vocab)


# commands


def cmd_pretrain(args) -> int:
    cfg = TrainConfig.load(args.config)
    scenes = load_corpus(args.corpus) if args.corpus else None
    tr = Pretrainer(cfg, scenes)
    tr.run(log_path=args.log)
    tr.save(args.out)
    print(json.dumps({"steps": tr.step, "loss_evaluations": tr.loss_evaluations, "out": str(args.out)}))
    return 0


def cmd_resume(args) -> int:
    scenes = load_corpus(args.corpus) if args.corpus else None
    tr = Pretrainer.load(args.ckpt, scenes)
    target = args.steps if args.steps is not None else tr.cfg.total_steps
    tr.run(max(target - tr.step, 0), log_path=args.log)
    out = args.out or args.ckpt
    tr.save(out)
    print(json.dumps({"steps": tr.step, "loss_evaluations": tr.loss_evaluations, "out": str(out)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    ok = True
    for r in run_suite(max_checks=args.max_checks, step=args.step, seed=args.seed):
        passed = r.max_rel_error < args.tolerance
        ok &= passed
        print(f"{r.loss:5s} max_rel_error={r.max_rel_error:.3e} checked={r.checked} "
              f"time={r.seconds:.1f}s {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_finetune(args) -> int:
    task, backbone, pcfg = load_any(args.ckpt)
    if task is not None:
        raise SystemExit("finetune expects a pre-training checkpoint")
    fcfg = FinetuneConfig(**json.loads(Path(args.config).read_text())) if args.config else FinetuneConfig()
    scenes = corpus_for(args, pcfg)
    vocab = backbone.vocab
    if args.task == "retrieval":
        model = finetune_retrieval(backbone, [s for s in scenes if split_of(s.id) == "train"], vocab, fcfg)
    elif args.task == "caption":
        model = finetune_caption(backbone, [s for s in scenes if split_of(s.id) == "train"], vocab, fcfg)
    else:
        fn = {"vqa": finetune_vqa, "nlvr2": finetune_nlvr2, "snli": finetune_snli}[args.task]
        model = fn(backbone, task_data(args.task, scenes, vocab, "train"), fcfg)
    out = args.out or str(Path(args.ckpt).with_suffix(f".{args.task}.ckpt"))
    save_finetuned(out, args.task, model, backbone, pcfg)
    print(json.dumps({"task": args.task, "out": out}))
    return 0


def evaluate(task: str, model, scenes, vocab, split: str = "test") -> dict:
    held = [s for s in scenes if split_of(s.id) == split]
    if task == "retrieval":
        enc = model if isinstance(model, DualEncoder) else DualEncoder(model, shared=True)
        r = evaluate_retrieval(enc, held, vocab)
        value, n = 0.5 * (r["i2t_r@1"] + r["t2i_r@1"]), len(held)
    elif task == "caption":
        value, n = evaluate_caption(model, held, vocab)["token_acc"], len(held)
    else:
        data = task_data(task, scenes, vocab, split)
        value, n = accuracy(task, model, data), len(data.examples)
    return {"task": task, "metric": METRICS[task], "value": value, "n_examples": n}


def cmd_eval(args) -> int:
    task, model, pcfg = load_any(args.ckpt)
    if task is not None and task != args.task:
        raise SystemExit(f"checkpoint was fine-tuned for {task}, not {args.task}")
    if task is None and args.task not in ("retrieval", "caption"):
        raise SystemExit(f"{args.task} needs a fine-tuned checkpoint")
    vocab = model.image_model.vocab if isinstance(model, DualEncoder) else (
        model.vocab if isinstance(model, UnifiedTransformer) else model.backbone.vocab)
    print(json.dumps(evaluate(args.task, model, corpus_for(args, pcfg), vocab, args.split)))
    return 0


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        img = np.load(path)
    elif path.suffix in (".jsonl", ".json"):
        img = load_corpus(path)[0].image
    else:
        raise SystemExit(f"unsupported image file {path}: use .npy (H x W x 3 floats) or a corpus .jsonl")
    if img.ndim != 3 or img.shape[-1] != 3:
        raise SystemExit(f"expected an H x W x 3 image, got shape {img.shape}")
    return img.astype(np.float32)


def cmd_caption(args) -> int:
    task, model, _ = load_any(args.ckpt)
    if task not in (None, "caption"):
        raise SystemExit(f"checkpoint was fine-tuned for {task}")
    g = caption_generate(model, torch.as_tensor(read_image(args.image)), args.max_len)[0]
    print(model.vocab.detokenize(g.ids))
    if g.truncated:
        log.warning("caption hit the length limit before [EOS]")
    return 0


def cmd_datagen(args) -> int:
    scenes = generate_corpus(args.n, args.seed, args.multi_caption_prob, args.size)
    save_corpus(scenes, args.out)
    summary = {"scenes": len(scenes), "out": str(args.out)}
    if args.tasks:
        sets = make_task_sets(scenes, args.seed)
        tpath = Path(args.out).with_suffix(".tasks.json")
        tpath.write_text(json.dumps({
            t: {sp: [dataclasses.asdict(e) for e in ex] for sp, ex in splits.items()} for t, splits in sets.items()
        }))
        summary["tasks"] = str(tpath)
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pre-train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="corpus JSONL; generated from the config when omitted")
    s.add_argument("--log", help="append per-step metrics here")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("resume", help="continue a pre-training checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, help="train until this step (default: total_steps)")
    s.add_argument("--out", help="defaults to overwriting --ckpt")
    s.add_argument("--corpus")
    s.add_argument("--log")
    s.set_defaults(fn=cmd_resume)

    s = sub.add_parser("gradcheck", help="finite-difference check of the pre-training losses")
    s.add_argument("--max-checks", type=int, default=4, help="entries probed per parameter tensor")
    s.add_argument("--step", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("finetune", help="fine-tune a pre-trained checkpoint")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", help="JSON fine-tuning config")
    s.add_argument("--out")
    s.add_argument("--corpus")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate on the test split; prints one JSON line")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("caption", help="greedy caption for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--max-len", type=int)
    s.set_defaults(fn=cmd_caption)

    s = sub.add_parser("datagen", help="write a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", action="store_true", help="also write downstream task sets")
    s.add_argument("--multi-caption-prob", type=float, default=0.3)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(fn=cmd_datagen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

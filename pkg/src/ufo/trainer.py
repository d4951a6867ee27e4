"""Pre-training loop: one randomly sampled loss per iteration, guided by a momentum teacher."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbone import BIDIRECTIONAL, SEQ2SEQ, ModelConfig, UnifiedTransformer, parameter_kind
from .corpus import Scene, corpus_vocabulary, generate_corpus
from .losses import (
    WORD,
    ContrastiveBatch,
    LossOutput,
    gather_positions,
    itc_loss,
    itm_with_alignment,
    mask_text,
    mlm_loss,
)
from .teacher import MomentumTeacher, distill_itc, distill_mlm
from .tokenize import ConfigError, TokenKind, Vocabulary

log = logging.getLogger(__name__)

TASKS = ("ITC", "ITM", "MLM", "SMLM")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 200
    peak_lr: float = 2e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    task_set: tuple[str, ...] = TASKS
    distill_weight: float = 1.0
    momentum: float = 0.999
    temp_lr_scale: float = 1.0
    seed: int = 0
    min_s: int = 16
    max_s: int = 32
    crop_min_area: float = 0.8
    teacher: bool = True
    strategy: str = "random"
    grad_clip: float = 1.0
    label_smoothing: float = 0.1
    align_weight: float = 0.1
    corpus_size: int = 256
    corpus_seed: int = 0
    multi_caption_prob: float = 0.3
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.task_set = tuple(self.task_set)
        if not self.task_set:
            raise ConfigError("task_set must not be empty")
        if unknown := set(self.task_set) - set(TASKS):
            raise ConfigError(f"unknown tasks {sorted(unknown)}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        p = self.model.patch_size
        if self.min_s > self.max_s or self.min_s % p or self.max_s % p:
            raise ConfigError(f"min_s/max_s must be ordered multiples of patch size {p}")
        if self.strategy not in ("random", "full"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        if not 0 < self.crop_min_area <= 1:
            raise ConfigError("crop_min_area must be in (0, 1]")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task_set"] = list(self.task_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        if unknown := set(d) - names:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("model"), dict):
            mnames = {f.name for f in dataclasses.fields(ModelConfig)}
            if unknown := set(d["model"]) - mnames:
                raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# schedule and policy


def sample_task(rng: np.random.Generator, task_set: Sequence[str]) -> str:
    if not task_set:
        raise ConfigError("task_set must not be empty")
    return task_set[int(rng.integers(len(task_set)))]


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    if cfg.total_steps == cfg.warmup_steps:
        return cfg.peak_lr
    return cfg.peak_lr * (max(cfg.total_steps - step, 0) / (cfg.total_steps - cfg.warmup_steps))


def decay_mask(name: str) -> bool:
    """Whether weight decay applies to the named parameter."""
    return parameter_kind(name) not in ("bias", "layernorm", "temperature")


def build_optimizer(model: torch.nn.Module, weight_decay: float, temp_lr_scale: float = 1.0) -> torch.optim.AdamW:
    """AdamW with decay off for biases, norms and the temperature.

    Each group carries an ``lr_scale`` multiplier applied on top of the schedule;
    only the temperature group can differ from 1.
    """
    decay, no_decay, temp = [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name.rsplit(".", 1)[-1] == "log_temp":
            temp.append(p)
        else:
            (decay if decay_mask(name) else no_decay).append(p)
    groups = [
        {"params": decay, "weight_decay": weight_decay, "lr_scale": 1.0},
        {"params": no_decay, "weight_decay": 0.0, "lr_scale": 1.0},
    ]
    if temp:
        groups.append({"params": temp, "weight_decay": 0.0, "lr_scale": temp_lr_scale})
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.999), eps=1e-8, foreach=False)


# augmentation


def draw_scale(rng: np.random.Generator, cfg: TrainConfig) -> int:
    p = cfg.model.patch_size
    sizes = np.arange(cfg.min_s, cfg.max_s + 1, p)
    return int(sizes[rng.integers(len(sizes))])


def resize(img: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of H x W x C (or B x H x W x C) to size x size."""
    single = img.dim() == 3
    x = (img.unsqueeze(0) if single else img).permute(0, 3, 1, 2)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    x = x.permute(0, 2, 3, 1)
    return x[0] if single else x


def augment_multiscale(img, rng: np.random.Generator, cfg: TrainConfig, size: int | None = None) -> torch.Tensor:
    """Square random crop covering at least ``crop_min_area`` of the image, resized to s x s.

    ``size`` fixes s (used to give a whole batch one scale); otherwise s is
    drawn uniformly from min_s..max_s in patch-size steps.
    """
    img = torch.as_tensor(np.asarray(img))
    s = draw_scale(rng, cfg) if size is None else size
    H, W, _ = img.shape
    if min(H, W) < cfg.min_s:
        log.warning("image %dx%d smaller than min_s=%d; upscaling first", H, W, cfg.min_s)
        img = resize(img, cfg.max_s)
        H = W = cfg.max_s
    area = rng.uniform(cfg.crop_min_area, 1.0) * H * W
    side = min(int(round(math.sqrt(area))), H, W)
    top = int(rng.integers(H - side + 1))
    left = int(rng.integers(W - side + 1))
    crop = img[top : top + side, left : left + side]
    return resize(crop, s)


# batches


@dataclass
class Batch:
    task: str
    images: torch.Tensor
    texts: list[list[int]]
    image_ids: list[int] = field(default_factory=list)
    text_image_ids: list[int] = field(default_factory=list)
    labels: torch.Tensor | None = None
    positions: list[list[int]] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)


def encode_caption(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.encode(text)[0]


def make_batch(task: str, scenes: Sequence[Scene], vocab: Vocabulary, rng: np.random.Generator,
               cfg: TrainConfig) -> Batch:
    B = min(cfg.batch_size, len(scenes))
    pick = rng.choice(len(scenes), size=B, replace=False)
    chosen = [scenes[i] for i in pick]
    s = draw_scale(rng, cfg)
    images = torch.stack([augment_multiscale(sc.image, rng, cfg, size=s) for sc in chosen])
    ids = [sc.id for sc in chosen]
    if task == "ITC":
        texts, owners = [], []
        for sc in chosen:
            for c in sc.captions:
                texts.append(encode_caption(vocab, c))
                owners.append(sc.id)
        return Batch(task, images, texts, ids, owners)
    one = [encode_caption(vocab, sc.captions[rng.integers(len(sc.captions))]) for sc in chosen]
    if task == "ITM":
        wrong = []
        for i in range(B):
            j = int(rng.integers(B - 1))
            wrong.append(one[j + (j >= i)])
        labels = torch.cat([torch.ones(B), torch.zeros(B)])
        return Batch(task, torch.cat([images, images]), one + wrong, ids + ids, ids + ids, labels)
    if task in ("MLM", "SMLM"):
        masked = [mask_text(t, vocab, rng, WORD) for t in one]
        full = [m.wrapped(vocab) for m in masked]
        return Batch(task, images, [f for f, _ in full], ids, ids,
                     positions=[p for _, p in full], targets=[t for m in masked for t in m.targets])
    raise ConfigError(f"unknown task {task}")


# losses over the model


def itc_representations(model: UnifiedTransformer, images, texts):
    img, _ = model.encode_image(images)
    eos, _, _ = model.encode_text(texts)
    return F.normalize(img, dim=-1), F.normalize(eos, dim=-1)


def masked_hidden(model: UnifiedTransformer, batch: Batch) -> torch.Tensor:
    """Hidden states at the prediction positions of a masked pair batch."""
    mode = SEQ2SEQ if batch.task == "SMLM" else BIDIRECTIONAL
    enc = model.encode_pair(batch.images, batch.texts, mode=mode, wrapped=True)
    offset = int((enc.kinds[0] == TokenKind.IMG_CLS).sum() + (enc.kinds[0] == TokenKind.IMG_PATCH).sum())
    h = gather_positions(enc.hidden, [offset] * len(batch.texts), batch.positions)
    return h


def task_loss(model: UnifiedTransformer, teacher: MomentumTeacher | None, batch: Batch,
              cfg: TrainConfig) -> tuple[torch.Tensor, dict[str, float]]:
    """Task loss plus (when a teacher is present and the task is distilled) the weighted KL term."""
    parts: dict[str, float] = {}
    use_teacher = teacher is not None and batch.task != "ITM"
    if batch.task == "ITC":
        I, Tx = itc_representations(model, batch.images, batch.texts)
        cb = ContrastiveBatch(I, Tx, _delta(batch), model.temperature)
        out = itc_loss(cb)
        total = out.loss
        parts.update(out.parts, t=model.temperature.item())
        if use_teacher:
            t_det = model.temperature.detach()
            It, Tt = teacher.forward("ITC", lambda m: itc_representations(m, batch.images, batch.texts))
            kd = distill_itc(out.extras["sim"], It @ Tt.T / t_det)
            parts["distill"] = kd.loss.item()
            if teacher.weight:
                total = total + teacher.weight * kd.loss
    elif batch.task == "ITM":
        enc = model.encode_pair(batch.images, batch.texts, mode=BIDIRECTIONAL)
        logits = model.itm_head(enc.at(TokenKind.TXT_CLS)).squeeze(-1)
        out = itm_with_alignment(logits, enc.hidden, enc.kinds, batch.labels.to(logits.dtype), cfg.align_weight)
        total = out.loss
        parts.update(out.parts)
    else:
        h = masked_hidden(model, batch)
        out = mlm_loss(h, batch.targets, model.mlm_head, cfg.label_smoothing)
        total = out.loss
        parts.update(out.parts)
        if use_teacher:
            g_hat = teacher.forward(batch.task, lambda m: m.mlm_head(masked_hidden(m, batch)))
            kd = distill_mlm(out.extras["logits"], g_hat)
            parts["distill"] = kd.loss.item()
            if teacher.weight:
                total = total + teacher.weight * kd.loss
    return total, parts


def _delta(batch: Batch) -> torch.Tensor:
    return torch.tensor([[t == i for t in batch.text_image_ids] for i in batch.image_ids], dtype=torch.bool)


def train_step(model, teacher, optimizer, batches: Sequence[Batch], cfg: TrainConfig, step: int) -> dict:
    """Forward, backward, clipped AdamW update at ``lr_at(step + 1)``, then EMA update.

    ``batches`` holds one batch under the random strategy, one per task under
    the full strategy (losses summed).
    """
    model.train()
    optimizer.zero_grad(set_to_none=True)
    total = None
    metrics: dict = {"step": step, "task": "+".join(b.task for b in batches), "parts": {}}
    for b in batches:
        loss, parts = task_loss(model, teacher, b, cfg)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"non-finite {b.task} loss at step {step}")
        metrics["parts"][b.task] = parts
        metrics.setdefault("task_losses", {})[b.task] = loss.item()
        total = loss if total is None else total + loss
    total.backward()
    params = [p for p in model.parameters() if p.grad is not None]
    metrics["grad_norm"] = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip).item()
    lr = lr_at(step + 1, cfg)
    for g in optimizer.param_groups:
        g["lr"] = lr * g["lr_scale"]
    optimizer.step()
    if teacher is not None:
        teacher.update(model)
    metrics["loss"] = total.item()
    metrics["lr"] = lr
    return metrics


class Pretrainer:
    """Owns model, teacher, optimizer, corpus and RNG streams for a pre-training run."""

    def __init__(self, cfg: TrainConfig, scenes: list[Scene] | None = None, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.vocab = vocab or corpus_vocabulary()
        if cfg.model.vocab_size != len(self.vocab):
            cfg.model = dataclasses.replace(cfg.model, vocab_size=len(self.vocab))
        self.scenes = scenes if scenes is not None else generate_corpus(
            cfg.corpus_size, cfg.corpus_seed, cfg.multi_caption_prob, cfg.max_s)
        torch.manual_seed(cfg.seed)
        self.model = UnifiedTransformer(cfg.model, self.vocab).to(cfg.torch_dtype)
        self.teacher = MomentumTeacher(self.model, cfg.momentum, cfg.distill_weight) if cfg.teacher else None
        self.optimizer = build_optimizer(self.model, cfg.weight_decay, cfg.temp_lr_scale)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.loss_evaluations = 0
        self.history: list[dict] = []

    def next_batches(self) -> list[Batch]:
        if self.cfg.strategy == "full":
            tasks = list(self.cfg.task_set)
        else:
            tasks = [sample_task(self.rng, self.cfg.task_set)]
        batches = []
        for t in tasks:
            b = make_batch(t, self.scenes, self.vocab, self.rng, self.cfg)
            batches.append(dataclasses.replace(b, images=b.images.to(self.cfg.torch_dtype)))
        return batches

    def train_step(self) -> dict:
        batches = self.next_batches()
        m = train_step(self.model, self.teacher, self.optimizer, batches, self.cfg, self.step)
        self.loss_evaluations += len(batches)
        self.step += 1
        self.history.append(m)
        return m

    def run(self, steps: int | None = None, log_path: str | Path | None = None) -> list[dict]:
        steps = self.cfg.total_steps - self.step if steps is None else steps
        fh = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                m = self.train_step()
                if fh:
                    fh.write(metrics_line(m))
                if self.step % 100 == 0:
                    log.info("step %d task %s loss %.4f", m["step"], m["task"], m["loss"])
        finally:
            if fh:
                fh.close()
        return self.history[-steps:] if steps else []

    # checkpointing

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters():
            out[f"model/{name}"] = p.detach().numpy().copy()
        if self.teacher is not None:
            for name, p in self.teacher.named_parameters():
                out[f"teacher/{name}"] = p.detach().numpy().copy()
        names = {id(p): n for n, p in self.model.named_parameters()}
        for p, st in self.optimizer.state.items():
            n = names[id(p)]
            for key in ("exp_avg", "exp_avg_sq", "step"):
                out[f"optim/{key}/{n}"] = st[key].detach().numpy().copy()
        out["meta/step"] = np.array([self.step, self.loss_evaluations], dtype=np.int64)
        out["meta/config"] = ckpt.text_tensor(json.dumps(self.cfg.to_dict(), sort_keys=True))
        out["meta/vocab"] = ckpt.text_tensor(self.vocab.dumps())
        out["meta/rng_numpy"] = ckpt.text_tensor(json.dumps(self.rng.bit_generator.state))
        out["meta/rng_torch"] = torch.get_rng_state().numpy().copy()
        return out

    def save(self, path: str | Path) -> None:
        ckpt.save(path, self.state_tensors())

    @classmethod
    def load(cls, path: str | Path, scenes: list[Scene] | None = None) -> "Pretrainer":
        tensors = ckpt.load(path)
        cfg = TrainConfig.from_dict(json.loads(ckpt.tensor_text(tensors["meta/config"])))
        vocab = Vocabulary.loads(ckpt.tensor_text(tensors["meta/vocab"]))
        self = cls(cfg, scenes, vocab)
        self.restore(tensors)
        return self

    def restore(self, tensors: dict[str, np.ndarray]) -> None:
        load_module(self.model, tensors, "model/")
        if self.teacher is not None:
            load_module(self.teacher.model, tensors, "teacher/")
        self.optimizer.state.clear()
        for name, p in self.model.named_parameters():
            key = f"optim/exp_avg/{name}"
            if key in tensors:
                self.optimizer.state[p] = {
                    k: torch.from_numpy(tensors[f"optim/{k}/{name}"].copy()) for k in ("step", "exp_avg", "exp_avg_sq")
                }
        self.step, self.loss_evaluations = (int(x) for x in tensors["meta/step"])
        self.rng.bit_generator.state = json.loads(ckpt.tensor_text(tensors["meta/rng_numpy"]))
        torch.set_rng_state(torch.from_numpy(tensors["meta/rng_torch"].copy()))


def load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    """Strict load: every parameter must be present with matching shape."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            key = prefix + name
            if key not in tensors:
                raise ckpt.CheckpointError(f"checkpoint is missing parameter {key!r}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ckpt.CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
        expected = {prefix + n for n, _ in module.named_parameters()}
        extra = {k for k in tensors if k.startswith(prefix) and k not in expected}
        if extra:
            raise ckpt.CheckpointError(f"checkpoint has unknown parameters {sorted(extra)}")


def metrics_line(m: dict) -> str:
    return f"{m['step']}\t{m['task']}\t{m['loss']:.6f}\t{json.dumps(m['parts'], sort_keys=True)}\n"

"""The unified transformer: one parameter set used as image encoder, text encoder and fusion network."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

from . import tensor as T
from .tokenize import (
    IMAGE,
    IMAGE_KINDS,
    TEXT,
    ConfigError,
    TokenKind,
    TokenSequence,
    Vocabulary,
    add_modality,
    concat_pair,
    embed_ids,
    patchify,
    wrap_text,
)

BIDIRECTIONAL = "bidirectional"
SEQ2SEQ = "seq2seq"


class LayoutError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 8
    image_size: int = 32
    max_text_len: int = 16
    vocab_size: int = 512
    dropout: float = 0.0
    interpolate_pos: bool = True
    pixel_mean: float = 0.5  # pixels are standardized before patch projection
    pixel_std: float = 0.5

    def __post_init__(self):
        for k in ("layers", "hidden", "heads", "mlp_ratio", "patch_size", "image_size", "max_text_len", "vocab_size"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be a multiple of patch_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pixel_std <= 0:
            raise ConfigError("pixel_std must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)


def build_mask(kinds, mode: str = BIDIRECTIONAL) -> torch.Tensor:
    """Boolean attention mask; entry (i, j) true means output i may attend input j.

    Accepts a kind list (returns L x L) or a B x L tensor (returns B x L x L).
    Under seq2seq, image tokens see only image tokens and the text token at
    text position k sees every image token and text positions <= k. PAD
    tokens see only themselves and are seen by nobody else.
    """
    single = not torch.is_tensor(kinds)
    k = torch.as_tensor([int(x) for x in kinds] if single else kinds, dtype=torch.long)
    if k.dim() == 1:
        k = k.unsqueeze(0)
        single = True
    if mode not in (BIDIRECTIONAL, SEQ2SEQ):
        raise ValueError(f"unknown mask mode {mode!r}")
    is_img = (k == TokenKind.IMG_CLS) | (k == TokenKind.IMG_PATCH)
    is_pad = k == TokenKind.PAD
    is_txt = ~is_img & ~is_pad
    # image block must precede text block
    seen_txt = torch.cummax(is_txt.long(), dim=1).values.bool()
    if (seen_txt & is_img).any():
        raise LayoutError("image tokens must precede text tokens")
    valid = ~is_pad
    L = k.shape[1]
    if mode == BIDIRECTIONAL:
        m = valid[:, :, None] & valid[:, None, :]
    else:
        idx = torch.arange(L)
        causal = idx[None, :] <= idx[:, None]
        m = (is_img[:, :, None] & is_img[:, None, :]) | (
            is_txt[:, :, None] & (is_img[:, None, :] | (is_txt[:, None, :] & causal))
        )
    m = m | torch.eye(L, dtype=torch.bool)
    return m[0] if single else m


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return T.layernorm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, x, mask):
        B, L, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = T.matmul(q, k.transpose(-1, -2)) / math.sqrt(d // h)
        neg = -1e30 if scores.dtype == torch.float64 else -1e9
        scores = scores.masked_fill(~mask[:, None], neg)
        w = T.softmax(scores, axis=-1)
        if self.keep_weights:
            self.last_weights = w.detach()
        out = T.matmul(w, v).transpose(1, 2).reshape(B, L, d)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden
        self.attn_norm = LayerNorm(d)
        self.attn = Attention(d, cfg.heads)
        self.mlp_norm = LayerNorm(d)
        self.mlp = MLP(d, d * cfg.mlp_ratio, d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.attn_norm(x), mask))
        return x + self.drop(self.mlp(self.mlp_norm(x)))


class MLMHead(nn.Module):
    def __init__(self, d: int, vocab_size: int):
        super().__init__()
        self.dense = nn.Linear(d, d)
        self.norm = LayerNorm(d)
        self.out = nn.Linear(d, vocab_size)

    def forward(self, x):
        return self.out(self.norm(T.gelu(self.dense(x))))


class Encoded(NamedTuple):
    hidden: torch.Tensor
    kinds: torch.Tensor

    def at(self, kind: TokenKind) -> torch.Tensor:
        return representative(self.hidden, self.kinds, kind)


def representative(hidden: torch.Tensor, kinds: torch.Tensor, kind: TokenKind) -> torch.Tensor:
    """Hidden state at the first token of ``kind`` in every row (B x d)."""
    hit = kinds == int(kind)
    if not hit.any(dim=1).all():
        raise LayoutError(f"some sequence has no {TokenKind(kind).name} token")
    pos = hit.long().argmax(dim=1)
    return hidden[torch.arange(hidden.shape[0]), pos]


class UnifiedTransformer(nn.Module):
    """Pre-norm transformer shared by the image, text and fusion roles, plus pre-training heads."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        if len(vocab) != cfg.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} tokens but config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        d, p = cfg.hidden, cfg.patch_size
        self.patch_proj = nn.Linear(p * p * 3, d)
        self.img_cls_embed = nn.Parameter(torch.zeros(d))
        self.pos2d_embed = nn.Parameter(torch.zeros(cfg.grid, cfg.grid, d))
        self.text_embed = nn.Parameter(torch.zeros(cfg.vocab_size, d))
        self.pos1d_embed = nn.Parameter(torch.zeros(cfg.max_text_len, d))
        self.modal_embed = nn.Parameter(torch.zeros(2, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = LayerNorm(d)
        self.itm_head = MLP(d, 2 * d, 1)
        self.mlm_head = MLMHead(d, cfg.vocab_size)
        self.log_temp = nn.Parameter(torch.zeros(()))
        self.reset_parameters()

    def reset_parameters(self):
        for name, prm in self.named_parameters():
            kind = parameter_kind(name)
            if kind in ("weight", "embedding"):
                nn.init.trunc_normal_(prm, std=0.02)
            elif kind == "bias":
                nn.init.zeros_(prm)
        for m in self.modules():
            if isinstance(m, LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.log_temp)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temp.exp()

    @property
    def dtype(self):
        return self.text_embed.dtype

    # token construction

    def image_tokens(self, images: torch.Tensor) -> TokenSequence:
        images = (torch.as_tensor(images).to(self.dtype) - self.cfg.pixel_mean) / self.cfg.pixel_std
        seq = patchify(images, self.cfg.patch_size, self.patch_proj.weight, self.patch_proj.bias,
                       self.img_cls_embed, self.pos2d_embed, self.cfg.interpolate_pos)
        return seq

    def text_tokens(self, texts: Sequence[Sequence[int]], wrapped: bool = False) -> TokenSequence:
        full = list(texts) if wrapped else [wrap_text(t, self.vocab, self.cfg.max_text_len)[0] for t in texts]
        return embed_ids(full, self.vocab, self.text_embed, self.pos1d_embed)

    # transformer

    def forward(self, seq: TokenSequence, mask: torch.Tensor) -> torch.Tensor:
        x = seq.embeddings
        if mask.dim() == 2:
            mask = mask.expand(x.shape[0], -1, -1)
        if mask.shape[-1] != x.shape[1] or mask.shape[-2] != x.shape[1]:
            raise ValueError(f"mask extent {tuple(mask.shape)} does not match sequence length {x.shape[1]}")
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x)

    def encode_image(self, images) -> tuple[torch.Tensor, Encoded]:
        seq = add_modality(self.image_tokens(images), self.modal_embed, IMAGE)
        h = self(seq, build_mask(seq.kinds))
        enc = Encoded(h, seq.kinds)
        return enc.at(TokenKind.IMG_CLS), enc

    def encode_text(self, texts, wrapped: bool = False) -> tuple[torch.Tensor, torch.Tensor, Encoded]:
        seq = add_modality(self.text_tokens(texts, wrapped), self.modal_embed, TEXT)
        h = self(seq, build_mask(seq.kinds))
        enc = Encoded(h, seq.kinds)
        return enc.at(TokenKind.TXT_EOS), enc.at(TokenKind.TXT_CLS), enc

    def pair_tokens(self, images, texts, wrapped: bool = False) -> TokenSequence:
        return concat_pair(self.image_tokens(images), self.text_tokens(texts, wrapped), self.modal_embed)

    def encode_pair(self, images, texts, mode: str = BIDIRECTIONAL, wrapped: bool = False) -> Encoded:
        seq = self.pair_tokens(images, texts, wrapped)
        return Encoded(self(seq, build_mask(seq.kinds, mode)), seq.kinds)


def parameter_kind(name: str) -> str:
    """Kind tag used by the weight-decay policy."""
    parts = name.split(".")
    leaf = parts[-1]
    if leaf == "log_temp":
        return "temperature"
    if any(p.endswith("norm") for p in parts[:-1]):
        return "layernorm"
    if leaf.endswith("_embed"):
        return "embedding"
    if leaf == "bias":
        return "bias"
    if leaf == "weight":
        return "weight"
    raise ConfigError(f"parameter {name!r} has no kind tag")

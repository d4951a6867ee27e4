"""Image and text tokenization into d-dimensional token sequences."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

SPECIALS = ("[PAD]", "[CLS]", "[EOS]", "[MASK]", "[UNK]")
CONT = "##"


class VocabError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class TokenKind(enum.IntEnum):
    IMG_CLS = 0
    IMG_PATCH = 1
    TXT_CLS = 2
    TXT_TOKEN = 3
    TXT_EOS = 4
    TXT_MASK = 5
    PAD = 6


IMAGE_KINDS = (TokenKind.IMG_CLS, TokenKind.IMG_PATCH)
TEXT_KINDS = (TokenKind.TXT_CLS, TokenKind.TXT_TOKEN, TokenKind.TXT_EOS, TokenKind.TXT_MASK)
IMAGE, TEXT = 0, 1


class Vocabulary:
    """Whitespace word vocabulary with a character-bigram fallback for unknown words.

    An out-of-vocabulary word is split into two-character pieces; the first
    piece is a bare token, later pieces carry a ``##`` prefix and belong to the
    same word. Single letters in both forms are always present so any
    lowercase word can be spelled.
    """

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id, self.cls_id, self.eos_id, self.mask_id, self.unk_id = (self.index[s] for s in SPECIALS)
        self.special_ids = frozenset(range(len(SPECIALS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words: dict[str, None] = {}
        pieces: dict[str, None] = {}
        for text in texts:
            for w in text.lower().split():
                words.setdefault(w)
                for p in _pieces(w):
                    pieces.setdefault(p)
        letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
        tokens = list(SPECIALS)
        seen = set(tokens)
        for t in [*words, *letters, *(CONT + c for c in letters), *pieces]:
            if t not in seen:
                seen.add(t)
                tokens.append(t)
        return cls(tokens)

    @property
    def regular_ids(self) -> list[int]:
        return [i for i in range(len(self.tokens)) if i not in self.special_ids]

    def encode(self, text: str) -> tuple[list[int], list[int]]:
        """Token ids and the word index of every token."""
        ids, word_ids = [], []
        word = -1
        for w in text.split():
            if w not in self.index:
                w = w.lower()
            if w in self.index:
                if not w.startswith(CONT) or word < 0:
                    word += 1
                ids.append(self.index[w])
                word_ids.append(word)
                continue
            word += 1
            for p in _pieces(w):
                if p not in self.index:
                    spelled = self._spell(p)
                    ids.extend(spelled)
                    word_ids.extend([word] * len(spelled))
                else:
                    ids.append(self.index[p])
                    word_ids.append(word)
        return ids, word_ids

    def _spell(self, piece: str) -> list[int]:
        out = []
        for k, ch in enumerate(piece.removeprefix(CONT)):
            tok = ch if (k == 0 and not piece.startswith(CONT)) else CONT + ch
            out.append(self.index.get(tok, self.unk_id))
        return out

    def word_ids(self, ids: Sequence[int]) -> list[int]:
        """Word boundaries recovered from ``##`` continuation markers."""
        out, word = [], -1
        for i in ids:
            if not self.tokens[i].startswith(CONT) or word < 0:
                word += 1
            out.append(word)
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        """Space-joined tokens; ``encode(detokenize(ids))`` returns ``ids``."""
        return " ".join(self.tokens[i] for i in ids)

    def decode(self, ids: Sequence[int]) -> str:
        """Human-readable text with continuation pieces merged and specials dropped."""
        words: list[str] = []
        for i in ids:
            if i in self.special_ids:
                continue
            t = self.tokens[i]
            if t.startswith(CONT) and words:
                words[-1] += t[len(CONT):]
            else:
                words.append(t.removeprefix(CONT))
        return " ".join(words)

    def check(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabError(f"token id {i} outside vocabulary of size {len(self.tokens)}")

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def dumps(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            if not tok:
                raise VocabError(f"malformed vocabulary line {n}: {line!r}")
            rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise VocabError("vocabulary ids are not contiguous from 0")
        return cls([t for _, t in rows])

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.loads(Path(path).read_text())


def _pieces(word: str) -> list[str]:
    chunks = [word[i : i + 2] for i in range(0, len(word), 2)]
    return [c if k == 0 else CONT + c for k, c in enumerate(chunks)]


@dataclass
class TokenSequence:
    """A batch of embedded token sequences.

    embeddings is B x L x d; kinds and positions are B x L integer tensors.
    modality is "image", "text" or "pair".
    """

    embeddings: torch.Tensor
    kinds: torch.Tensor
    positions: torch.Tensor
    modality: str
    truncated: torch.Tensor | None = None

    def __post_init__(self):
        if self.embeddings.shape[:2] != self.kinds.shape:
            raise ValueError("embeddings rows do not match kinds length")

    def __len__(self) -> int:
        return self.kinds.shape[1]


def grid_embedding(pos2d: torch.Tensor, rows: int, cols: int, interpolate: bool = True) -> torch.Tensor:
    """Positional table (R x C x d) resampled to rows x cols, flattened row-major."""
    R, C, d = pos2d.shape
    if (rows, cols) == (R, C):
        return pos2d.reshape(R * C, d)
    if (rows > R or cols > C) and not interpolate:
        raise ConfigError(f"grid {rows}x{cols} exceeds positional table {R}x{C} and interpolation is off")
    grid = pos2d.permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(grid, size=(rows, cols), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).reshape(rows * cols, d)


def patchify(
    images: torch.Tensor,
    patch_size: int,
    proj_weight: torch.Tensor,
    proj_bias: torch.Tensor,
    cls_token: torch.Tensor,
    pos2d: torch.Tensor,
    interpolate: bool = True,
) -> TokenSequence:
    """Split B x H x W x C images into patches and project them.

    Patches are flattened in (row, col, channel) order. Row 0 of every
    sequence is the learnable image [CLS] token; it gets no positional term.
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    B, H, W, C = images.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"image extents {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    patches = images.reshape(B, gh, p, gw, p, C).permute(0, 1, 3, 2, 4, 5).reshape(B, gh * gw, p * p * C)
    emb = patches @ proj_weight.T + proj_bias + grid_embedding(pos2d, gh, gw, interpolate)
    cls = cls_token.reshape(1, 1, -1).expand(B, 1, -1)
    emb = torch.cat([cls, emb], dim=1)
    kinds = torch.full((B, 1 + gh * gw), int(TokenKind.IMG_PATCH), dtype=torch.long)
    kinds[:, 0] = TokenKind.IMG_CLS
    positions = torch.arange(1 + gh * gw).expand(B, -1)
    return TokenSequence(emb, kinds, positions, "image")


def wrap_text(ids: Sequence[int], vocab: Vocabulary, max_len: int) -> tuple[list[int], bool]:
    """[CLS] + ids + [EOS], truncating the body so the result fits ``max_len``."""
    vocab.check(ids)
    body = list(ids)
    truncated = len(body) + 2 > max_len
    if truncated:
        body = body[: max_len - 2]
    return [vocab.cls_id, *body, vocab.eos_id], truncated


def id_kinds(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    table = {vocab.cls_id: TokenKind.TXT_CLS, vocab.eos_id: TokenKind.TXT_EOS,
             vocab.mask_id: TokenKind.TXT_MASK, vocab.pad_id: TokenKind.PAD}
    return [int(table.get(i, TokenKind.TXT_TOKEN)) for i in ids]


def embed_ids(
    full_ids: Sequence[Sequence[int]],
    vocab: Vocabulary,
    emb: torch.Tensor,
    pos1d: torch.Tensor,
) -> TokenSequence:
    """Embed already-wrapped id sequences, right-padding to a common length."""
    L = max(len(s) for s in full_ids)
    if L > pos1d.shape[0]:
        raise ValueError(f"text length {L} exceeds positional table {pos1d.shape[0]}")
    B = len(full_ids)
    ids = torch.full((B, L), vocab.pad_id, dtype=torch.long)
    kinds = torch.full((B, L), int(TokenKind.PAD), dtype=torch.long)
    for b, s in enumerate(full_ids):
        vocab.check(s)
        ids[b, : len(s)] = torch.tensor(s, dtype=torch.long)
        kinds[b, : len(s)] = torch.tensor(id_kinds(s, vocab), dtype=torch.long)
    positions = torch.arange(L).expand(B, -1)
    x = emb[ids] + pos1d[:L]
    return TokenSequence(x, kinds, positions, "text")


def embed_text(
    texts: Sequence[Sequence[int]],
    vocab: Vocabulary,
    emb: torch.Tensor,
    pos1d: torch.Tensor,
) -> TokenSequence:
    wrapped = [wrap_text(t, vocab, pos1d.shape[0]) for t in texts]
    seq = embed_ids([w for w, _ in wrapped], vocab, emb, pos1d)
    seq.truncated = torch.tensor([t for _, t in wrapped])
    return seq


def add_modality(seq: TokenSequence, modal_emb: torch.Tensor, which: int) -> TokenSequence:
    return TokenSequence(seq.embeddings + modal_emb[which], seq.kinds, seq.positions, seq.modality, seq.truncated)


def concat_pair(img: TokenSequence, txt: TokenSequence, modal_emb: torch.Tensor | None = None) -> TokenSequence:
    """Image block first, text block second; modality embeddings added when given."""
    if img.embeddings.shape[-1] != txt.embeddings.shape[-1]:
        raise ValueError(
            f"hidden size mismatch: image {img.embeddings.shape[-1]} vs text {txt.embeddings.shape[-1]}"
        )
    if img.embeddings.shape[0] != txt.embeddings.shape[0]:
        raise ValueError("image and text batch sizes differ")
    ie, te = img.embeddings, txt.embeddings
    if modal_emb is not None:
        ie, te = ie + modal_emb[IMAGE], te + modal_emb[TEXT]
    return TokenSequence(
        torch.cat([ie, te], dim=1),
        torch.cat([img.kinds, txt.kinds], dim=1),
        torch.cat([img.positions, txt.positions], dim=1),
        "pair",
        txt.truncated,
    )

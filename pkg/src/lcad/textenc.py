"""Template-vocabulary tokenizer and a one-layer self-attention text encoder."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
from torch import nn

from .synthdata import COLOR_NAMES, SHAPES

PAD, UNK = 0, 1
N_TOK = 16
_SPLIT = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != ("<pad>", "<unk>"):
            raise ValueError("vocabulary must start with <pad>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")
        if len(self.tokens) > 64:
            raise ValueError(f"vocabulary too large ({len(self.tokens)} > 64)")

    @property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)


def default_vocabulary() -> Vocabulary:
    words = ("a", "an", "the", "and", ",", ".", *COLOR_NAMES, *SHAPES, "colorful", "image")
    return Vocabulary(("<pad>", "<unk>", *words))


def split_words(text: str) -> list[str]:
    if not text or not text.strip():
        raise ValueError("cannot tokenize empty text")
    if not text.isascii():
        raise ValueError(f"text must be ASCII: {text!r}")
    return _SPLIT.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary | None = None, n_tok: int = N_TOK) -> list[int]:
    """Word/punctuation split, unknown words to UNK, padded or truncated to ``n_tok``."""
    vocab = vocab or default_vocabulary()
    lookup = vocab.index
    ids = [lookup.get(w, UNK) for w in split_words(text)][:n_tok]
    return ids + [PAD] * (n_tok - len(ids))


def tokenize_batch(texts: list[str], vocab: Vocabulary | None = None, n_tok: int = N_TOK) -> torch.Tensor:
    return torch.tensor([tokenize(t, vocab, n_tok) for t in texts], dtype=torch.long)


class TextEncoder(nn.Module):
    """Token + position embedding followed by one pre-norm self-attention layer.

    Returns ``(embedding, pad_mask)`` where ``embedding`` is ``(B, n_tok, dim)``
    with exact zero rows at padded positions and ``pad_mask`` is True there.
    """

    def __init__(self, vocab: Vocabulary | None = None, n_tok: int = N_TOK, dim: int = 64, heads: int = 4):
        super().__init__()
        self.vocab = vocab or default_vocabulary()
        self.n_tok = n_tok
        self.dim = dim
        self.heads = heads
        self.token_emb = nn.Embedding(len(self.vocab), dim)
        self.pos_emb = nn.Parameter(torch.zeros(n_tok, dim))
        self.norm_in = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_out = nn.LayerNorm(dim)
        nn.init.normal_(self.token_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[1] != self.n_tok:
            raise ValueError(f"expected {self.n_tok} tokens per sequence, got {tokens.shape[1]}")
        if tokens.min() < 0 or tokens.max() >= len(self.vocab):
            raise ValueError(f"token index out of range [0, {len(self.vocab)})")
        pad = tokens == PAD
        x = self.token_emb(tokens) + self.pos_emb
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(self.norm_in(x)).view(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        # large finite fill keeps all-PAD rows NaN-free
        scores = scores.masked_fill(pad[:, None, None, :], -1e9)
        attn = scores.softmax(dim=-1) @ v
        x = x + self.proj(attn.transpose(1, 2).reshape(b, n, d))
        out = self.norm_out(x) * (~pad)[..., None].to(x.dtype)
        return out, pad

    def encode_texts(self, texts: list[str]) -> tuple[torch.Tensor, torch.Tensor]:
        tokens = tokenize_batch(texts, self.vocab, self.n_tok).to(self.pos_emb.device)
        return self(tokens)

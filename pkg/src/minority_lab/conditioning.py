"""Miniature text pipeline: vocabulary, prompts with a placeholder, encoder.

The encoder is deliberately tiny but order sensitive: every slot gets a
learned positional embedding before a per-slot feed-forward map, so a
placeholder token placed first or last yields a different conditioning
vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .schedule import DTYPE

PLACEHOLDER = "<S>"
POSITIONS = ("prefix", "postfix")
INIT_MODES = ("default", "gaussian", "word")


@dataclass(frozen=True)
class Prompt:
    content_tokens: tuple[str, ...]
    m: int = 0
    position: str = "postfix"

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ValueError(f"placeholder position must be one of {POSITIONS}")
        if self.m < 0:
            raise ValueError("placeholder count must be >= 0")

    @property
    def base(self) -> "Prompt":
        """The user prompt without placeholder slots."""
        return Prompt(self.content_tokens, 0, self.position)

    def with_placeholder(self, m: int, position: str | None = None) -> "Prompt":
        return Prompt(self.content_tokens, m, position or self.position)

    def __str__(self) -> str:
        toks = list(self.content_tokens)
        ph = [PLACEHOLDER] * self.m
        return " ".join(ph + toks if self.position == "prefix" else toks + ph)


@dataclass
class LearnableToken:
    v: torch.Tensor  # (m, e)
    init_mode: str = "default"
    init_word: str | None = None

    @property
    def m(self) -> int:
        return self.v.shape[-2]


class TextEncoder(nn.Module):
    """Vocabulary plus encoder parameters.

    Row ``len(words)`` of the embedding table is reserved for the
    placeholder's default initialisation; ``null_embedding`` is the token
    used for unconditional predictions.
    """

    def __init__(self, words: list[str], e: int = 16, c_e: int = 32, width: int = 64, max_len: int = 8,
                 seed: int = 0, emb_std: float = 0.05):
        super().__init__()
        if len(set(words)) != len(words):
            raise ValueError("duplicate word names in vocabulary")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.e, self.c_e, self.width, self.max_len = e, c_e, width, max_len
        g = torch.Generator().manual_seed(seed)

        def randn(*shape, std=1.0):
            return nn.Parameter(torch.randn(*shape, generator=g, dtype=DTYPE) * std)

        self.embedding = randn(len(words) + 1, e, std=emb_std)
        self.null_embedding = randn(e, std=emb_std)
        self.pos = randn(max_len, e, std=emb_std)
        self.w1 = randn(e, width, std=e**-0.5)
        self.b1 = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.w2 = randn(width, width, std=width**-0.5)
        self.b2 = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.head = randn(width, c_e, std=width**-0.5)
        self.head_b = nn.Parameter(torch.zeros(c_e, dtype=DTYPE))

    @property
    def placeholder_row(self) -> int:
        return len(self.words)

    def word_embedding(self, word: str) -> torch.Tensor:
        if word not in self.index:
            raise KeyError(f"unknown word {word!r}")
        return self.embedding[self.index[word]]

    def _encode_slots(self, slots: torch.Tensor) -> torch.Tensor:
        # slots (..., L, e) -> (..., c_e)
        L = slots.shape[-2]
        h = slots + self.pos[:L]
        h = nn.functional.silu(h @ self.w1 + self.b1)
        h = nn.functional.silu(h @ self.w2 + self.b2)
        return h.mean(-2) @ self.head + self.head_b

    def slots(self, prompt: Prompt, v: torch.Tensor | None = None) -> torch.Tensor:
        n = len(prompt.content_tokens) + prompt.m
        if n > self.max_len:
            raise ValueError(f"prompt has {n} slots, max is {self.max_len}")
        if n == 0:
            raise ValueError("empty prompt")
        idx = torch.tensor([self.index[w] if w in self.index else _unknown(w) for w in prompt.content_tokens],
                           dtype=torch.long)
        content = self.embedding[idx]
        if prompt.m == 0:
            if v is not None:
                raise ValueError("prompt has no placeholder but a token embedding was supplied")
            return content
        if v is None:
            raise ValueError(f"prompt has {prompt.m} placeholder slot(s) but no token embedding was supplied")
        if v.shape[-2:] != (prompt.m, self.e):
            raise ValueError(f"token embedding shape {tuple(v.shape)} does not match (m={prompt.m}, e={self.e})")
        content = content.expand(*v.shape[:-2], *content.shape)
        parts = (v, content) if prompt.position == "prefix" else (content, v)
        return torch.cat(parts, dim=-2)

    def forward(self, prompt: Prompt, v: torch.Tensor | None = None) -> torch.Tensor:
        return self._encode_slots(self.slots(prompt, v))


def _unknown(word):
    raise KeyError(f"unknown word {word!r}")


def build_vocab(world, seed: int = 0, **kwargs) -> TextEncoder:
    """One word per condition plus one attribute word per minority component."""
    words = [c.word for c in world.conditions] + sorted(world.attribute_words, key=_natural_key)
    return TextEncoder(words, seed=seed, **kwargs)


def _natural_key(w: str):
    head, _, tail = w.rpartition("_")
    return (head, int(tail)) if tail.isdigit() else (w, 0)


def encode(vocab: TextEncoder, prompt: Prompt, v: LearnableToken | torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(v, LearnableToken):
        v = v.v
    return vocab(prompt, v)


def encode_null(vocab: TextEncoder) -> torch.Tensor:
    return vocab._encode_slots(vocab.null_embedding[None, :])


def init_token(vocab: TextEncoder, mode: str = "default", m: int = 1, seed: int = 0,
               word: str | None = None) -> LearnableToken:
    """Initial placeholder embedding.

    ``default`` copies the reserved placeholder row, ``gaussian`` draws from
    a Gaussian matching the per-coordinate mean/variance of the word rows,
    ``word`` copies a vocabulary word.  The mode string ``"word(attr_0)"`` is
    accepted as shorthand for ``mode="word", word="attr_0"``.
    """
    if mode.startswith("word(") and mode.endswith(")"):
        mode, word = "word", mode[5:-1]
    if m < 1:
        raise ValueError("m must be >= 1")
    with torch.no_grad():
        if mode == "default":
            v = vocab.embedding[vocab.placeholder_row].expand(m, -1).clone()
        elif mode == "gaussian":
            table = vocab.embedding[: len(vocab.words)]
            mu, sd = table.mean(0), table.std(0)
            g = torch.Generator().manual_seed(seed)
            v = mu + sd * torch.randn(m, vocab.e, generator=g, dtype=DTYPE)
        elif mode == "word":
            if word is None:
                raise ValueError("word init requires a word")
            v = vocab.word_embedding(word).expand(m, -1).clone()
        else:
            raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    return LearnableToken(v=v.detach().clone(), init_mode=mode, init_word=word)

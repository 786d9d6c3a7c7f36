"""Prompt template and the reference text encoder.

The encoder is a small stand-in for a pretrained masked LM. Each token's
representation is::

    rep_t = mixer(embed(tok_t) + pos(t) + mean_s embed(tok_s))
    mixer(z) = z + tanh(z W1 + b1) W2 + b2

The prompt-wide mean is what lets the mask position depend on both words.
Anything producing per-token representations with the same outputs can
stand in for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PREFIX = "I finally discovered the relation between"
MASK = "<mask>"
UNK = "<unk>"
MAX_LEN = 64

_PREFIX_TOKENS = PREFIX.split()
_SCAFFOLD = _PREFIX_TOKENS + ["and", ":"]


class TemplateError(ValueError):
    pass


def render_template(head: str, tail: str) -> str:
    head, tail = head.strip(), tail.strip()
    if not head or not tail:
        raise TemplateError("head and tail must be non-empty")
    return f"{PREFIX} {head} and {tail} : {MASK}"


@dataclass(frozen=True)
class TokenizedPrompt:
    tokens: tuple[str, ...]
    mask_index: int
    head_span: tuple[int, int]  # inclusive
    tail_span: tuple[int, int]

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(sentence: str, head: str | None = None, tail: str | None = None,
             max_len: int = MAX_LEN) -> TokenizedPrompt:
    """Whitespace-tokenize a rendered prompt and locate the word spans.

    When ``head`` is given its token count fixes the split point; otherwise
    the middle must contain exactly one ``and``. Over-long prompts lose
    tokens from the left, starting with the template preamble; the mask is
    never dropped.
    """
    tokens = sentence.split()
    n_pre = len(_PREFIX_TOKENS)
    if tokens[:n_pre] != _PREFIX_TOKENS or tokens[-2:] != [":", MASK] or len(tokens) < n_pre + 5:
        raise TemplateError("sentence does not follow the prompt template")
    middle = tokens[n_pre:-2]
    if head is not None:
        n_head = len(head.split())
    else:
        ands = [i for i, tok in enumerate(middle) if tok == "and"]
        if len(ands) != 1:
            raise TemplateError("cannot resolve head/tail spans: ambiguous 'and'")
        n_head = ands[0]
    if n_head < 1 or n_head >= len(middle) - 1 or middle[n_head] != "and":
        raise TemplateError("cannot resolve head/tail spans")
    if tail is not None and len(tail.split()) != len(middle) - n_head - 1:
        raise TemplateError("tail does not match the sentence")
    head_span = (n_pre, n_pre + n_head - 1)
    tail_span = (n_pre + n_head + 1, len(tokens) - 3)
    mask_index = len(tokens) - 1

    drop = max(0, len(tokens) - max_len)
    if drop:
        if drop > head_span[1]:
            raise TemplateError("prompt too long: head span would be truncated away")
        tokens = tokens[drop:]
        head_span = (max(head_span[0] - drop, 0), head_span[1] - drop)
        tail_span = (tail_span[0] - drop, tail_span[1] - drop)
        mask_index -= drop
    assert tokens[mask_index] == MASK
    return TokenizedPrompt(tuple(tokens), mask_index, head_span, tail_span)


def prompt_for(head: str, tail: str, max_len: int = MAX_LEN) -> TokenizedPrompt:
    return tokenize(render_template(head, tail), head.strip(), tail.strip(), max_len)


class Vocabulary:
    """Case-folded token vocabulary with an UNK fallback."""

    def __init__(self, tokens: Iterable[str]):
        items = [UNK, MASK]
        seen = set(items)
        for tok in tokens:
            tok = tok.casefold() if tok not in (UNK, MASK) else tok
            if tok not in seen:
                seen.add(tok)
                items.append(tok)
        self.tokens = tuple(items)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        toks = list(_SCAFFOLD)
        for w in words:
            toks.extend(w.split())
        return cls(toks)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return self._key(token) in self._index

    def _key(self, token: str) -> str:
        return token if token in (UNK, MASK) else token.casefold()

    def id(self, token: str) -> int:
        return self._index.get(self._key(token), 0)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]


@dataclass
class EncoderParams:
    token_embeddings: Tensor  # (|vocab|, D)
    position_embeddings: Tensor  # (max_len, D)
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __post_init__(self):
        d = self.dim
        if self.position_embeddings.shape[1] != d:
            raise ad.ShapeError("position embeddings width differs from token embeddings")
        for m in (self.W1, self.W2):
            if m.shape != (d, d):
                raise ad.ShapeError(f"mixer matrix has shape {m.shape}, expected {(d, d)}")
        for b in (self.b1, self.b2):
            if b.shape != (d,):
                raise ad.ShapeError(f"mixer bias has shape {b.shape}, expected {(d,)}")

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]

    @property
    def max_len(self) -> int:
        return self.position_embeddings.shape[0]

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "token_embeddings": self.token_embeddings,
            "position_embeddings": self.position_embeddings,
            "W1": self.W1,
            "b1": self.b1,
            "W2": self.W2,
            "b2": self.b2,
        }


def init_encoder_params(rng: np.random.Generator, vocab_size: int, dim: int,
                        max_len: int = MAX_LEN, emb_std: float = 0.1) -> EncoderParams:
    std = 1.0 / np.sqrt(dim)
    return EncoderParams(
        ad.parameter(rng.normal(0.0, emb_std, (vocab_size, dim))),
        ad.parameter(rng.normal(0.0, emb_std * 0.1, (max_len, dim))),
        ad.parameter(rng.normal(0.0, std, (dim, dim))),
        ad.parameter(np.zeros(dim)),
        ad.parameter(rng.normal(0.0, std * 0.1, (dim, dim))),
        ad.parameter(np.zeros(dim)),
    )


@dataclass(frozen=True)
class PromptBatch:
    """Constant index and pooling matrices for a list of prompts."""

    token_ids: np.ndarray
    positions: np.ndarray
    prompt_mean: np.ndarray  # (T, T): row t averages the embeddings of t's prompt
    mask_rows: np.ndarray
    head_pool: np.ndarray  # (B, T)
    tail_pool: np.ndarray

    @property
    def size(self) -> int:
        return len(self.mask_rows)


def batch_prompts(prompts: Sequence[TokenizedPrompt], vocab: Vocabulary, max_len: int) -> PromptBatch:
    if not prompts:
        raise ValueError("empty prompt batch")
    total = sum(len(p) for p in prompts)
    token_ids = np.empty(total, dtype=np.intp)
    positions = np.empty(total, dtype=np.intp)
    prompt_mean = np.zeros((total, total))
    head_pool = np.zeros((len(prompts), total))
    tail_pool = np.zeros((len(prompts), total))
    mask_rows = np.empty(len(prompts), dtype=np.intp)
    start = 0
    for b, p in enumerate(prompts):
        n = len(p)
        if n > max_len:
            raise TemplateError(f"prompt of {n} tokens exceeds max_len {max_len}")
        token_ids[start:start + n] = vocab.ids(p.tokens)
        positions[start:start + n] = np.arange(n)
        prompt_mean[start:start + n, start:start + n] = 1.0 / n
        h0, h1 = p.head_span
        t0, t1 = p.tail_span
        head_pool[b, start + h0:start + h1 + 1] = 1.0 / (h1 - h0 + 1)
        tail_pool[b, start + t0:start + t1 + 1] = 1.0 / (t1 - t0 + 1)
        mask_rows[b] = start + p.mask_index
        start += n
    return PromptBatch(token_ids, positions, prompt_mean, mask_rows, head_pool, tail_pool)


def mixer(params: EncoderParams, z: Tensor) -> Tensor:
    hidden = ad.tanh(ad.add_bias(ad.matmul(z, params.W1), params.b1))
    return ad.add(z, ad.add_bias(ad.matmul(hidden, params.W2), params.b2))


def encode_batch(params: EncoderParams, batch: PromptBatch):
    """Returns ``(h_m, h_head, h_tail, token_reps)`` with one row per prompt."""
    emb = ad.select_rows(params.token_embeddings, batch.token_ids)
    pos = ad.select_rows(params.position_embeddings, batch.positions)
    ctx = ad.matmul(Tensor(batch.prompt_mean), emb)
    reps = mixer(params, ad.add(ad.add(emb, pos), ctx))
    h_m = ad.select_rows(reps, batch.mask_rows)
    h_head = ad.matmul(Tensor(batch.head_pool), reps)
    h_tail = ad.matmul(Tensor(batch.tail_pool), reps)
    return h_m, h_head, h_tail, reps


def encode(params: EncoderParams, prompt: TokenizedPrompt, vocab: Vocabulary):
    """Encode one prompt; outputs are ``(1, D)`` rows and the ``(T, D)`` token reps."""
    return encode_batch(params, batch_prompts([prompt], vocab, params.max_len))

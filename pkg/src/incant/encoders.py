"""Toy text/image encoders sharing a joint embedding space.

The text encoder is embedding lookup + sinusoidal positions + bidirectional
self-attention + feed-forward, followed by a frozen linear projection into the
joint space. The image encoder flattens a latent through two affine+tanh layers
and the same kind of projection. Embeddings, biases and projections are seeded
N(0, 1) * init_scale; attention and feed-forward matrices use ``mix_scale``
(1/sqrt(d) by default) so that context mixing is not negligible.
"""

from __future__ import annotations

import math
import warnings
from typing import Iterable, Optional, Sequence

import torch
from torch import nn

from .core import (EmbeddingMatrix, EncoderConfig, GlobalEmbedding, LatentImage, PromptState,
                   SimilarityScores, TokenSequence, as_tensor, cosine)

MASK_WORD = "-"

TOY_WORDS = (
    MASK_WORD, "a", "an", "the", "b", "and", "of", "on", "in", "at", "with", "next", "to",
    "inside", "under", "above", "behind", "near", "wearing", "holding", "left", "right",
    "red", "green", "blue", "yellow", "white", "black", "small", "big",
    "ball", "box", "cat", "dog", "elephant", "bag", "cup", "strawberry", "house", "flowers",
    "hat", "man", "woman", "balloon", "tree", "car", "bird", "apple", "chair", "table",
)


class UnknownWordsError(ValueError):
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        super().__init__("unknown words: " + ", ".join(self.words))


class Vocabulary:
    """Fixed word list; the id of a word is its line number."""

    def __init__(self, words: Iterable[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        if MASK_WORD not in self.index:
            raise ValueError(f"vocabulary must contain the mask word {MASK_WORD!r}")

    def __len__(self):
        return len(self.words)

    @property
    def mask_id(self) -> int:
        return self.index[MASK_WORD]

    @classmethod
    def toy(cls) -> "Vocabulary":
        return cls(TOY_WORDS)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path) as fh:
            return cls(line.rstrip("\n") for line in fh if line.strip())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.words) + "\n")

    def tokenize(self, text: str, n_max: Optional[int] = None) -> TokenSequence:
        words = text.lower().split()
        missing = [w for w in words if w not in self.index]
        if missing:
            raise UnknownWordsError(missing)
        if not words:
            raise ValueError("empty text")
        if n_max is not None and len(words) > n_max:
            raise ValueError(f"text has {len(words)} words, more than n_max={n_max}")
        return TokenSequence(tuple(words), tuple(self.index[w] for w in words))


def sinusoidal(n: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(dim, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * torch.div(i, 2, rounding_mode="floor")) / dim)
    out = torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))
    return out.to(dtype)


def _seeded_normal(gen: torch.Generator, *shape, scale: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(*shape, generator=gen, dtype=torch.float64) * scale,
                        requires_grad=False)


class ToyTextEncoder(nn.Module):
    """Frozen toy text encoder, batched over leading prompt dimensions."""

    def __init__(self, vocab_size: int, d: int = 32, max_length: int = 24, layers: int = 1,
                 ff_mult: int = 4, init_scale: float = 0.02, pos_scale: float = 0.02,
                 mix_scale: Optional[float] = None, seed: int = 0):
        super().__init__()
        if layers < 1:
            raise ValueError("at least one self-attention layer is required")
        self.vocab_size, self.d, self.max_length = vocab_size, d, max_length
        gen = torch.Generator().manual_seed(seed)
        self.token_embedding = _seeded_normal(gen, vocab_size, d, scale=init_scale)
        self.register_buffer("positions", sinusoidal(max_length, d) * pos_scale)
        mix = 1.0 / math.sqrt(d) if mix_scale is None else mix_scale
        self.blocks = nn.ModuleList()
        for _ in range(layers):
            blk = nn.ParameterDict({
                "wq": _seeded_normal(gen, d, d, scale=mix),
                "wk": _seeded_normal(gen, d, d, scale=mix),
                "wv": _seeded_normal(gen, d, d, scale=mix),
                "wo": _seeded_normal(gen, d, d, scale=mix),
                "w1": _seeded_normal(gen, d, ff_mult * d, scale=mix),
                "b1": _seeded_normal(gen, ff_mult * d, scale=init_scale),
                "w2": _seeded_normal(gen, ff_mult * d, d, scale=mix),
                "b2": _seeded_normal(gen, d, scale=init_scale),
            })
            self.blocks.append(blk)
        self.projection = _seeded_normal(gen, d, d, scale=init_scale)

    @property
    def dtype(self):
        return self.token_embedding.dtype

    def embed(self, ids: torch.Tensor, prompt: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.token_embedding[ids]
        if prompt is not None:
            prompt = prompt.to(x.dtype)
            lead = prompt.shape[:-2]
            x = torch.cat([x.expand(*lead, *x.shape), prompt], dim=-2)
        n = x.shape[-2]
        if n > self.max_length:
            raise ValueError(f"sequence of length {n} exceeds encoder max length {self.max_length}")
        return x + self.positions[:n]

    def contextualize(self, x: torch.Tensor) -> torch.Tensor:
        scale = 1.0 / math.sqrt(self.d)
        for blk in self.blocks:
            q, k, v = x @ blk["wq"], x @ blk["wk"], x @ blk["wv"]
            attn = torch.softmax((q @ k.transpose(-1, -2)) * scale, dim=-1)
            x = x + (attn @ v) @ blk["wo"]
            h = torch.nn.functional.gelu(x @ blk["w1"] + blk["b1"])
            x = x + h @ blk["w2"] + blk["b2"]
        return x

    def project(self, rows: torch.Tensor) -> torch.Tensor:
        return rows @ self.projection

    def forward(self, ids: torch.Tensor, prompt: Optional[torch.Tensor] = None):
        """Return (contextual rows, global embedding) as tensors."""
        rows = self.contextualize(self.embed(ids, prompt))
        return rows, self.project(rows[..., -1, :])


class ToyImageEncoder(nn.Module):
    def __init__(self, latent_shape: Sequence[int], d: int = 32, hidden: int = 64,
                 init_scale: float = 0.02, seed: int = 0):
        super().__init__()
        self.latent_shape = tuple(int(v) for v in latent_shape)
        n_in = math.prod(self.latent_shape)
        gen = torch.Generator().manual_seed(seed + 7919)
        # 1/sqrt(fan_in) keeps the first tanh out of saturation for unit-scale latents
        self.w1 = _seeded_normal(gen, n_in, hidden, scale=1.0 / math.sqrt(n_in))
        self.b1 = _seeded_normal(gen, hidden, scale=init_scale)
        self.w2 = _seeded_normal(gen, hidden, d, scale=1.0 / math.sqrt(hidden))
        self.b2 = _seeded_normal(gen, d, scale=init_scale)
        self.projection = _seeded_normal(gen, d, d, scale=init_scale)

    @property
    def dtype(self):
        return self.w1.dtype

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.latent_shape:
            raise ValueError(f"expected latent of shape {self.latent_shape}, got {tuple(x.shape)}")
        h = x.to(self.dtype).flatten(-3)
        h = torch.tanh(h @ self.w1 + self.b1)
        h = torch.tanh(h @ self.w2 + self.b2)
        return h @ self.projection


def build_text_encoder(cfg: EncoderConfig, vocab_size: int) -> ToyTextEncoder:
    return ToyTextEncoder(vocab_size, d=cfg.d, max_length=cfg.max_length, layers=cfg.layers,
                          ff_mult=cfg.ff_mult, init_scale=cfg.init_scale,
                          pos_scale=cfg.pos_scale, mix_scale=cfg.mix_init_scale, seed=cfg.seed)


def build_image_encoder(cfg: EncoderConfig, latent_shape) -> ToyImageEncoder:
    return ToyImageEncoder(latent_shape, d=cfg.image_d or cfg.d, hidden=cfg.image_hidden,
                           init_scale=cfg.init_scale, seed=cfg.seed)


def masked_ids(tokens: TokenSequence, mask_positions: Iterable[int], mask_id: int) -> list:
    ids = list(tokens.ids)
    for i in mask_positions:
        if not 0 <= i < tokens.n_o:
            raise IndexError(f"mask position {i} outside text of length {tokens.n_o}")
        ids[i] = mask_id
    return ids


def encode_text(encoder: ToyTextEncoder, tokens: TokenSequence,
                prompt: Optional[PromptState | torch.Tensor] = None,
                mask_positions: Iterable[int] = (), mask_id: int = 0):
    """Encode ``tokens`` (optionally with prompt rows appended and words masked).

    Returns ``(EmbeddingMatrix, GlobalEmbedding)``; differentiable in the prompt.
    """
    mask_positions = sorted(set(mask_positions))
    ids = torch.tensor(masked_ids(tokens, mask_positions, mask_id), dtype=torch.long)
    p = None if prompt is None else as_tensor(prompt)
    rows, glob = encoder(ids, p)
    roles = ["mask" if i in mask_positions else "word" for i in range(tokens.n_o)]
    if p is not None:
        roles += ["prompt"] * p.shape[-2]
    return EmbeddingMatrix(rows, tuple(roles)), GlobalEmbedding(glob)


def encode_image(encoder: ToyImageEncoder, latent: LatentImage | torch.Tensor) -> GlobalEmbedding:
    if isinstance(latent, LatentImage) and not latent.is_clean:
        raise ValueError("image encoder expects a clean latent")
    return GlobalEmbedding(encoder(as_tensor(latent)))


def word_image_similarity(token_matrix: EmbeddingMatrix | torch.Tensor,
                          image_embedding: GlobalEmbedding | torch.Tensor,
                          project=None) -> SimilarityScores:
    """Cosine between each projected word row and the image embedding.

    ``project`` maps encoder rows into the joint space (``ToyTextEncoder.project``);
    identity when omitted. Prompt rows of an :class:`EmbeddingMatrix` are dropped.
    """
    if isinstance(token_matrix, EmbeddingMatrix):
        rows = token_matrix.values[[i for i, r in enumerate(token_matrix.row_roles) if r != "prompt"]]
    else:
        rows = token_matrix
    with torch.no_grad():
        rows = rows.detach()
        if project is not None:
            rows = project(rows)
        img = as_tensor(image_embedding).detach().to(rows.dtype)
        zero = (rows * rows).sum(-1) == 0
        if bool(zero.any()):
            warnings.warn(f"zero-norm token rows {zero.nonzero().flatten().tolist()}; scored as 0")
        if float((img * img).sum()) == 0:
            warnings.warn("zero-norm image embedding; all scores set to 0")
            return SimilarityScores(tuple(0.0 for _ in range(rows.shape[0])))
        s = torch.where(zero, torch.zeros((), dtype=rows.dtype), cosine(rows, img.expand_as(rows)))
    return SimilarityScores(tuple(float(v) for v in s))

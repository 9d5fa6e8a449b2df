"""Quality-guidance directions and similarity-based word masking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import SimilarityScores, TokenSequence, as_tensor, normalize, require_nonzero
from .encoders import MASK_WORD


@dataclass(frozen=True)
class DirectionPair:
    """``image`` is a constant; ``text`` keeps its graph back to the prompt."""

    image: torch.Tensor
    text: torch.Tensor

    def __post_init__(self):
        if self.image.requires_grad:
            raise ValueError("image direction must be gradient-excluded")


def quality_direction(e_coarse, e_fine) -> torch.Tensor:
    """Unit fine-image embedding minus unit coarse-image embedding, detached."""
    c, f = as_tensor(e_coarse).detach(), as_tensor(e_fine).detach()
    require_nonzero(c, "coarse image embedding")
    require_nonzero(f, "fine image embedding")
    return normalize(f) - normalize(c)


def text_direction(e_hat_g, e_g) -> torch.Tensor:
    """Unit prompted-text embedding minus unit original-text embedding.

    Differentiable through ``e_hat_g`` only; ``e_g`` is treated as a constant.
    """
    e_hat, e = as_tensor(e_hat_g), as_tensor(e_g).detach()
    require_nonzero(e_hat, "prompted text embedding")
    require_nonzero(e, "text embedding")
    return normalize(e_hat) - normalize(e)


def percentile_threshold(scores, percentile: float = 30.0) -> float:
    return float(np.percentile(np.asarray(scores, dtype=np.float64), percentile))


def mask_text(tokens: TokenSequence, scores: SimilarityScores, mask_id: int,
              threshold: Optional[float] = None) -> tuple:
    """Replace every word whose score is strictly below the threshold with '-'.

    The threshold defaults to ``scores.threshold``. Returns the masked sequence
    and the sorted tuple of masked positions.
    """
    gamma = scores.threshold if threshold is None else threshold
    if gamma is None:
        raise ValueError("no threshold given")
    if scores.n != tokens.n_o:
        raise ValueError(f"{scores.n} scores for a text of {tokens.n_o} words")
    idx = tuple(i for i, s in enumerate(scores.scores) if s < gamma)
    if len(idx) == tokens.n_o:
        raise ValueError("degenerate mask: every word would be masked")
    words, ids = list(tokens.words), list(tokens.ids)
    for i in idx:
        words[i], ids[i] = MASK_WORD, mask_id
    return TokenSequence(tuple(words), tuple(ids)), idx


class MaskAuditLog:
    """JSON-lines record of mask events."""

    def __init__(self, path=None):
        self.path = path
        self.events = []

    def record(self, iteration: int, scores: SimilarityScores, masked) -> None:
        event = {"iteration": iteration, "scores": list(scores.scores),
                 "gamma": scores.threshold, "masked_indices": list(masked)}
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(event) + "\n")

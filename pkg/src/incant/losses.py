"""Guidance losses, all written as minimisation objectives.

The similarity terms (quality, semantic, text-text, text-image) are negated so
that minimising the weighted total increases alignment; sparsity is minimised
as is.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import torch

from .core import GuidanceWeights, NumericalAbort, as_tensor, cosine, require_nonzero
from .guidance import DirectionPair

TERMS = ("qual", "sem", "tt", "ti", "spar")


def loss_quality(direction: DirectionPair) -> torch.Tensor:
    return -(direction.image.detach() * direction.text).sum(-1)


def loss_semantic(e_hat_g, e_hat_mask_g, raw_dot: bool = False) -> torch.Tensor:
    a, b = as_tensor(e_hat_g), as_tensor(e_hat_mask_g)
    if raw_dot:
        return -(a * b).sum(-1)
    require_nonzero(a, "prompted text embedding")
    require_nonzero(b, "masked text embedding")
    return -cosine(a, b)


def loss_tt(e_hat_g, e_g) -> torch.Tensor:
    a, b = as_tensor(e_hat_g), as_tensor(e_g).detach()
    require_nonzero(a, "prompted text embedding")
    require_nonzero(b, "text embedding")
    return -cosine(a, b.expand_as(a))


def loss_ti(e_hat_g, e_img) -> torch.Tensor:
    a, b = as_tensor(e_hat_g), as_tensor(e_img).detach()
    require_nonzero(a, "prompted text embedding")
    require_nonzero(b, "image embedding")
    return -cosine(a, b.to(a.dtype).expand_as(a))


def loss_sparsity(contextual, n_o: int, n_p: int) -> torch.Tensor:
    """Sum over ordered pairs i != j of prompt rows of |cos(row_i, row_j)|."""
    rows = as_tensor(contextual)
    if rows.shape[-2] < n_o + n_p:
        raise ValueError(f"matrix has {rows.shape[-2]} rows, need n_o + n_p = {n_o + n_p}")
    p = rows[..., n_o:n_o + n_p, :]
    sq = (p * p).sum(-1)
    zero = sq == 0
    if bool(zero.any()):
        warnings.warn("zero-norm prompt row; its pairs contribute 0 to sparsity")
    safe = torch.where(zero, torch.ones_like(sq), sq)
    gram = (p[..., :, None, :] * p[..., None, :, :]).sum(-1)
    cos = torch.clamp(gram / torch.sqrt(safe[..., :, None] * safe[..., None, :]), -1.0, 1.0)
    keep = ~(zero[..., :, None] | zero[..., None, :])
    keep = keep & ~torch.eye(n_p, dtype=torch.bool)
    return torch.where(keep, cos.abs(), torch.zeros_like(cos)).sum((-1, -2))


@dataclass
class LossReport:
    qual: float
    sem: float
    tt: float
    ti: float
    spar: float
    total: float
    iteration: int = 0
    graph: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def terms(self) -> dict:
        return {k: getattr(self, k) for k in TERMS}

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, **self.terms(), "total": self.total}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LossReport":
        return cls(**{k: doc[k] for k in (*TERMS, "total", "iteration")})


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def total_loss(terms: Mapping[str, torch.Tensor], weights: GuidanceWeights,
               iteration: int = 0) -> LossReport:
    """Weighted sum ``qual, sem, tt, ti, spar`` in that order; ``graph`` carries autograd."""
    w = weights.as_dict()
    for name in TERMS:
        v = terms[name]
        if not math.isfinite(_scalar(v)):
            raise NumericalAbort(f"non-finite loss term {name!r}", term=name)
    total = None
    for name in TERMS:
        part = w[name] * terms[name]
        total = part if total is None else total + part
    return LossReport(**{k: _scalar(terms[k]) for k in TERMS}, total=_scalar(total),
                      iteration=iteration, graph=total)


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", *TERMS, "total"])
        for r in history:
            writer.writerow([r.iteration, *(repr(getattr(r, k)) for k in TERMS), repr(r.total)])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return [LossReport(**{k: float(row[k]) for k in (*TERMS, "total")}, iteration=int(row["iteration"]))
                for row in csv.DictReader(fh)]

"""Toy backend assembly: vocabulary, encoders, denoiser, schedule and weight cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .core import Config, NoiseSchedule
from .diffusion import ToyDenoiser, TrainReport, blob_dataset, train_toy_denoiser
from .encoders import (ToyImageEncoder, ToyTextEncoder, Vocabulary, build_image_encoder,
                       build_text_encoder)

log = logging.getLogger(__name__)

CACHE_VERSION = 1


@dataclass
class Backend:
    vocab: Vocabulary
    text_encoder: ToyTextEncoder
    image_encoder: ToyImageEncoder
    denoiser: ToyDenoiser
    schedule: NoiseSchedule
    latent_shape: tuple
    supports_capture: bool = True
    train_report: Optional[TrainReport] = None

    def modules(self) -> dict:
        return {"text_encoder": self.text_encoder, "image_encoder": self.image_encoder,
                "denoiser": self.denoiser}

    def to(self, dtype: torch.dtype) -> "Backend":
        for m in self.modules().values():
            m.to(dtype)
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.text_encoder.dtype

    def weights_hash(self) -> str:
        return weights_hash(self.modules())


def weights_hash(modules: dict) -> str:
    """sha256 over every parameter and buffer, in deterministic order."""
    h = hashlib.sha256()
    for name in sorted(modules):
        for key, value in sorted(modules[name].state_dict().items()):
            h.update(f"{name}.{key}:{value.dtype}:{tuple(value.shape)}".encode())
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def cache_key(cfg: Config) -> str:
    b = dict(vars(cfg.backend))
    b["latent_shape"] = list(b["latent_shape"])
    doc = {"version": CACHE_VERSION, "backend": b, "encoder": vars(cfg.encoder),
           "schedule": {k: getattr(cfg.schedule, k) for k in ("T", "beta_start", "beta_end")}}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:24]


def cache_dir(cfg: Optional[Config] = None) -> Path:
    if cfg is not None and cfg.io.cache_dir:
        return Path(cfg.io.cache_dir)
    env = os.environ.get("INCANT_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "incant"


def build_untrained(cfg: Config) -> Backend:
    vocab = Vocabulary.load(cfg.backend.vocab_file) if cfg.backend.vocab_file else Vocabulary.toy()
    text = build_text_encoder(cfg.encoder, len(vocab))
    image = build_image_encoder(cfg.encoder, cfg.backend.latent_shape)
    den = ToyDenoiser(cfg.backend.latent_shape, cond_dim=cfg.encoder.d, hidden=cfg.backend.hidden_channels,
                      timestep_dim=cfg.backend.timestep_dim, attn_dim=cfg.backend.attn_dim,
                      seed=cfg.backend.seed)
    for p in den.parameters():
        p.requires_grad_(False)
    text.to(torch.float32)
    image.to(torch.float32)
    return Backend(vocab, text, image, den, NoiseSchedule.from_config(cfg.schedule),
                   tuple(cfg.backend.latent_shape))


def caption_conditioning(backend: Backend, captions) -> torch.Tensor:
    with torch.no_grad():
        rows = [backend.text_encoder(torch.tensor(backend.vocab.tokenize(c).ids))[0] for c in captions]
    n = max(r.shape[0] for r in rows)
    if any(r.shape[0] != n for r in rows):
        raise ValueError("training captions must share one length")
    return torch.stack(rows)


def train_backend(cfg: Config) -> Backend:
    backend = build_untrained(cfg)
    images, captions = blob_dataset(cfg.backend.denoiser_dataset_size, cfg.backend.latent_shape,
                                    seed=cfg.backend.seed)
    conds = caption_conditioning(backend, captions)
    backend.train_report = train_toy_denoiser(
        backend.denoiser, images, conds, backend.schedule, cfg.backend.denoiser_train_steps,
        seed=cfg.backend.seed, batch_size=cfg.backend.denoiser_batch_size, lr=cfg.backend.denoiser_lr)
    return backend


def load_backend(cfg: Config, use_cache: bool = True) -> Backend:
    """Trained toy backend in ``cfg.dtype``; trained once and cached by content key."""
    path = cache_dir(cfg) / cache_key(cfg) / "weights.pt"
    if use_cache and path.exists():
        backend = build_untrained(cfg)
        state = torch.load(path, weights_only=True)
        for name, module in backend.modules().items():
            module.load_state_dict(state[name])
        log.debug("loaded toy backend from %s", path)
    else:
        log.info("training toy denoiser (%d steps)", cfg.backend.denoiser_train_steps)
        backend = train_backend(cfg)
        if use_cache:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            torch.save({n: m.state_dict() for n, m in backend.modules().items()}, tmp)
            os.replace(tmp, path)
            with open(path.parent / "train_report.json", "w") as fh:
                r = backend.train_report
                json.dump({"initial_eval": r.initial_eval, "final_eval": r.final_eval,
                           "losses": r.losses}, fh)
    return backend.to(cfg.dtype)


def weights_path(cfg: Config) -> Path:
    return cache_dir(cfg) / cache_key(cfg) / "weights.pt"


def plant_text_encoder(encoder: ToyTextEncoder) -> ToyTextEncoder:
    """Rewire a text encoder so the last prompt row sets the global embedding.

    The projection becomes the identity and the attention and feed-forward
    outputs are zeroed, leaving global = last input row + its position signal.
    A prompt whose last row is ``target - positions[n - 1]`` therefore
    reproduces ``target`` exactly.
    """
    with torch.no_grad():
        encoder.projection.copy_(torch.eye(encoder.d, dtype=encoder.dtype))
        for blk in encoder.blocks:
            blk["wo"].zero_()
            blk["w2"].zero_()
            blk["b2"].zero_()
    return encoder


def planted_target(backend: Backend, n_rows: int, target: torch.Tensor) -> torch.Tensor:
    """Last-row prompt value that maps to ``target`` in a planted encoder."""
    return target.to(backend.dtype) - backend.text_encoder.positions[n_rows - 1]

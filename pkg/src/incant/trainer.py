"""Two-stage per-input prompt optimisation.

Stage 1 samples coarse and fine images from one initial noise with the plain
text. Stage 2 learns prompt rows appended to the text, with every
image-derived quantity held constant between periodic refreshes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import torch

from .backend import Backend
from .core import (Config, EmbeddingMatrix, GlobalEmbedding, GuidanceWeights, LatentImage,
                   NumericalAbort, PromptState, SimilarityScores, TokenSequence, check_config,
                   tensor_from_dict)
from .diffusion import initial_noise, pipeline, renoise, sample
from .encoders import encode_image, masked_ids, word_image_similarity
from .guidance import (DirectionPair, MaskAuditLog, mask_text, percentile_threshold,
                       quality_direction, text_direction)
from .losses import (TERMS, LossReport, loss_quality, loss_semantic, loss_sparsity, loss_ti,
                     loss_tt, total_loss)

log = logging.getLogger(__name__)


def stream_seed(seed: int, name: str) -> int:
    """Independent, reproducible seed for one named random stream of a run."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


@dataclass(frozen=True)
class Stage1Cache:
    tokens: TokenSequence
    x_T: LatentImage
    x_coarse: LatentImage
    x_fine: LatentImage
    e_img_coarse: torch.Tensor
    e_img_fine: torch.Tensor
    delta_img: torch.Tensor
    e_txt: EmbeddingMatrix
    e_txt_g: torch.Tensor
    x_T_star: Optional[LatentImage] = None

    @property
    def stage2_start(self) -> LatentImage:
        """Initial latent for every stage-2 sampling pass."""
        return self.x_T if self.x_T_star is None else self.x_T_star


@dataclass
class OptimizationRun:
    text: str
    seed: int
    config: Config
    prompt: PromptState
    cache: Stage1Cache
    history: list = field(default_factory=list)
    iteration: int = 0
    e_img: Optional[torch.Tensor] = None
    scores: Optional[SimilarityScores] = None
    masked: Optional[TokenSequence] = None
    mask_positions: tuple = ()
    audit: MaskAuditLog = field(default_factory=MaskAuditLog)

    @property
    def tokens(self) -> TokenSequence:
        return self.cache.tokens


def stage1(backend: Backend, text: str, seed: int, config: Config) -> Stage1Cache:
    """Coarse and fine sampling of the plain text from the same seeded x_T."""
    tokens = backend.vocab.tokenize(text, config.encoder.n_max)
    s = config.schedule
    clip = config.backend.clip_denoised
    with torch.no_grad():
        rows, g = backend.text_encoder(torch.tensor(tokens.ids))
    e_txt = EmbeddingMatrix(rows, ("word",) * tokens.n_o)
    x_T = initial_noise(backend.latent_shape, stream_seed(seed, "x_T"), backend.dtype)
    x_coarse, _ = sample(backend.denoiser, x_T, rows, s.T_coarse, backend.schedule, clip_denoised=clip)
    x_fine, _ = sample(backend.denoiser, x_T, rows, s.T_fine, backend.schedule, clip_denoised=clip)
    with torch.no_grad():
        e_c = encode_image(backend.image_encoder, x_coarse).values
        e_f = encode_image(backend.image_encoder, x_fine).values
    x_star = None
    if config.training.pipeline_mode == "2step":
        x_star = renoise(x_fine, backend.schedule, stream_seed(seed, "renoise"))
    return Stage1Cache(tokens, x_T, x_coarse, x_fine, e_c, e_f, quality_direction(e_c, e_f),
                       e_txt, g, x_star)


def init_prompt(config: Config, seed: int = 0, dtype: Optional[torch.dtype] = None) -> PromptState:
    gen = torch.Generator().manual_seed(stream_seed(seed, "prompt"))
    shape = (config.prompt.n_p, config.encoder.d)
    values = torch.randn(shape, generator=gen, dtype=torch.float64) * config.prompt.init_std
    return PromptState(values.to(dtype or config.dtype).requires_grad_(True), 0)


def new_run(backend: Backend, text: str, seed: int, config: Config,
            cache: Optional[Stage1Cache] = None) -> OptimizationRun:
    cache = cache if cache is not None else stage1(backend, text, seed, config)
    return OptimizationRun(text, seed, config, init_prompt(config, seed, backend.dtype), cache)


def prompted_rows(backend: Backend, run: OptimizationRun) -> torch.Tensor:
    with torch.no_grad():
        rows, _ = backend.text_encoder(torch.tensor(run.tokens.ids), run.prompt.values)
    return rows


def refresh(backend: Backend, run: OptimizationRun) -> None:
    """Recompute the image embedding, word scores and mask for the current prompt.

    The first refresh uses the stage-1 fine image; later ones resample with the
    prompted conditioning.
    """
    cfg = run.config
    if run.e_img is None:
        image = run.cache.x_fine
    else:
        image, _ = sample(backend.denoiser, run.cache.stage2_start, prompted_rows(backend, run),
                          cfg.schedule.T_fine, backend.schedule, clip_denoised=cfg.backend.clip_denoised)
    with torch.no_grad():
        run.e_img = encode_image(backend.image_encoder, image).values.detach()
    raw = word_image_similarity(run.cache.e_txt, run.e_img, project=backend.text_encoder.project)
    scores = SimilarityScores(raw.scores, percentile_threshold(raw.scores, cfg.training.mask_percentile))
    run.scores = scores
    run.masked, run.mask_positions = mask_text(run.tokens, scores, backend.vocab.mask_id)
    run.audit.record(run.iteration, scores, run.mask_positions)


def loss_terms(backend: Backend, run: OptimizationRun, prompt: Optional[torch.Tensor] = None) -> dict:
    """All five loss terms for ``prompt`` (defaults to the run's prompt)."""
    p = run.prompt.values if prompt is None else prompt
    enc = backend.text_encoder
    rows, g_hat = enc(torch.tensor(run.tokens.ids), p)
    _, g_mask = enc(torch.tensor(masked_ids(run.tokens, run.mask_positions, backend.vocab.mask_id)), p)
    e_g = run.cache.e_txt_g
    return {
        "qual": loss_quality(DirectionPair(run.cache.delta_img, text_direction(g_hat, e_g))),
        "sem": loss_semantic(g_hat, g_mask, raw_dot=run.config.training.raw_dot_sem),
        "tt": loss_tt(g_hat, e_g),
        "ti": loss_ti(g_hat, run.e_img),
        "spar": loss_sparsity(rows, run.tokens.n_o, p.shape[-2]),
    }


def _refresh_due(it: int, period: Optional[int]) -> bool:
    return it == 0 or (period is not None and it % period == 0)


def optimize(backend: Backend, run: OptimizationRun,
             callback: Optional[Callable[[OptimizationRun, LossReport], None]] = None) -> PromptState:
    """Adam on the prompt rows only; logs iterations 0..N (N + 1 reports).

    On a non-finite loss raises :class:`NumericalAbort` with ``.state`` holding
    the last good prompt.
    """
    cfg = run.config
    weights = GuidanceWeights.from_config(cfg.weights)
    n_iter = cfg.training.iterations
    opt = torch.optim.Adam([run.prompt.values], lr=cfg.training.lr)
    start = run.iteration
    for it in range(start, n_iter + 1):
        run.iteration = it
        if it < n_iter and _refresh_due(it, cfg.training.refresh_period) or run.e_img is None:
            refresh(backend, run)
        last_good = run.prompt.copy()
        try:
            report = total_loss(loss_terms(backend, run), weights, iteration=it)
        except NumericalAbort as exc:
            exc.state = last_good
            raise
        run.history.append(report)
        if callback is not None:
            callback(run, report)
        if it == n_iter:
            break
        opt.zero_grad()
        report.graph.backward()
        report.graph = None
        opt.step()
        run.prompt.step_count += 1
        if not bool(torch.isfinite(run.prompt.values).all()):
            exc = NumericalAbort(f"non-finite prompt after step {it}", step=it)
            exc.state = last_good
            raise exc
    return run.prompt


def synthesize_final(backend: Backend, run: OptimizationRun, mode: Optional[str] = None) -> LatentImage:
    """Final image from the cached x_T with the current prompt.

    '2step' runs denoise (plain text), renoise, denoise (prompted text).
    """
    cfg = run.config
    mode = mode or cfg.training.pipeline_mode
    rows = prompted_rows(backend, run)
    if mode == "1step":
        return sample(backend.denoiser, run.cache.x_T, rows, cfg.schedule.T_fine, backend.schedule,
                      clip_denoised=cfg.backend.clip_denoised)[0]
    return pipeline(backend.denoiser, run.cache.x_T, run.cache.e_txt, "2step", backend.schedule,
                    cfg.schedule.T_fine, seed=stream_seed(run.seed, "renoise"), cond_second=rows,
                    clip_denoised=cfg.backend.clip_denoised)


# ---------------------------------------------------------------------------
# ablation

def parse_variant(spec) -> tuple:
    """``"full"`` -> (); ``"no-qual+sem"`` / ``"qual+sem"`` / {"qual","sem"} -> ("qual", "sem")."""
    if isinstance(spec, str):
        if spec == "full":
            return ()
        spec = spec.removeprefix("no-").split("+")
    off = tuple(sorted(set(spec)))
    bad = [t for t in off if t not in TERMS]
    if bad:
        raise ValueError(f"unknown loss terms {bad}; choose from {TERMS}")
    return off


def variant_name(off: tuple) -> str:
    return "full" if not off else "no-" + "+".join(off)


def variant_config(config: Config, off: tuple) -> Config:
    return check_config(config.replace(weights={t: 0.0 for t in off}))


@dataclass
class VariantResult:
    history: list
    image: LatentImage
    run: OptimizationRun

    def __iter__(self):
        return iter((self.history, self.image))


def ablate(backend: Backend, text: str, seed: int, config: Config, toggles: Iterable = ()) -> dict:
    """Run ``full`` plus one variant per toggle, all sharing one stage-1 cache."""
    offs = [()] + [parse_variant(t) for t in toggles]
    offs = list(dict.fromkeys(offs))
    configs = {variant_name(o): variant_config(config, o) for o in offs}
    cache = stage1(backend, text, seed, config)
    out = {}
    for name, cfg in configs.items():
        run = new_run(backend, text, seed, cfg, cache)
        optimize(backend, run)
        out[name] = VariantResult(run.history, synthesize_final(backend, run), run)
    return out


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_dict(run: OptimizationRun) -> dict:
    values = run.prompt.values.detach().to(torch.float64)
    return {
        "text": run.text,
        "seed": run.seed,
        "config": run.config.to_dict(),
        "n_p": run.prompt.n_p,
        "d": values.shape[1],
        "dtype": str(run.prompt.values.dtype).removeprefix("torch."),
        "prompt": values.reshape(-1).tolist(),
        "iteration": run.prompt.step_count,
        "loss_history": [r.to_dict() for r in run.history],
    }


def save_checkpoint(path, run: OptimizationRun, prompt: Optional[PromptState] = None) -> None:
    doc = checkpoint_dict(run)
    if prompt is not None:
        doc["prompt"] = prompt.values.detach().to(torch.float64).reshape(-1).tolist()
        doc["iteration"] = prompt.step_count
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_checkpoint(path) -> dict:
    """Checkpoint document with ``prompt`` decoded to a :class:`PromptState`."""
    with open(path) as fh:
        doc = json.load(fh)
    values = tensor_from_dict({"dtype": "float64", "shape": [doc["n_p"], doc["d"]], "data": doc["prompt"]})
    dtype = {"float32": torch.float32, "float64": torch.float64}[doc.get("dtype", "float64")]
    doc["prompt"] = PromptState(values.to(dtype), doc["iteration"])
    doc["loss_history"] = [LossReport.from_dict(r) for r in doc["loss_history"]]
    return doc

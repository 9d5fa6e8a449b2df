"""Domain types, run configuration and the noise schedule."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import torch


class ConfigError(ValueError):
    """Raised when a run configuration is rejected.

    ``path`` names the offending field, e.g. ``"schedule.T_coarse"``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalAbort(RuntimeError):
    """A computation produced a non-finite value and was stopped."""

    def __init__(self, message: str, step: Optional[int] = None, term: Optional[str] = None):
        self.step = step
        self.term = term
        super().__init__(message)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class BackendConfig:
    name: str = "toy"
    seed: int = 0
    latent_shape: tuple = (3, 8, 8)
    hidden_channels: int = 32
    timestep_dim: int = 32
    attn_dim: int = 32
    denoiser_train_steps: int = 2000
    denoiser_dataset_size: int = 256
    denoiser_batch_size: int = 32
    denoiser_lr: float = 2e-3
    vocab_file: Optional[str] = None
    clip_denoised: bool = True


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    T_coarse: int = 10
    T_fine: int = 50


@dataclass
class EncoderConfig:
    d: int = 32
    image_d: Optional[int] = None
    n_max: int = 16
    max_length: int = 24
    layers: int = 1
    ff_mult: int = 4
    init_scale: float = 0.02
    pos_scale: float = 0.02
    mix_init_scale: Optional[float] = None
    image_hidden: int = 64
    seed: int = 0


@dataclass
class PromptConfig:
    n_p: int = 4
    init_std: float = 0.02


@dataclass
class WeightsConfig:
    qual: float = 1.0
    sem: float = 0.5
    tt: float = 0.5
    ti: float = 0.5
    spar: float = 0.1


@dataclass
class TrainingConfig:
    iterations: int = 100
    lr: float = 1e-2
    refresh_period: Optional[int] = 25
    mask_percentile: float = 30.0
    pipeline_mode: str = "1step"
    precision: str = "float32"
    raw_dot_sem: bool = False


@dataclass
class IOConfig:
    out_dir: str = "out"
    cache_dir: Optional[str] = None
    png_scale: int = 8
    audit_log: bool = True


SECTIONS = {
    "backend": BackendConfig,
    "schedule": ScheduleConfig,
    "encoder": EncoderConfig,
    "prompt": PromptConfig,
    "weights": WeightsConfig,
    "training": TrainingConfig,
    "io": IOConfig,
}


@dataclass
class Config:
    backend: BackendConfig = field(default_factory=BackendConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    io: IOConfig = field(default_factory=IOConfig)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.training.precision == "float64" else torch.float32

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["backend"]["latent_shape"] = list(self.backend.latent_shape)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **sections: dict) -> "Config":
        """Copy with per-section field overrides: ``cfg.replace(weights={"qual": 0})``."""
        kw = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            kw[name] = dataclasses.replace(sec, **sections.get(name, {}))
        return Config(**kw)


def _check_positive_int(value, path, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(path, f"must be an integer >= {minimum}, got {value!r}")


def validate_config(raw: Optional[dict] = None) -> Config:
    """Parse a raw configuration document, fill defaults and cross-check it."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("", "configuration must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(unknown[0], "unknown top-level key")

    sections = {}
    for name, cls in SECTIONS.items():
        doc = raw.get(name, {})
        if not isinstance(doc, dict):
            raise ConfigError(name, "must be an object")
        names = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(doc) - names)
        if bad:
            raise ConfigError(f"{name}.{bad[0]}", "unknown key")
        doc = dict(doc)
        if "latent_shape" in doc:
            doc["latent_shape"] = tuple(doc["latent_shape"])
        sections[name] = cls(**doc)
    cfg = Config(**sections)
    check_config(cfg)
    return cfg


def check_config(cfg: Config) -> Config:
    """Cross-field checks; raises :class:`ConfigError` on the first violation."""
    b, s, e, p, w, t = cfg.backend, cfg.schedule, cfg.encoder, cfg.prompt, cfg.weights, cfg.training

    if b.name != "toy":
        raise ConfigError("backend.name", f"unsupported backend {b.name!r}")
    if len(b.latent_shape) != 3 or any(int(v) < 1 for v in b.latent_shape):
        raise ConfigError("backend.latent_shape", "must be [c, h, w] of positive ints")
    for key in ("hidden_channels", "timestep_dim", "attn_dim", "denoiser_batch_size"):
        _check_positive_int(getattr(b, key), f"backend.{key}")
    _check_positive_int(b.denoiser_train_steps, "backend.denoiser_train_steps", 0)
    _check_positive_int(b.denoiser_dataset_size, "backend.denoiser_dataset_size")

    _check_positive_int(s.T, "schedule.T")
    if not (0.0 < s.beta_start < 1.0 and 0.0 < s.beta_end < 1.0):
        raise ConfigError("schedule.beta_start", "betas must lie in (0, 1)")
    _check_positive_int(s.T_coarse, "schedule.T_coarse")
    _check_positive_int(s.T_fine, "schedule.T_fine")
    if s.T_coarse >= s.T_fine:
        raise ConfigError("schedule.T_coarse", "T_coarse must be < T_fine")
    if s.T_fine > s.T:
        raise ConfigError("schedule.T_fine", "T_fine must be <= T")

    _check_positive_int(e.d, "encoder.d")
    if e.image_d is not None and e.image_d != e.d:
        raise ConfigError("encoder.image_d", f"dimension mismatch: image_d={e.image_d} but d={e.d}")
    _check_positive_int(e.layers, "encoder.layers")
    _check_positive_int(e.n_max, "encoder.n_max")
    _check_positive_int(p.n_p, "prompt.n_p")
    if e.n_max + p.n_p > e.max_length:
        raise ConfigError("encoder.max_length",
                          f"n_max + n_p = {e.n_max + p.n_p} exceeds max_length {e.max_length}")
    if p.init_std < 0:
        raise ConfigError("prompt.init_std", "must be >= 0")

    values = dataclasses.asdict(w)
    for k, v in values.items():
        if not math.isfinite(v) or v < 0:
            raise ConfigError(f"weights.{k}", "guidance weights must be finite and >= 0")
    if not any(v > 0 for v in values.values()):
        raise ConfigError("weights", "at least one guidance weight positive is required")

    _check_positive_int(t.iterations, "training.iterations", 0)
    if not t.lr > 0:
        raise ConfigError("training.lr", "must be > 0")
    if t.refresh_period is not None:
        _check_positive_int(t.refresh_period, "training.refresh_period")
    if not 0.0 <= t.mask_percentile <= 100.0:
        raise ConfigError("training.mask_percentile", "must lie in [0, 100]")
    if t.pipeline_mode not in ("1step", "2step"):
        raise ConfigError("training.pipeline_mode", "must be '1step' or '2step'")
    if t.precision not in ("float32", "float64"):
        raise ConfigError("training.precision", "must be 'float32' or 'float64'")
    _check_positive_int(cfg.io.png_scale, "io.png_scale")
    return cfg


def load_config(path: Optional[str] = None) -> Config:
    if path is None:
        return validate_config({})
    with open(path) as fh:
        return validate_config(json.load(fh))


# ---------------------------------------------------------------------------
# tensor (de)serialization helpers

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def tensor_to_dict(t: torch.Tensor) -> dict:
    t = t.detach().cpu()
    return {"dtype": str(t.dtype).removeprefix("torch."), "shape": list(t.shape),
            "data": t.reshape(-1).tolist()}


def tensor_from_dict(doc: dict) -> torch.Tensor:
    return torch.tensor(doc["data"], dtype=_DTYPES[doc["dtype"]]).reshape(doc["shape"])


# ---------------------------------------------------------------------------
# domain types

ROLES = ("word", "prompt", "mask")


@dataclass(frozen=True)
class TokenSequence:
    words: tuple
    ids: tuple

    def __post_init__(self):
        if len(self.words) != len(self.ids):
            raise ValueError("words and ids must have equal length")
        if len(self.words) == 0:
            raise ValueError("token sequence must not be empty")

    @property
    def n_o(self) -> int:
        return len(self.ids)

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def to_dict(self) -> dict:
        return {"words": list(self.words), "ids": list(self.ids)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TokenSequence":
        return cls(tuple(doc["words"]), tuple(doc["ids"]))


@dataclass(frozen=True)
class EmbeddingMatrix:
    values: torch.Tensor
    row_roles: tuple

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] < 1:
            raise ValueError("embedding matrix must be 2-D with at least one row")
        if len(self.row_roles) != self.values.shape[0]:
            raise ValueError("one role per row required")
        if any(r not in ROLES for r in self.row_roles):
            raise ValueError(f"row roles must be in {ROLES}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def rows(self, role: str) -> torch.Tensor:
        idx = [i for i, r in enumerate(self.row_roles) if r == role]
        return self.values[idx]

    def to_dict(self) -> dict:
        return {"values": tensor_to_dict(self.values), "row_roles": list(self.row_roles)}

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbeddingMatrix":
        return cls(tensor_from_dict(doc["values"]), tuple(doc["row_roles"]))


@dataclass(frozen=True)
class GlobalEmbedding:
    values: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.normalized:
            n = float(torch.linalg.vector_norm(self.values.detach()))
            if abs(n - 1.0) > 1e-6:
                raise ValueError(f"normalized flag set but norm is {n}")

    def to_dict(self) -> dict:
        return {"values": tensor_to_dict(self.values), "normalized": self.normalized}

    @classmethod
    def from_dict(cls, doc: dict) -> "GlobalEmbedding":
        return cls(tensor_from_dict(doc["values"]), doc["normalized"])


@dataclass
class PromptState:
    """The learnable prompt rows; the only trainable parameters of a run."""

    values: torch.Tensor
    step_count: int = 0

    def __post_init__(self):
        if self.values.dim() != 2 or self.values.shape[0] < 1:
            raise ValueError("prompt must be an (n_p, d) matrix with n_p >= 1")
        if not self.values.requires_grad:
            self.values = self.values.detach().clone().requires_grad_(True)

    @property
    def n_p(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "PromptState":
        return PromptState(self.values.detach().clone(), self.step_count)

    def to_dict(self) -> dict:
        return {"values": tensor_to_dict(self.values), "step_count": self.step_count}

    @classmethod
    def from_dict(cls, doc: dict) -> "PromptState":
        return cls(tensor_from_dict(doc["values"]), doc["step_count"])


@dataclass(frozen=True)
class LatentImage:
    values: torch.Tensor
    t: Any = "clean"

    @property
    def is_clean(self) -> bool:
        return self.t == "clean"

    def to_dict(self) -> dict:
        return {"values": tensor_to_dict(self.values), "t": self.t}

    @classmethod
    def from_dict(cls, doc: dict) -> "LatentImage":
        return cls(tensor_from_dict(doc["values"]), doc["t"])


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple
    alpha_bars: tuple  # alpha_bars[0] == 1.0; alpha_bars[t] for t = 1..T

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        betas = tuple(float(b) for b in betas)
        if not betas or any(not 0.0 < b < 1.0 for b in betas):
            raise ValueError("every beta must lie in (0, 1)")
        abar = [1.0]
        for b in betas:
            abar.append(abar[-1] * (1.0 - b))
        return cls(betas, tuple(abar))

    @classmethod
    def linear(cls, T: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        if T == 1:
            return cls.from_betas([beta_start])
        step = (beta_end - beta_start) / (T - 1)
        return cls.from_betas([beta_start + i * step for i in range(T)])

    @classmethod
    def from_config(cls, s: ScheduleConfig) -> "NoiseSchedule":
        return cls.linear(s.T, s.beta_start, s.beta_end)

    def alpha_bar(self, t: int) -> float:
        return self.alpha_bars[t]

    def to_dict(self) -> dict:
        return {"betas": list(self.betas)}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseSchedule":
        return cls.from_betas(doc["betas"])


@dataclass(frozen=True)
class GuidanceWeights:
    qual: float = 1.0
    sem: float = 0.5
    tt: float = 0.5
    ti: float = 0.5
    spar: float = 0.1

    def __post_init__(self):
        vals = self.as_dict().values()
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("guidance weights must be finite and non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one guidance weight positive is required")

    def as_dict(self) -> dict:
        return {"qual": self.qual, "sem": self.sem, "tt": self.tt, "ti": self.ti, "spar": self.spar}

    @classmethod
    def from_config(cls, w: WeightsConfig) -> "GuidanceWeights":
        return cls(**dataclasses.asdict(w))

    def scaled(self, c: float) -> "GuidanceWeights":
        return GuidanceWeights(**{k: v * c for k, v in self.as_dict().items()})

    def to_dict(self) -> dict:
        return self.as_dict()

    @classmethod
    def from_dict(cls, doc: dict) -> "GuidanceWeights":
        return cls(**doc)


@dataclass(frozen=True)
class SimilarityScores:
    scores: tuple
    threshold: Optional[float] = None

    @property
    def n(self) -> int:
        return len(self.scores)

    def to_dict(self) -> dict:
        return {"scores": list(self.scores), "threshold": self.threshold}

    @classmethod
    def from_dict(cls, doc: dict) -> "SimilarityScores":
        return cls(tuple(doc["scores"]), doc["threshold"])


# ---------------------------------------------------------------------------
# differentiable primitives shared by every module

def cosine(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis.

    Written as ``x.y / sqrt(|x|^2 |y|^2)`` so that ``cosine(x, x)`` is exactly 1
    in floating point (``sqrt(fl(s*s)) == s``). Result is clamped to [-1, 1].
    """
    num = (x * y).sum(-1)
    den = torch.sqrt((x * x).sum(-1) * (y * y).sum(-1))
    return torch.clamp(num / den, -1.0, 1.0)


def normalize(x: torch.Tensor) -> torch.Tensor:
    return x / torch.sqrt((x * x).sum(-1, keepdim=True))


def require_nonzero(x: torch.Tensor, name: str) -> None:
    if bool(((x.detach() * x.detach()).sum(-1) == 0).any()):
        raise ValueError(f"{name} has zero norm")


def as_tensor(x) -> torch.Tensor:
    """Unwrap a domain value (anything with a tensor ``.values``) to its tensor."""
    return x if isinstance(x, torch.Tensor) else x.values

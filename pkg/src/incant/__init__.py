"""Per-input soft prompt learning for a frozen text-conditioned diffusion model."""

from .backend import Backend, load_backend
from .core import (Config, ConfigError, EmbeddingMatrix, GlobalEmbedding, GuidanceWeights,
                   LatentImage, NoiseSchedule, NumericalAbort, PromptState, SimilarityScores,
                   TokenSequence, load_config, validate_config)
from .diffusion import AttentionRecord, forward_noise, pipeline, renoise, sample, train_toy_denoiser
from .encoders import Vocabulary, encode_image, encode_text, word_image_similarity
from .guidance import mask_text, quality_direction, text_direction
from .losses import (LossReport, loss_quality, loss_semantic, loss_sparsity, loss_ti, loss_tt,
                     total_loss)
from .trainer import ablate, init_prompt, optimize, stage1, synthesize_final

__version__ = "0.1.0"

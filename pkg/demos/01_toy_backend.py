# %% [markdown]
# # The toy backend
#
# Everything runs on a small seeded backend: a word-level text encoder, an
# image encoder and a conditional denoiser trained on colored blobs. The first
# call trains the denoiser (a few seconds) and caches the weights.

# %%
import torch

from incant import load_backend, validate_config
from incant.diffusion import initial_noise, sample
from incant.io import save_png

cfg = validate_config({})
backend = load_backend(cfg)
print(len(backend.vocab), "words;", "latent", backend.latent_shape)

# %% [markdown]
# Coarse and fine sampling start from the same noise. With few steps the
# sampler makes larger jumps and the image is rougher.

# %%
tokens = backend.vocab.tokenize("a red ball")
with torch.no_grad():
    rows, _ = backend.text_encoder(torch.tensor(tokens.ids))
x_T = initial_noise(backend.latent_shape, seed=0)
for steps in (cfg.schedule.T_coarse, cfg.schedule.T_fine):
    image, _ = sample(backend.denoiser, x_T, rows, steps, backend.schedule)
    save_png(f"red_ball_{steps}.png", image)
    print(steps, "steps, mean pixel", float(image.values.mean()))

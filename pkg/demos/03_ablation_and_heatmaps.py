# %% [markdown]
# # Ablations and attention
#
# Switching off a loss term means setting its weight to zero. All variants
# share one stage-1 cache, so they differ only in what the prompt learns.

# %%
from incant import load_backend, validate_config
from incant.diffusion import sample
from incant.trainer import ablate, prompted_rows

cfg = validate_config({"training": {"iterations": 50}})
backend = load_backend(cfg)
results = ablate(backend, "a cat next to a box", 1, cfg, ["no-qual", "no-sem", "no-spar"])
for name, res in results.items():
    print(f"{name:10s} final total {res.history[-1].total:+.4f}")

# %% [markdown]
# Cross-attention mass per conditioning row, averaged over sampling steps.
# Prompt rows compete with the words for attention.

# %%
run = results["full"].run
_, rec = sample(backend.denoiser, run.cache.x_T, prompted_rows(backend, run),
                cfg.schedule.T_fine, backend.schedule, capture=True)
labels = list(run.tokens.words) + [f"<p{i}>" for i in range(run.prompt.n_p)]
for label, m in zip(labels, rec.token_mass().tolist()):
    print(f"{label:8s} {m:.3f}")
print("sum", float(rec.token_mass().sum()))

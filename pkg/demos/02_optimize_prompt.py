# %% [markdown]
# # Learning a prompt for one text
#
# Stage 1 samples the plain text coarsely and finely. Stage 2 appends four
# learnable rows to the text and tunes them with Adam while the encoders and
# the denoiser stay frozen.

# %%
from incant import load_backend, validate_config
from incant.io import save_png
from incant.trainer import new_run, optimize, synthesize_final

cfg = validate_config({"training": {"iterations": 100}})
backend = load_backend(cfg)
text = "an elephant and a bag"

run = new_run(backend, text, seed=0, config=cfg)
hash_before = backend.weights_hash()
optimize(backend, run)
assert backend.weights_hash() == hash_before

# %% [markdown]
# The history has one report per iteration, including iteration 0.

# %%
for r in run.history[::25]:
    print(f"{r.iteration:4d}  total {r.total:+.4f}  qual {r.qual:+.4f}  tt {r.tt:+.4f}  "
          f"ti {r.ti:+.4f}  spar {r.spar:.3f}")
print("masked at last refresh:", [run.tokens.words[i] for i in run.mask_positions])

# %%
save_png("stage1_fine.png", run.cache.x_fine)
save_png("prompted.png", synthesize_final(backend, run))
save_png("prompted_2step.png", synthesize_final(backend, run, mode="2step"))

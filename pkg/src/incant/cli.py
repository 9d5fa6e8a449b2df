"""Batch command line: generate, optimize, ablate, heatmap, compare.

Exit codes: 0 success, 2 input error, 3 capability error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from pathlib import Path

import torch

from . import trainer
from .backend import load_backend
from .core import ConfigError, NumericalAbort, cosine, load_config, validate_config
from .diffusion import initial_noise, pipeline, sample
from .encoders import UnknownWordsError
from .io import save_grid, save_heatmap, save_png, write_latent, write_manifest
from .losses import write_loss_csv

log = logging.getLogger("incant")

EXIT_OK, EXIT_INPUT, EXIT_CAPABILITY, EXIT_NUMERICAL = 0, 2, 3, 4


class CapabilityError(RuntimeError):
    pass


def _write_image(out: Path, stem: str, latent, cfg, artifacts: list) -> None:
    png, raw = out / f"{stem}.png", out / f"{stem}.bin"
    save_png(png, latent, cfg.io.png_scale)
    write_latent(raw, latent)
    artifacts += [png, raw]


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    backend = load_backend(cfg)
    tokens = backend.vocab.tokenize(args.text, cfg.encoder.n_max)
    steps = args.steps or cfg.schedule.T_fine
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        rows, _ = backend.text_encoder(torch.tensor(tokens.ids))
    x_T = initial_noise(backend.latent_shape, trainer.stream_seed(args.seed, "x_T"), backend.dtype)
    image = pipeline(backend.denoiser, x_T, rows, args.mode, backend.schedule, steps,
                     seed=trainer.stream_seed(args.seed, "renoise"),
                     clip_denoised=cfg.backend.clip_denoised)
    artifacts = []
    _write_image(out, "image", image, cfg, artifacts)
    write_manifest(out / "manifest.json", "generate", cfg.hash(), [args.text], [args.seed], artifacts,
                   time.perf_counter() - t0, steps=steps, mode=args.mode)
    return EXIT_OK


def _optimize_into(backend, cfg, text, seed, out: Path, cache=None, command="optimize") -> int:
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    before = backend.weights_hash()
    run = trainer.new_run(backend, text, seed, cfg, cache)
    if cfg.io.audit_log:
        run.audit.path = out / "mask_audit.jsonl"
        run.audit.path.write_text("")
    artifacts = []
    _write_image(out, "stage1_coarse", run.cache.x_coarse, cfg, artifacts)
    _write_image(out, "stage1_fine", run.cache.x_fine, cfg, artifacts)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    artifacts.append(out / "config.json")
    ckpt = out / "checkpoint.json"
    period = cfg.training.refresh_period or cfg.training.iterations or 1

    def on_step(r, report):
        if report.iteration % period == 0:
            trainer.save_checkpoint(ckpt, r)

    status = "ok"
    try:
        trainer.optimize(backend, run, callback=on_step)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        trainer.save_checkpoint(ckpt, run, getattr(exc, "state", None))
        status = "failed"
    if status == "ok":
        trainer.save_checkpoint(ckpt, run)
        _write_image(out, "final", trainer.synthesize_final(backend, run), cfg, artifacts)
    write_loss_csv(out / "losses.csv", run.history)
    artifacts += [ckpt, out / "losses.csv"]
    if run.audit.path is not None:
        artifacts.append(run.audit.path)
    after = backend.weights_hash()
    write_manifest(out / "manifest.json", command, cfg.hash(), [text], [seed], artifacts,
                   time.perf_counter() - t0, status=status,
                   weights_sha256_before=before, weights_sha256_after=after)
    return EXIT_OK if status == "ok" else EXIT_NUMERICAL


def cmd_optimize(args) -> int:
    cfg = load_config(args.config)
    backend = load_backend(cfg)
    return _optimize_into(backend, cfg, args.text, args.seed, Path(args.out_dir))


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    backend = load_backend(cfg)
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    offs = {n: trainer.parse_variant(n) for n in names}
    configs = {n: trainer.variant_config(cfg, o) for n, o in offs.items()}
    cache = trainer.stage1(backend, args.text, args.seed, cfg)
    root = Path(args.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    for name, vcfg in configs.items():
        code = max(code, _optimize_into(backend, vcfg, args.text, args.seed, root / name, cache, "ablate"))
    manifests = [root / n / "manifest.json" for n in configs]
    write_manifest(root / "manifest.json", "ablate", cfg.hash(), [args.text], [args.seed], manifests,
                   time.perf_counter() - t0, variants=names)
    return code


def _token_label(i: int, tokens, n_o: int) -> str:
    return tokens.words[i] if i < n_o else f"<prompt{i - n_o}>"


def cmd_heatmap(args) -> int:
    t0 = time.perf_counter()
    prompt = None
    if args.checkpoint:
        doc = trainer.load_checkpoint(args.checkpoint)
        cfg = validate_config(doc["config"])
        text, seed = doc["text"], doc["seed"] if args.seed is None else args.seed
        prompt = doc["prompt"]
    else:
        if not args.text:
            raise ValueError("give a text or --checkpoint")
        cfg = load_config(args.config)
        text, seed = args.text, args.seed or 0
    backend = load_backend(cfg)
    if not backend.supports_capture:
        raise CapabilityError("backend does not support attention capture")
    tokens = backend.vocab.tokenize(text, cfg.encoder.n_max)
    with torch.no_grad():
        rows, _ = backend.text_encoder(torch.tensor(tokens.ids),
                                       None if prompt is None else prompt.values.to(backend.dtype))
    x_T = initial_noise(backend.latent_shape, trainer.stream_seed(seed, "x_T"), backend.dtype)
    _, record = sample(backend.denoiser, x_T, rows, cfg.schedule.T_fine, backend.schedule, capture=True,
                       clip_denoised=cfg.backend.clip_denoised)
    w = (record.weights.mean(0) if args.step is None else record.weights[args.step]).to(torch.float64)
    mass = w.mean(-1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    _, h, wd = backend.latent_shape
    with open(out / "attention_mass.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "token", "role", "mass"])
        for i in range(rows.shape[0]):
            label = _token_label(i, tokens, tokens.n_o)
            writer.writerow([i, label, "word" if i < tokens.n_o else "prompt", repr(float(mass[i]))])
            png = out / f"heatmap_{i:02d}_{re.sub(r'[^a-z0-9]+', '', label.lower()) or 'mask'}.png"
            save_heatmap(png, w[i].numpy(), (h, wd), cfg.io.png_scale)
            artifacts.append(png)
    artifacts.append(out / "attention_mass.csv")
    write_manifest(out / "manifest.json", "heatmap", cfg.hash(), [text], [seed], artifacts,
                   time.perf_counter() - t0, step=args.step)
    return EXIT_OK


def cmd_compare(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config)
    texts = [ln.strip() for ln in Path(args.textfile).read_text().splitlines() if ln.strip()]
    if not texts:
        raise ValueError(f"{args.textfile} contains no texts")
    seeds = [int(s) for s in args.seeds.split(",")]
    modes = [m.strip() for m in args.modes.split(",")]
    backend = load_backend(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tokens = [backend.vocab.tokenize(t, cfg.encoder.n_max) for t in texts]
    images, rows_out = [], []
    for text, tok in zip(texts, tokens):
        with torch.no_grad():
            rows, g = backend.text_encoder(torch.tensor(tok.ids))
        for seed in seeds:
            x_T = initial_noise(backend.latent_shape, trainer.stream_seed(seed, "x_T"), backend.dtype)
            for mode in modes:
                img = pipeline(backend.denoiser, x_T, rows, mode, backend.schedule, cfg.schedule.T_fine,
                               seed=trainer.stream_seed(seed, "renoise"),
                               clip_denoised=cfg.backend.clip_denoised)
                with torch.no_grad():
                    cos = float(cosine(g, backend.image_encoder(img.values)))
                images.append(img)
                rows_out.append([text, seed, mode, repr(cos)])
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text", "seed", "mode", "text_image_cosine"])
        writer.writerows(rows_out)
    save_grid(out / "grid.png", images, n_cols=len(seeds) * len(modes), scale=cfg.io.png_scale)
    write_manifest(out / "manifest.json", "compare", cfg.hash(), texts, seeds,
                   [out / "compare.csv", out / "grid.png"], time.perf_counter() - t0, modes=modes)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="incant", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample an image for a text")
    p.add_argument("text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default T_fine)")
    p.add_argument("--mode", choices=("1step", "2step"), default="1step")
    p.add_argument("--out", default="out/generate")
    p.add_argument("--config")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("optimize", help="learn a prompt for one text")
    p.add_argument("text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--out-dir", default="out/optimize")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("ablate", help="optimize with loss terms switched off")
    p.add_argument("text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", default="full,no-qual,no-sem,no-spar")
    p.add_argument("--config")
    p.add_argument("--out-dir", default="out/ablate")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", help="cross-attention heatmaps per conditioning row")
    p.add_argument("text", nargs="?")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--step", type=int, default=None, help="single sampling step instead of the mean")
    p.add_argument("--config")
    p.add_argument("--out", default="out/heatmap")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("compare", help="grid of 1step/2step samples for many texts")
    p.add_argument("textfile")
    p.add_argument("--seeds", default="0")
    p.add_argument("--modes", default="1step,2step")
    p.add_argument("--config")
    p.add_argument("--out", default="out/compare")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UnknownWordsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

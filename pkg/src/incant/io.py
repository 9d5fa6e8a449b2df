"""File formats: raw latents, PNG images and heatmaps, run manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import LatentImage, as_tensor

LATENT_HEADER = struct.Struct("<4H")  # rank (=3), c, h, w


def write_latent(path, latent) -> None:
    """Row-major float32 little-endian values after an 8-byte shape header."""
    x = as_tensor(latent).detach().cpu().to(torch.float32).numpy()
    if x.ndim != 3:
        raise ValueError("latent must be c x h x w")
    with open(path, "wb") as fh:
        fh.write(LATENT_HEADER.pack(3, *x.shape))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_latent(path) -> LatentImage:
    with open(path, "rb") as fh:
        rank, c, h, w = LATENT_HEADER.unpack(fh.read(LATENT_HEADER.size))
        if rank != 3:
            raise ValueError(f"unsupported latent rank {rank}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    return LatentImage(torch.from_numpy(data.reshape(c, h, w).copy()))


def latent_to_rgb_matrix(c: int) -> np.ndarray:
    """Fixed 3 x c map; identity for three channels, channel cycling otherwise."""
    m = np.zeros((3, c))
    for k in range(3):
        m[k, k % c] = 1.0
    return m


def latent_to_uint8(latent) -> np.ndarray:
    x = as_tensor(latent).detach().cpu().to(torch.float64).numpy()
    rgb = np.tensordot(latent_to_rgb_matrix(x.shape[0]), x, axes=1)
    rgb = np.clip((rgb + 1.0) * 0.5, 0.0, 1.0)
    return np.round(rgb.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def _upscale(arr: np.ndarray, scale: int) -> np.ndarray:
    return arr.repeat(scale, axis=0).repeat(scale, axis=1) if scale > 1 else arr


def save_png(path, latent, scale: int = 8) -> None:
    Image.fromarray(_upscale(latent_to_uint8(latent), scale), mode="RGB").save(path, optimize=False)


def save_heatmap(path, weights: np.ndarray, shape, scale: int = 8) -> None:
    """Grayscale PNG of one row's attention over the h x w latent grid."""
    h, w = shape
    a = np.asarray(weights, dtype=np.float64).reshape(h, w)
    peak = a.max()
    g = a / peak if peak > 0 else a
    Image.fromarray(_upscale(np.round(g * 255).astype(np.uint8), scale), mode="L").save(path)


def save_grid(path, latents, n_cols: int, scale: int = 8, pad: int = 1) -> None:
    tiles = [_upscale(latent_to_uint8(x), scale) for x in latents]
    th, tw = tiles[0].shape[:2]
    n_rows = -(-len(tiles) // n_cols)
    grid = np.full((n_rows * (th + pad) + pad, n_cols * (tw + pad) + pad, 3), 255, np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, n_cols)
        y, x = pad + r * (th + pad), pad + c * (tw + pad)
        grid[y:y + th, x:x + tw] = t
    Image.fromarray(grid, mode="RGB").save(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, config_hash: str, texts, seeds, artifacts,
                   duration: float, status: str = "ok", **extra) -> dict:
    """Record every artifact (relative to the manifest's directory) with its sha256.

    Artifact paths are resolved against the working directory and must lie
    under the manifest's directory.
    """
    root = Path(path).resolve().parent
    entries = []
    for a in artifacts:
        a = Path(a).resolve()
        entries.append({"path": a.relative_to(root).as_posix(), "sha256": sha256_file(a)})
    doc = {"command": command, "config_hash": config_hash, "texts": list(texts),
           "seeds": list(seeds), "artifacts": entries, "duration_s": duration,
           "status": status, **extra}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return doc


def verify_manifest(path) -> list:
    """Paths whose on-disk hash no longer matches (empty when all verify)."""
    root = Path(path).parent
    with open(path) as fh:
        doc = json.load(fh)
    return [a["path"] for a in doc["artifacts"]
            if not (root / a["path"]).exists() or sha256_file(root / a["path"]) != a["sha256"]]

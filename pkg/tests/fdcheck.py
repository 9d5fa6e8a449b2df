"""Central finite differences, evaluated as one batched forward pass."""

import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """d f / d x for scalar-valued ``f`` that accepts a leading batch axis.

    ``f`` maps (B, *x.shape) -> (B,). Returns a tensor shaped like ``x``.
    """
    x = x.detach().to(torch.float64)
    n = x.numel()
    eye = torch.eye(n, dtype=torch.float64).reshape(n, *x.shape) * h
    with torch.no_grad():
        plus = f(x.unsqueeze(0) + eye)
        minus = f(x.unsqueeze(0) - eye)
    return ((plus - minus) / (2 * h)).reshape(x.shape)


def analytic(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().to(torch.float64).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x.unsqueeze(0)).sum(), x)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error ||a - b|| / ||b||."""
    return float(torch.linalg.vector_norm(a - b) / torch.linalg.vector_norm(b))


def composed_losses(encoder, ids, mask_ids, e_img, delta_img, n_p):
    """Each loss as a function of a batch of prompts, through ``encoder``."""
    from incant.guidance import DirectionPair, text_direction
    from incant.losses import loss_quality, loss_semantic, loss_sparsity, loss_ti, loss_tt

    ids, mask_ids = torch.as_tensor(ids), torch.as_tensor(mask_ids)
    n_o = ids.shape[0]
    with torch.no_grad():
        _, e_g = encoder(ids)

    def glob(p):
        return encoder(ids, p)[1]

    return {
        "qual": lambda p: loss_quality(DirectionPair(delta_img, text_direction(glob(p), e_g))),
        "sem": lambda p: loss_semantic(glob(p), encoder(mask_ids, p)[1]),
        "tt": lambda p: loss_tt(glob(p), e_g),
        "ti": lambda p: loss_ti(glob(p), e_img),
        "spar": lambda p: loss_sparsity(encoder(ids, p)[0], n_o, n_p),
    }

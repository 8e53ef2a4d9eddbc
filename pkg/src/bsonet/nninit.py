"""Seeded weight initialization shared by the networks.

torch.nn.init.trunc_normal_ does not take a generator, so the truncated
normal is drawn here via the inverse CDF, which also keeps the stream
reproducible across torch versions.
"""

from __future__ import annotations

import math

import torch


def trunc_normal_(tensor: torch.Tensor, std: float = 0.02, a: float = -2.0,
                  b: float = 2.0, generator: torch.Generator | None = None) -> torch.Tensor:
    """Fill with N(0, std^2) truncated to [a*std, b*std], via inverse CDF."""
    lo = math.erf(a / math.sqrt(2.0))
    hi = math.erf(b / math.sqrt(2.0))
    with torch.no_grad():
        u = torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype)
        u = lo + u * (hi - lo)
        tensor.copy_(torch.erfinv(u) * math.sqrt(2.0) * std)
    return tensor


def fan_in(p: torch.Tensor) -> int:
    """Receptive input size of a weight: in_features for linear layers,
    in_channels * kernel area for convolutions."""
    return p.numel() // p.shape[0]


def seed_module_(module: torch.nn.Module, seed: int) -> torch.nn.Module:
    """Deterministically initialize a module in parameter-registration order:
    weights with >= 2 dims get truncated normals with std = sqrt(2 / fan_in),
    1-dim weights (norm gains) get ones, all biases get zeros.

    The fan-in scaling matters: a flat small std starves the convolution
    chains that run outside any normalization layer (each conv then shrinks
    activations by a constant factor, and after a dozen layers the features
    feeding the output head are numerically negligible, which stalls
    training at the identity map).
    """
    gen = torch.Generator()
    gen.manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim >= 2:
                trunc_normal_(p, std=math.sqrt(2.0 / fan_in(p)), generator=gen)
            else:
                p.fill_(1.0)
    return module

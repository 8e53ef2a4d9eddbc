"""Resolution-adaptive network: bicubic resizing to or from the working size
with a learned residual correction branch (conv stack + channel attention).

The output projection is zero-initialized, so an untrained RANet is exactly
the bicubic map; training only ever has to learn the correction.
"""

from __future__ import annotations

import dataclasses

import torch
from torch import nn

from .imagecore import ValidationError, resize_bicubic_t
from .nninit import seed_module_


@dataclasses.dataclass(frozen=True)
class RANetConfig:
    channels: int = 32
    num_layers: int = 3
    ca_reduction: int = 4
    working_size: tuple[int, int] = (256, 256)  # (height, width)
    shared_weights: bool = True  # one parameter set for both resize stages
    init_seed: int = 0

    def __post_init__(self):
        if self.channels < 1 or self.num_layers < 1:
            raise ValidationError("channels and num_layers must be >= 1")
        if self.ca_reduction < 1 or self.channels % self.ca_reduction != 0:
            raise ValidationError("channels must be divisible by ca_reduction")
        if self.working_size[0] < 1 or self.working_size[1] < 1:
            raise ValidationError("working_size must be >= 1x1")


class ChannelAttention(nn.Module):
    """Per-channel gates s = sigmoid(mlp(avgpool F) + mlp(maxpool F)) with a
    shared bottleneck MLP; output = s * F."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        self.act = nn.GELU()

    def _mlp(self, pooled):
        return self.fc2(self.act(self.fc1(pooled)))

    def forward(self, x):
        if x.shape[-3] != self.channels:
            raise ValidationError(
                f"channel mismatch: got {x.shape[-3]}, params expect {self.channels}")
        avg = x.mean(dim=(-2, -1))
        mx = x.amax(dim=(-2, -1))
        s = torch.sigmoid(self._mlp(avg) + self._mlp(mx))
        return x * s.unsqueeze(-1).unsqueeze(-1)


class RANet(nn.Module):
    """Parameter container; enumeration order is registration order (head,
    body convs, channel attention, tail), stable across runs."""

    def __init__(self, cfg: RANetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.head = nn.Conv2d(1, c, 3, padding=1, padding_mode="replicate")
        self.body = nn.ModuleList(
            nn.Conv2d(c, c, 3, padding=1, padding_mode="replicate")
            for _ in range(cfg.num_layers))
        self.ca = ChannelAttention(c, cfg.ca_reduction)
        self.tail = nn.Conv2d(c, 1, 1)
        # GELU throughout: zero-preserving (GELU(0) = 0 exactly) and smooth,
        # so finite-difference gradient checks are well behaved.
        self.act = nn.GELU()

    def correction(self, base):
        f = self.act(self.head(base))
        for conv in self.body:
            f = self.act(conv(f))
        f = self.ca(f)
        return self.tail(f)


def init_ranet(cfg: RANetConfig, dtype: torch.dtype = torch.float32) -> RANet:
    """Seed-deterministic parameters; the tail projection is zeroed so the
    fresh network is a pure bicubic resizer."""
    net = RANet(cfg).to(dtype)
    seed_module_(net, cfg.init_seed)
    with torch.no_grad():
        net.tail.weight.zero_()
        net.tail.bias.zero_()
    return net


def channel_attention(features: torch.Tensor, params: ChannelAttention) -> torch.Tensor:
    return params(features)


def ranet_forward(x: torch.Tensor, target_size: tuple[int, int], params: RANet) -> torch.Tensor:
    """Resize (B, 1, H, W) to target (height, width): bicubic base plus the
    learned correction evaluated on the base. At init the correction is a
    zero tensor, so output == bicubic base bit-for-bit."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValidationError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValidationError("ranet_forward needs inputs of at least 3x3")
    base = resize_bicubic_t(x, target_size[0], target_size[1])
    return base + params.correction(base)

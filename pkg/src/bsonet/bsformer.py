"""The core restoration network: FLN feature blocks at head and tail around a
U-shaped encoder/decoder of LeWin window-attention blocks, with cross-scale
FFN fusion and a global input-to-output residual.

Conventions used throughout: non-overlapping 8x8 attention windows with a
learned relative-position bias (no window shifting); downsampling by 3x3
stride-2 convolutions that double channels, upsampling by 2x transposed
convolutions that halve them, with encoder skips concatenated into the
matching decoder stage; GELU activations everywhere, which map zero to zero
(so zero input with zero biases propagates to zero output) and are smooth
(so finite-difference gradient checks behave).
"""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F
from torch import nn

from .imagecore import ValidationError
from .nninit import seed_module_


@dataclasses.dataclass(frozen=True)
class BSformerConfig:
    embed_dim: int = 16
    encoder_depths: tuple[int, ...] = (2, 2)
    bottleneck_depth: int = 2
    heads: tuple[int, ...] = (1, 2, 4)  # finest to deepest, len(depths) + 1
    window_size: int = 8
    mlp_ratio: int = 4
    fln_subsets: int = 4
    fln_dcr_blocks: int = 2
    init_seed: int = 0

    @property
    def num_stages(self) -> int:
        return len(self.encoder_depths) + 1

    @property
    def min_divisor(self) -> int:
        """Input dims must be divisible by this (window size through all
        downsamplings)."""
        return self.window_size * 2 ** (self.num_stages - 1)

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValidationError("embed_dim must be >= 1")
        if not self.encoder_depths or any(d < 1 for d in self.encoder_depths):
            raise ValidationError("encoder_depths must be nonempty positive")
        if self.bottleneck_depth < 1:
            raise ValidationError("bottleneck_depth must be >= 1")
        if len(self.heads) != self.num_stages:
            raise ValidationError(
                f"need {self.num_stages} head counts (one per stage), got {len(self.heads)}")
        for i, h in enumerate(self.heads):
            c = self.embed_dim * 2 ** i
            if h < 1 or c % h != 0:
                raise ValidationError(
                    f"stage {i}: {h} heads do not divide {c} channels")
        if self.window_size < 1:
            raise ValidationError("window_size must be >= 1")
        if self.fln_subsets < 1 or self.embed_dim % self.fln_subsets != 0:
            raise ValidationError("embed_dim must be divisible by fln_subsets")
        if self.fln_dcr_blocks < 1:
            raise ValidationError("fln_dcr_blocks must be >= 1")


def toy_config(init_seed: int = 0) -> BSformerConfig:
    return BSformerConfig(init_seed=init_seed)


def paper_config(init_seed: int = 0) -> BSformerConfig:
    return BSformerConfig(embed_dim=32, encoder_depths=(2, 2, 2, 2),
                          heads=(1, 2, 4, 8, 16), init_seed=init_seed)


# ---------------------------------------------------------------------------
# Window helpers


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * H/w * W/w, w*w, C); tokens within each window are
    row-major."""
    b, h, w, c = x.shape
    if h % window != 0 or w % window != 0:
        raise ValidationError(f"dims {h}x{w} not divisible by window {window}")
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, height: int, width: int) -> torch.Tensor:
    """Inverse of window_partition; bit-exact round trip."""
    nh, nw = height // window, width // window
    b = windows.shape[0] // (nh * nw)
    x = windows.view(b, nh, nw, window, window, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, height, width, -1)


# ---------------------------------------------------------------------------
# LeWin block


class WindowAttention(nn.Module):
    """Multi-head self-attention within one window, with a learned relative
    position bias indexed the standard way (a (2w-1)^2 table shared across
    windows)."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads != 0:
            raise ValidationError(f"{heads} heads do not divide {dim} channels")
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))

        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij"))
        flat = coords.flatten(1)
        rel = flat[:, :, None] - flat[:, None, :]
        rel = rel.permute(1, 2, 0) + (window - 1)
        index = rel[:, :, 0] * (2 * window - 1) + rel[:, :, 1]
        self.register_buffer("bias_index", index, persistent=False)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.bias_table[self.bias_index.reshape(-1)]
        bias = bias.reshape(n, n, self.heads).permute(2, 0, 1)
        attn = torch.softmax(attn + bias.unsqueeze(0), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj(out)
        if return_attn:
            return out, attn
        return out


class LeFF(nn.Module):
    """Locally-enhanced feed-forward: pointwise expand, depthwise 3x3 over
    the spatial layout, pointwise project; GELU after the first two."""

    def __init__(self, dim: int, mlp_ratio: int):
        super().__init__()
        hidden = dim * mlp_ratio
        self.expand = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Linear(hidden, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:  # (B, H, W, C)
        u = F.gelu(self.expand(t))
        u = u.permute(0, 3, 1, 2)
        u = F.gelu(self.dw(u))
        u = u.permute(0, 2, 3, 1)
        return self.project(u)


class LeWinBlock(nn.Module):
    """Pre-norm residual pair: F += W-MSA(LN(F)) windowed, F += LeFF(LN(F)).
    Zeroing both output projections (attn.proj, leff.project) makes the block
    the identity map."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.leff = LeFF(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, C, H, W)
        b, c, h, w = x.shape
        if h % self.window != 0 or w % self.window != 0:
            raise ValidationError(f"dims {h}x{w} not divisible by window {self.window}")
        t = x.permute(0, 2, 3, 1)
        wins = window_partition(self.norm1(t), self.window)
        t = t + window_reverse(self.attn(wins), self.window, h, w)
        t = t + self.leff(self.norm2(t))
        return t.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# FLN: dense-block feature learning with a split-add channel cascade


class DCRBlock(nn.Module):
    """Three densely concatenated 3x3 convolutions plus 1x1 compression back
    to the input width."""

    def __init__(self, channels: int):
        super().__init__()
        c = channels
        self.c1 = nn.Conv2d(c, c, 3, padding=1, padding_mode="replicate")
        self.c2 = nn.Conv2d(2 * c, c, 3, padding=1, padding_mode="replicate")
        self.c3 = nn.Conv2d(3 * c, c, 3, padding=1, padding_mode="replicate")
        self.compress = nn.Conv2d(4 * c, c, 1)
        self.act = nn.GELU()

    def forward(self, x):
        y1 = self.act(self.c1(x))
        y2 = self.act(self.c2(torch.cat((x, y1), dim=1)))
        y3 = self.act(self.c3(torch.cat((x, y1, y2), dim=1)))
        return self.compress(torch.cat((x, y1, y2, y3), dim=1))


class FLN(nn.Module):
    """Upper branch: a residual sub-branch (input + DCR chain) and an
    end-to-end sub-branch (DCR chain alone). Lower branch: split channels
    into subsets, pass subset 1 through, map subset i >= 2 through a 3x3
    convolution of (subset_i + previous output), concatenate, 1x1 fuse,
    residual add. Output fuses all three by concatenation + 1x1.

    The cascade convolutions carry no activation so that identity-initialized
    kernels turn the cascade into exact cumulative subset sums.
    """

    def __init__(self, channels: int, subsets: int, dcr_blocks: int):
        super().__init__()
        if channels % subsets != 0:
            raise ValidationError(f"{channels} channels not divisible by {subsets} subsets")
        self.subsets = subsets
        self.sub_channels = channels // subsets
        self.res_chain = nn.Sequential(*[DCRBlock(channels) for _ in range(dcr_blocks)])
        self.e2e_chain = nn.Sequential(*[DCRBlock(channels) for _ in range(dcr_blocks)])
        self.cascade = nn.ModuleList(
            nn.Conv2d(self.sub_channels, self.sub_channels, 3,
                      padding=1, padding_mode="replicate")
            for _ in range(subsets - 1))
        self.lower_fuse = nn.Conv2d(channels, channels, 1)
        self.out_fuse = nn.Conv2d(3 * channels, channels, 1)

    def lower_cascade(self, x: torch.Tensor) -> torch.Tensor:
        """The split-add cascade before fusion, concatenated back."""
        subs = torch.split(x, self.sub_channels, dim=1)
        outs = [subs[0]]
        for conv, sub in zip(self.cascade, subs[1:]):
            outs.append(conv(sub + outs[-1]))
        return torch.cat(outs, dim=1)

    def forward(self, x):
        upper_res = x + self.res_chain(x)
        upper_e2e = self.e2e_chain(x)
        lower = self.lower_fuse(self.lower_cascade(x)) + x
        return self.out_fuse(torch.cat((upper_res, upper_e2e, lower), dim=1))


def fln_forward(features: torch.Tensor, params: FLN) -> torch.Tensor:
    return params(features)


# ---------------------------------------------------------------------------
# FFN: cross-scale fusion


class FFNFuse(nn.Module):
    """Compress each scale to a common width with 1x1 convolutions, resize
    bilinearly to the finest scale, concatenate, fuse with a 3x3."""

    def __init__(self, dims: tuple[int, ...], out_channels: int):
        super().__init__()
        self.dims = tuple(dims)
        self.compress = nn.ModuleList(nn.Conv2d(d, out_channels, 1) for d in dims)
        self.fuse = nn.Conv2d(out_channels * len(dims), out_channels, 3,
                              padding=1, padding_mode="replicate")

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        if len(feats) != len(self.dims):
            raise ValidationError(f"expected {len(self.dims)} scales, got {len(feats)}")
        h0, w0 = feats[0].shape[-2:]
        outs = []
        for i, (f, conv) in enumerate(zip(feats, self.compress)):
            if f.shape[-3] != self.dims[i]:
                raise ValidationError(
                    f"scale {i}: expected {self.dims[i]} channels, got {f.shape[-3]}")
            if f.shape[-2] * 2 ** i != h0 or f.shape[-1] * 2 ** i != w0:
                raise ValidationError(
                    f"scale {i}: inconsistent scale ladder {tuple(f.shape[-2:])} "
                    f"vs finest {(h0, w0)}")
            g = conv(f)
            if i > 0:
                g = F.interpolate(g, size=(h0, w0), mode="bilinear", align_corners=False)
            outs.append(g)
        return self.fuse(torch.cat(outs, dim=1))


def ffn_fuse(decoder_features: list[torch.Tensor], params: FFNFuse) -> torch.Tensor:
    return params(decoder_features)


# ---------------------------------------------------------------------------
# The full model


class BSformer(nn.Module):
    """Parameter enumeration order (stable): input projection, FLN head, head
    projection, encoder stages (finest first, blocks then downsample),
    bottleneck, decoder (deepest first: upsample, skip fusion, blocks), FFN
    fusion, FLN tail, output projection."""

    def __init__(self, cfg: BSformerConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        levels = len(cfg.encoder_depths)
        self.act = nn.GELU()
        self.input_proj = nn.Conv2d(1, c, 3, padding=1, padding_mode="replicate")
        self.fln_head = FLN(c, cfg.fln_subsets, cfg.fln_dcr_blocks)
        self.head_proj = nn.Conv2d(c, c, 1)

        def stage(dim, depth, heads):
            return nn.Sequential(*[
                LeWinBlock(dim, heads, cfg.window_size, cfg.mlp_ratio)
                for _ in range(depth)])

        self.enc_stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, depth in enumerate(cfg.encoder_depths):
            dim = c * 2 ** i
            self.enc_stages.append(stage(dim, depth, cfg.heads[i]))
            self.downs.append(nn.Conv2d(dim, dim * 2, 3, stride=2, padding=1))
        self.bottleneck = stage(c * 2 ** levels, cfg.bottleneck_depth, cfg.heads[levels])
        self.ups = nn.ModuleList()
        self.skip_fuses = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        for i in reversed(range(levels)):
            dim = c * 2 ** i
            self.ups.append(nn.ConvTranspose2d(dim * 2, dim, 2, stride=2))
            self.skip_fuses.append(nn.Conv2d(dim * 2, dim, 1))
            self.dec_stages.append(stage(dim, cfg.encoder_depths[i], cfg.heads[i]))
        self.ffn = FFNFuse(tuple(c * 2 ** i for i in range(levels)), c)
        self.fln_tail = FLN(c, cfg.fln_subsets, cfg.fln_dcr_blocks)
        self.out_proj = nn.Conv2d(c, 1, 3, padding=1, padding_mode="replicate")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def correction(self, x: torch.Tensor) -> torch.Tensor:
        """The residual the network adds to its input; exactly zero for a
        freshly initialized model (zeroed output projection)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        d = self.cfg.min_divisor
        if h % d != 0 or w % d != 0:
            raise ValidationError(f"input dims {h}x{w} must be divisible by {d}")
        t = self.act(self.input_proj(x))
        t = self.head_proj(self.fln_head(t))
        skips = []
        for blocks, down in zip(self.enc_stages, self.downs):
            t = blocks(t)
            skips.append(t)
            t = down(t)
        t = self.bottleneck(t)
        levels = len(self.enc_stages)
        decs: list = [None] * levels
        for j, i in enumerate(reversed(range(levels))):
            t = self.ups[j](t)
            t = self.skip_fuses[j](torch.cat((t, skips[i]), dim=1))
            t = self.dec_stages[j](t)
            decs[i] = t
        t = self.fln_tail(self.ffn(decs))
        return self.out_proj(t)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B, 1, H, W)
        return x + self.correction(x)


def init_bsformer(cfg: BSformerConfig, dtype: torch.dtype = torch.float32) -> BSformer:
    """Seed-deterministic truncated-normal weights, zero biases. The global
    output projection starts at zero, so a freshly initialized model is the
    identity map and training departs from the input rather than from the
    random correction a nonzero projection would inject."""
    net = BSformer(cfg).to(dtype)
    seed_module_(net, cfg.init_seed)
    with torch.no_grad():
        net.out_proj.weight.zero_()
        net.out_proj.bias.zero_()
    return net


def identity_init_(net: BSformer) -> BSformer:
    """Zero every residual-branch output projection (window attention proj,
    LeFF project, and the global output projection), making the whole model
    an exact identity map."""
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, WindowAttention):
                m.proj.weight.zero_()
                m.proj.bias.zero_()
            elif isinstance(m, LeFF):
                m.project.weight.zero_()
                m.project.bias.zero_()
        net.out_proj.weight.zero_()
        net.out_proj.bias.zero_()
    return net


def bsformer_forward(x: torch.Tensor, params: BSformer) -> torch.Tensor:
    return params(x)

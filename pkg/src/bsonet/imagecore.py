"""Image container, synthetic phantom scenes, the scanner noise model, bicubic
resizing, and file I/O.

Pixel convention: raw detector units in [0, 65535] at rest (16-bit on disk),
held internally as float64 which may temporarily leave that range during
arithmetic. Arrays are row-major, indexed (row, col).
"""

from __future__ import annotations

import dataclasses
import functools
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image as _PILImage

PIXEL_MAX = 65535.0
BIT_DEPTH = 16
RAW16_MAGIC = b"BSR1"


class ValidationError(ValueError):
    """Bad argument or configuration value."""


class FileFormatError(Exception):
    """Unreadable, truncated, or unsupported image file."""


# ---------------------------------------------------------------------------
# Image container


@dataclasses.dataclass(frozen=True, eq=False)
class Image:
    """A single grayscale frame in raw detector units.

    ``pixels`` is coerced to a 2-D float64 array. ``to_u16`` quantizes for
    serialization (round half to even, then clamp to [0, 65535]).
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"image must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"image dims must be >= 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite pixels")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def filled(cls, height: int, width: int, value: float) -> "Image":
        return cls(np.full((height, width), float(value)))

    def to_u16(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels), 0.0, PIXEL_MAX).astype(np.uint16)


# ---------------------------------------------------------------------------
# Scene primitives and phantom generation


@dataclasses.dataclass(frozen=True)
class Disk:
    """Filled disk. A pixel belongs to the disk iff its center lies within
    ``radius`` of ``center`` (inclusive); radius 0 paints exactly the center
    pixel when the center is integral."""

    center: tuple[float, float]  # (row, col)
    radius: float
    intensity: float
    kind = "disk"

    def validate(self, height, width):
        r, c = self.center
        if self.radius < 0:
            raise ValidationError("radius must be >= 0")
        if r - self.radius < 0 or r + self.radius > height - 1 \
                or c - self.radius < 0 or c + self.radius > width - 1:
            raise ValidationError("disk extends outside the canvas")

    def rasterize(self, height, width):
        rr, cc = np.ogrid[:height, :width]
        r, c = self.center
        return (rr - r) ** 2 + (cc - c) ** 2 <= self.radius ** 2


@dataclasses.dataclass(frozen=True)
class Rectangle:
    """Axis-aligned filled rectangle covering rows corner[0]..corner[0]+size[0]-1
    and the analogous columns."""

    corner: tuple[int, int]  # (row, col) of the top-left pixel
    size: tuple[int, int]  # (height, width) in pixels
    intensity: float
    kind = "rectangle"

    def validate(self, height, width):
        r, c = self.corner
        h, w = self.size
        if h < 1 or w < 1:
            raise ValidationError("rectangle size must be >= 1x1")
        if r < 0 or c < 0 or r + h > height or c + w > width:
            raise ValidationError("rectangle extends outside the canvas")

    def rasterize(self, height, width):
        mask = np.zeros((height, width), dtype=bool)
        r, c = self.corner
        h, w = self.size
        mask[r:r + h, c:c + w] = True
        return mask


@dataclasses.dataclass(frozen=True)
class BarGroup:
    """Vertical resolution bars: ``count`` bars of width ``bar_width_px``
    separated by ``gap_px``, starting at ``origin`` (row, col). Bar height
    defaults to 5x the bar width, the usual line-pair aspect."""

    origin: tuple[int, int]
    bar_width_px: int
    gap_px: int
    count: int
    intensity: float
    bar_height_px: int | None = None
    kind = "bar_group"

    @property
    def height_px(self) -> int:
        return self.bar_height_px if self.bar_height_px is not None else 5 * self.bar_width_px

    def validate(self, height, width):
        if self.bar_width_px < 1 or self.gap_px < 0 or self.count < 1:
            raise ValidationError("bar group needs width >= 1, gap >= 0, count >= 1")
        r, c = self.origin
        last_col = c + (self.count - 1) * (self.bar_width_px + self.gap_px) + self.bar_width_px - 1
        if r < 0 or c < 0 or r + self.height_px > height or last_col > width - 1:
            raise ValidationError("bar group extends outside the canvas")

    def rasterize(self, height, width):
        mask = np.zeros((height, width), dtype=bool)
        r, c = self.origin
        stride = self.bar_width_px + self.gap_px
        for k in range(self.count):
            c0 = c + k * stride
            mask[r:r + self.height_px, c0:c0 + self.bar_width_px] = True
        return mask


@dataclasses.dataclass(frozen=True)
class Crack:
    """Polyline of given thickness: a pixel is painted iff its center lies
    within thickness_px/2 of any segment."""

    polyline: tuple[tuple[float, float], ...]  # ((row, col), ...), >= 2 points
    thickness_px: float
    intensity: float
    kind = "crack"

    def validate(self, height, width):
        if len(self.polyline) < 2:
            raise ValidationError("crack polyline needs at least 2 points")
        if self.thickness_px <= 0:
            raise ValidationError("crack thickness must be > 0")
        t2 = self.thickness_px / 2.0
        for r, c in self.polyline:
            if r - t2 < 0 or r + t2 > height - 1 or c - t2 < 0 or c + t2 > width - 1:
                raise ValidationError("crack extends outside the canvas")

    def rasterize(self, height, width):
        mask = np.zeros((height, width), dtype=bool)
        t2 = self.thickness_px / 2.0
        pts = np.asarray(self.polyline, dtype=np.float64)
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            rmin = max(int(np.floor(min(r0, r1) - t2)), 0)
            rmax = min(int(np.ceil(max(r0, r1) + t2)), height - 1)
            cmin = max(int(np.floor(min(c0, c1) - t2)), 0)
            cmax = min(int(np.ceil(max(c0, c1) + t2)), width - 1)
            rr, cc = np.mgrid[rmin:rmax + 1, cmin:cmax + 1]
            dr, dc = r1 - r0, c1 - c0
            seg2 = dr * dr + dc * dc
            if seg2 == 0.0:
                d2 = (rr - r0) ** 2 + (cc - c0) ** 2
            else:
                t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0.0, 1.0)
                d2 = (rr - (r0 + t * dr)) ** 2 + (cc - (c0 + t * dc)) ** 2
            hit = d2 <= t2 * t2
            mask[rmin:rmax + 1, cmin:cmax + 1] |= hit
        return mask


_PRIMITIVE_KINDS = {cls.kind: cls for cls in (Disk, Rectangle, BarGroup, Crack)}

Primitive = Disk | Rectangle | BarGroup | Crack


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Canvas plus an ordered list of primitives, rendered back to front."""

    height: int
    width: int
    background: float
    primitives: tuple[Primitive, ...] = ()

    def validate(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError("canvas dims must be >= 1x1")
        if not 0.0 <= self.background <= PIXEL_MAX:
            raise ValidationError("background intensity out of [0, 65535]")
        for i, prim in enumerate(self.primitives):
            try:
                if not 0.0 <= prim.intensity <= PIXEL_MAX:
                    raise ValidationError("intensity out of [0, 65535]")
                prim.validate(self.height, self.width)
            except ValidationError as exc:
                raise ValidationError(f"primitive {i} ({prim.kind}): {exc}") from None

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = dataclasses.asdict(p)
            d["kind"] = p.kind
            prims.append(d)
        return {"height": self.height, "width": self.width,
                "background": self.background, "primitives": prims}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        prims = []
        for d in data.get("primitives", []):
            d = dict(d)
            kind = d.pop("kind")
            if kind not in _PRIMITIVE_KINDS:
                raise ValidationError(f"unknown primitive kind {kind!r}")
            pcls = _PRIMITIVE_KINDS[kind]
            for key in ("center", "corner", "size", "origin"):
                if key in d and d[key] is not None:
                    d[key] = tuple(d[key])
            if "polyline" in d:
                d["polyline"] = tuple(tuple(p) for p in d["polyline"])
            prims.append(pcls(**d))
        return cls(height=data["height"], width=data["width"],
                   background=data["background"], primitives=tuple(prims))


def generate_phantom(spec: SceneSpec, seed: int = 0) -> Image:
    """Render a scene to an Image.

    Primitives are painted in list order (later ones overwrite earlier ones)
    at exactly their stated intensities, with no anti-aliasing. ``seed`` is
    accepted for interface uniformity; rendering itself is exact.
    """
    spec.validate()
    canvas = np.full((spec.height, spec.width), float(spec.background))
    for prim in spec.primitives:
        canvas[prim.rasterize(spec.height, spec.width)] = float(prim.intensity)
    return Image(canvas)


def random_scene(rng: np.random.Generator, height: int, width: int) -> SceneSpec:
    """Draw a random valid scene: a mid-intensity background with 2..5
    primitives of mixed kinds, geometry kept inside the canvas."""
    background = float(rng.integers(800, 3000))
    prims = []
    for _ in range(int(rng.integers(2, 6))):
        kind = rng.choice(["disk", "rectangle", "bar_group", "crack"])
        intensity = float(rng.integers(8000, 60000))
        if kind == "disk":
            radius = float(rng.integers(2, max(3, min(height, width) // 6)))
            r = float(rng.integers(int(radius), int(height - 1 - radius) + 1))
            c = float(rng.integers(int(radius), int(width - 1 - radius) + 1))
            prims.append(Disk(center=(r, c), radius=radius, intensity=intensity))
        elif kind == "rectangle":
            h = int(rng.integers(2, max(3, height // 3)))
            w = int(rng.integers(2, max(3, width // 3)))
            r = int(rng.integers(0, height - h + 1))
            c = int(rng.integers(0, width - w + 1))
            prims.append(Rectangle(corner=(r, c), size=(h, w), intensity=intensity))
        elif kind == "bar_group":
            bw = int(rng.integers(1, 4))
            gap = int(rng.integers(1, 4))
            count = int(rng.integers(2, 5))
            bh = 5 * bw
            span = (count - 1) * (bw + gap) + bw
            if bh >= height or span >= width:
                continue
            r = int(rng.integers(0, height - bh))
            c = int(rng.integers(0, width - span))
            prims.append(BarGroup(origin=(r, c), bar_width_px=bw, gap_px=gap,
                                  count=count, intensity=intensity))
        else:
            t = float(rng.integers(1, 3))
            t2 = t / 2.0
            npts = int(rng.integers(2, 5))
            pts = tuple(
                (float(rng.uniform(t2, height - 1 - t2)), float(rng.uniform(t2, width - 1 - t2)))
                for _ in range(npts)
            )
            prims.append(Crack(polyline=pts, thickness_px=t, intensity=intensity))
    return SceneSpec(height=height, width=width, background=background,
                     primitives=tuple(prims))


# ---------------------------------------------------------------------------
# Noise model


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
    """Additive/replacement noise in raw units.

    gaussian_sigma: std of the zero-mean additive component.
    impulse_fraction: per-pixel probability of salt-and-pepper replacement
        (0 or 65535, equiprobable).
    poisson_scale: 0 disables shot noise; otherwise each pixel is drawn
        Poisson(u / poisson_scale) and rescaled by poisson_scale.
    """

    gaussian_sigma: float = 0.0
    impulse_fraction: float = 0.0
    poisson_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValidationError("gaussian_sigma must be >= 0")
        if not 0.0 <= self.impulse_fraction <= 1.0:
            raise ValidationError("impulse_fraction must be in [0, 1]")
        if self.poisson_scale < 0:
            raise ValidationError("poisson_scale must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


def apply_noise(clean: Image, cfg: NoiseConfig) -> Image:
    """Corrupt a clean image per the config; clamped to [0, 65535].

    Draw order (fixed so a seed fully determines the output): Poisson
    resampling, then additive Gaussian, then impulse replacement.
    """
    rng = np.random.default_rng(cfg.seed)
    out = clean.pixels.copy()
    if cfg.poisson_scale > 0:
        lam = np.maximum(out, 0.0) / cfg.poisson_scale
        out = rng.poisson(lam).astype(np.float64) * cfg.poisson_scale
    if cfg.gaussian_sigma > 0:
        out = out + rng.normal(0.0, cfg.gaussian_sigma, out.shape)
    if cfg.impulse_fraction > 0:
        hits = rng.random(out.shape) < cfg.impulse_fraction
        salt = rng.random(out.shape) < 0.5
        out[hits] = np.where(salt[hits], PIXEL_MAX, 0.0)
    np.clip(out, 0.0, PIXEL_MAX, out=out)
    return Image(out)


# ---------------------------------------------------------------------------
# Bicubic resizing


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Convolution kernel with a = -0.5; support (-2, 2).
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    out[near] = (1.5 * t[near] - 2.5) * t[near] * t[near] + 1.0
    far = (t > 1.0) & (t < 2.0)
    out[far] = ((-0.5 * t[far] + 2.5) * t[far] - 4.0) * t[far] + 2.0
    return out


@functools.lru_cache(maxsize=128)
def _bicubic_taps(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-output-position source indices (n_out, 4) and float64 kernel
    weights (n_out, 4) for one axis. Half-pixel-center source mapping; taps
    falling outside the axis are clamped to the edge (replication)."""
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    j0 = np.floor(src)
    offsets = np.arange(-1, 3, dtype=np.float64)
    idx = np.clip(j0[:, None] + offsets[None, :], 0, n_in - 1).astype(np.int64)
    weights = _cubic_kernel(src[:, None] - (j0[:, None] + offsets[None, :]))
    return torch.from_numpy(idx), torch.from_numpy(weights)


def resize_bicubic_t(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bicubic resize of the last two dims of a tensor.

    One shared implementation backs both the public image op and the network
    forward passes, so "equals bicubic" tests can demand bit equality. The 16
    taps are accumulated in a fixed order, making the op deterministic; it is
    linear in ``x`` and differentiable.
    """
    if x.ndim < 2:
        raise ValidationError("expected a tensor with >= 2 dims")
    if out_h < 1 or out_w < 1:
        raise ValidationError("target dims must be >= 1")
    iy, wy = _bicubic_taps(x.shape[-2], out_h)
    ix, wx = _bicubic_taps(x.shape[-1], out_w)
    wy = wy.to(x.dtype)
    wx = wx.to(x.dtype)
    out = None
    for m in range(4):
        rows = x.index_select(-2, iy[:, m])
        for n in range(4):
            vals = rows.index_select(-1, ix[:, n])
            term = vals * (wy[:, m].unsqueeze(-1) * wx[:, n])
            out = term if out is None else out + term
    return out


def resize_bicubic(img: Image, target_height: int, target_width: int) -> Image:
    """Resize with the standard bicubic kernel (a = -0.5), edge replication.

    A same-size target returns a pixel-identical copy (the kernel weights at
    integer offsets are exactly (0, 1, 0, 0)). Output is not clamped; callers
    serialize through ``Image.to_u16`` which clamps.
    """
    t = torch.from_numpy(img.pixels)
    return Image(resize_bicubic_t(t, target_height, target_width).numpy())


# ---------------------------------------------------------------------------
# File I/O


def write_raw16(img: Image, path) -> None:
    """RAW16: magic "BSR1", u32 BE width, u32 BE height, u16 LE pixels row-major."""
    header = RAW16_MAGIC + struct.pack(">II", img.width, img.height)
    body = img.to_u16().astype("<u2").tobytes()
    Path(path).write_bytes(header + body)


def read_raw16(path) -> Image:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FileFormatError(f"{path}: truncated RAW16 header ({len(data)} bytes)")
    if data[:4] != RAW16_MAGIC:
        raise FileFormatError(f"{path}: bad RAW16 magic {data[:4]!r}")
    width, height = struct.unpack(">II", data[4:12])
    if width < 1 or height < 1:
        raise FileFormatError(f"{path}: invalid dims {width}x{height}")
    expected = 12 + 2 * width * height
    if len(data) != expected:
        raise FileFormatError(
            f"{path}: truncated RAW16 ({len(data)} bytes, expected {expected})")
    pixels = np.frombuffer(data, dtype="<u2", offset=12).reshape(height, width)
    return Image(pixels.astype(np.float64))


def write_png16(img: Image, path) -> None:
    _PILImage.fromarray(img.to_u16()).save(path, format="PNG")


def read_png16(path) -> Image:
    try:
        with _PILImage.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    if mode not in ("I;16", "I;16B", "I"):
        raise FileFormatError(f"{path}: expected 16-bit grayscale PNG, got mode {mode!r}")
    arr = arr.astype(np.float64)
    if arr.ndim != 2 or arr.max(initial=0.0) > PIXEL_MAX or arr.min(initial=0.0) < 0:
        raise FileFormatError(f"{path}: pixel values outside the 16-bit range")
    return Image(arr)


def write_image(img: Image, path) -> None:
    """Dispatch on extension: .png (16-bit grayscale) or .bsr (RAW16)."""
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        write_png16(img, path)
    elif suffix == ".bsr":
        write_raw16(img, path)
    else:
        raise FileFormatError(f"unsupported image format {suffix!r}")


def read_image(path) -> Image:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return read_png16(path)
    if suffix == ".bsr":
        return read_raw16(path)
    raise FileFormatError(f"unsupported image format {suffix!r}")

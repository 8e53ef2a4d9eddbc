"""Training loss and no-reference / full-reference image quality metrics.

All metrics operate in raw detector units unless stated otherwise; CPBD
follows the usual convention of working on an 8-bit-equivalent scale.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .imagecore import PIXEL_MAX, Image, ValidationError

# ---------------------------------------------------------------------------
# Charbonnier loss


@dataclasses.dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-3
    reduction: str = "masked_mean"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.reduction not in ("masked_mean", "full_mean"):
            raise ValidationError(f"unknown reduction {self.reduction!r}")


def charbonnier_loss(pred, target, mask=None, cfg: LossConfig = LossConfig()):
    """Mean Charbonnier penalty sqrt(d^2 + eps^2), over masked pixels only
    under ``masked_mean`` or over everything under ``full_mean``.

    Computed as eps + mean(hypot(d, eps) - eps): hypot(0, eps) - eps is an
    exact zero in floating point, so identical inputs give exactly eps, which
    is also the infimum of the loss. Differentiable in pred and target.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValidationError(
            f"pred/target shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    eps = torch.as_tensor(cfg.epsilon, dtype=pred.dtype)
    excess = torch.hypot(pred - target, eps) - eps
    if cfg.reduction == "masked_mean":
        if mask is None:
            raise ValidationError("masked_mean reduction requires a mask")
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape != pred.shape:
            raise ValidationError(
                f"mask shape mismatch: {tuple(mask.shape)} vs {tuple(pred.shape)}")
        count = int(mask.sum())
        if count == 0:
            raise ValidationError("masked_mean reduction with an empty mask")
        return eps + excess[mask].sum() / count
    return eps + excess.mean()


# ---------------------------------------------------------------------------
# Local contrast


def local_contrast(img) -> float:
    """RMS difference to in-bounds 8-neighbors, in raw units.

    Numerator sums (f(i,j) - f(k,l))^2 over every pixel and each of its
    in-bounds 8-neighbors; the denominator is the exact pair count
    8(M-2)(N-2) + 5(2(M-2) + 2(N-2)) + 3*4. Lower is smoother.
    """
    x = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValidationError("local_contrast needs a 2-D image with dims >= 2")
    m, n = x.shape
    num = 0.0
    for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)):
        a = x[max(dr, 0):m + min(dr, 0), max(dc, 0):n + min(dc, 0)]
        b = x[max(-dr, 0):m + min(-dr, 0), max(-dc, 0):n + min(-dc, 0)]
        num += float(((a - b) ** 2).sum())
    den = 8 * (m - 2) * (n - 2) + 5 * (2 * (m - 2) + 2 * (n - 2)) + 3 * 4
    return math.sqrt(num / den)


# ---------------------------------------------------------------------------
# CPBD sharpness

_CPBD_BLOCK = 64
_CPBD_BETA = 3.6
_CPBD_P_JNB = 0.63
_BLOCK_EDGE_FRACTION = 0.002  # min fraction of edge pixels for an edge block
_EDGE_MAG_FLOOR = 0.002 * 255.0  # min 8-bit-scale Sobel magnitude for an edge


def _marziliano_width(row: np.ndarray, j: int, rising: bool) -> int:
    """Edge width as the distance between the local extrema of the row
    profile on either side of column j (strict monotonicity walk)."""
    left = j
    right = j
    n = row.shape[0]
    if rising:
        while left > 0 and row[left - 1] < row[left]:
            left -= 1
        while right < n - 1 and row[right + 1] > row[right]:
            right += 1
    else:
        while left > 0 and row[left - 1] > row[left]:
            left -= 1
        while right < n - 1 and row[right + 1] < row[right]:
            right += 1
    return right - left


def cpbd(img) -> tuple[float, bool]:
    """Cumulative probability of blur detection, in [0, 1]; higher is sharper.

    Pipeline: rescale to the 8-bit-equivalent range (divide by 257), take the
    horizontal Sobel gradient, thin it to row-wise local maxima above a small
    magnitude floor, classify 64x64 blocks as edge blocks when they hold more
    than 0.2% edge pixels, measure each edge's Marziliano width along its row,
    convert to a blur-detection probability P = 1 - exp(-(w / w_JNB)^beta)
    with w_JNB = 5 for low-contrast blocks (range <= 50) and 3 otherwise, and
    report the fraction of edges with P <= 0.63.

    An image with no detected edge blocks has no blur to detect; the score is
    1.0 with the no-edges flag set.
    """
    x = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < _CPBD_BLOCK or x.shape[1] < _CPBD_BLOCK:
        raise ValidationError(f"cpbd needs an image of at least {_CPBD_BLOCK}x{_CPBD_BLOCK}")
    g = x / 257.0
    grad = ndimage.sobel(g, axis=1, mode="nearest")
    mag = np.abs(grad)
    edge = np.zeros_like(mag, dtype=bool)
    interior = mag[:, 1:-1]
    edge[:, 1:-1] = (interior >= mag[:, :-2]) & (interior >= mag[:, 2:]) \
        & (interior > _EDGE_MAG_FLOOR)

    sharp = 0
    total = 0
    h, w = g.shape
    for br in range(h // _CPBD_BLOCK):
        for bc in range(w // _CPBD_BLOCK):
            rs = slice(br * _CPBD_BLOCK, (br + 1) * _CPBD_BLOCK)
            cs = slice(bc * _CPBD_BLOCK, (bc + 1) * _CPBD_BLOCK)
            block_edges = edge[rs, cs]
            n_edges = int(block_edges.sum())
            if n_edges <= _BLOCK_EDGE_FRACTION * _CPBD_BLOCK * _CPBD_BLOCK:
                continue
            block = g[rs, cs]
            w_jnb = 5.0 if float(block.max() - block.min()) <= 50.0 else 3.0
            rows, cols = np.nonzero(block_edges)
            for i, j in zip(rows, cols):
                gi = rs.start + i
                gj = cs.start + j
                if grad[gi, gj] == 0.0:
                    continue
                width = _marziliano_width(g[gi], gj, rising=grad[gi, gj] > 0.0)
                if width == 0:
                    continue
                p_blur = 1.0 - math.exp(-((width / w_jnb) ** _CPBD_BETA))
                total += 1
                if p_blur <= _CPBD_P_JNB:
                    sharp += 1
    if total == 0:
        return 1.0, True
    return sharp / total, False


# ---------------------------------------------------------------------------
# Full-reference metrics


def mse(a, b) -> float:
    xa = a.pixels if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    xb = b.pixels if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ValidationError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    return float(np.mean((xa - xb) ** 2))


def psnr(a, b) -> float:
    """Peak SNR against the 16-bit range; identical images give +inf."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(PIXEL_MAX * PIXEL_MAX / err)


# ---------------------------------------------------------------------------
# Reports


@dataclasses.dataclass(frozen=True)
class MetricsRecord:
    image_id: str
    c_l: float
    cpbd: float
    no_edges: bool
    mse: float | None = None
    psnr: float | None = None


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    """Per-image records for one processing method, plus corpus means."""

    method: str
    records: tuple[MetricsRecord, ...]

    def _mean(self, field: str):
        vals = [getattr(r, field) for r in self.records]
        if any(v is None for v in vals) or not vals:
            return None
        return sum(vals) / len(vals)

    @property
    def mean_c_l(self):
        return self._mean("c_l")

    @property
    def mean_cpbd(self):
        # The no-edges convention scores 1.0 vacuously; those records carry
        # no sharpness information, so the corpus mean leaves them out.
        vals = [r.cpbd for r in self.records if not r.no_edges]
        return sum(vals) / len(vals) if vals else None

    @property
    def mean_psnr(self):
        return self._mean("psnr")

    def to_lines(self) -> list[str]:
        """Human-readable rows: one per image plus a final corpus-mean row."""
        lines = []
        for r in self.records:
            line = (f"{r.image_id:<16} C_l={_fmt(r.c_l):>11} "
                    f"CPBD={_fmt(r.cpbd):>7}")
            if r.no_edges:
                line += " (no edges)"
            if r.psnr is not None:
                line += f" PSNR={_fmt(r.psnr):>9}"
            lines.append(line)
        summary = (f"{'mean':<16} C_l={_fmt(self.mean_c_l):>11} "
                   f"CPBD={_fmt(self.mean_cpbd):>7}")
        if self.mean_psnr is not None:
            summary += f" PSNR={_fmt(self.mean_psnr):>9}"
        lines.append(summary)
        return lines


def compute_record(image_id: str, img: Image, reference: Image | None = None) -> MetricsRecord:
    score, flag = cpbd(img)
    rec_mse = rec_psnr = None
    if reference is not None:
        rec_mse = mse(img, reference)
        rec_psnr = psnr(img, reference)
    return MetricsRecord(image_id=image_id, c_l=local_contrast(img), cpbd=score,
                         no_edges=flag, mse=rec_mse, psnr=rec_psnr)


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if v == math.inf:
        return "inf"
    return f"{v:.4f}"


def summary_table(reports: list[MetricsReport]) -> str:
    """Fixed-width comparison table: one row per method."""
    header = f"{'method':<10} {'mean_C_l':>12} {'mean_CPBD':>12} {'mean_PSNR':>12}"
    rows = [header, "-" * len(header)]
    for rep in reports:
        rows.append(f"{rep.method:<10} {_fmt(rep.mean_c_l):>12} "
                    f"{_fmt(rep.mean_cpbd):>12} {_fmt(rep.mean_psnr):>12}")
    return "\n".join(rows)


def save_reports(reports: list[MetricsReport], path) -> None:
    """One JSON object per line, one line per record; corpus means are
    recomputed on load rather than stored."""
    lines = []
    for rep in reports:
        for r in rep.records:
            lines.append(json.dumps({"method": rep.method,
                                     **dataclasses.asdict(r)}))
    Path(path).write_text("\n".join(lines) + "\n")


def load_reports(path) -> list[MetricsReport]:
    by_method: dict[str, list[MetricsRecord]] = {}
    order: list[str] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        method = d.pop("method")
        if method not in by_method:
            by_method[method] = []
            order.append(method)
        by_method[method].append(MetricsRecord(**d))
    return [MetricsReport(method=m, records=tuple(by_method[m])) for m in order]

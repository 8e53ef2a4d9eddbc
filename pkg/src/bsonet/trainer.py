"""Training recipe, checkpointing, the full two-stage inference pipeline, and
corpus evaluation.

Scale convention: training divides raw images by 65535 at the trainer
boundary; the networks themselves never rescale. Inference keeps the
straight-through path in raw units and normalizes only the correction-branch
inputs (see full_pipeline_infer). Checkpoints are a versioned
binary container (magic "BSCK"): a canonical JSON header holding configs,
config fingerprints, and a shape manifest in parameter enumeration order,
followed by little-endian tensor blobs. Identical checkpoints serialize to
identical bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from . import n2v
from .baselines import BaselineConfig, bilateral_filter, gaussian_filter, nlm_denoise
from .bsformer import BSformer, BSformerConfig, init_bsformer
from .imagecore import (PIXEL_MAX, FileFormatError, Image, ValidationError,
                        resize_bicubic_t)
from .metrics import LossConfig, MetricsReport, charbonnier_loss, compute_record
from .ranet import RANet, RANetConfig, init_ranet, ranet_forward

CHECKPOINT_MAGIC = b"BSCK"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": (torch.float32, "<f4"), "float64": (torch.float64, "<f8")}

EVAL_METHODS = ("identity", "gaussian", "bilateral", "nlm", "bsonet")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 4
    lr_initial: float = 1e-4
    lr_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.02
    seed: int = 0
    train_fraction: float = 760 / 906  # published train:test proportions
    schedule_per_step: bool = False
    pipeline: str = "full"  # "full" resizer-wrapped, or "bsformer_only"
    dtype: str = "float32"
    single_threaded: bool = True  # required for bit-reproducible histories

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr_min < self.lr_initial:
            raise ValidationError("lr_min must be < lr_initial")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValidationError("train_fraction must be in (0, 1]")
        if self.pipeline not in ("full", "bsformer_only"):
            raise ValidationError(f"unknown pipeline mode {self.pipeline!r}")
        if self.dtype not in _DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


class TrainingDivergence(Exception):
    """Raised when the loss goes non-finite; carries the last finite
    checkpoint and the history up to the abort."""

    def __init__(self, checkpoint: "Checkpoint", history: list):
        super().__init__("training diverged: non-finite loss")
        self.checkpoint = checkpoint
        self.history = history


def cosine_lr(t: float, total: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing lr_min + (lr0 - lr_min)(1 + cos(pi t / total)) / 2,
    computed as the convex combination lr0 * w + lr_min * (1 - w) so both
    endpoints (and the midpoint) are floating-point exact."""
    if total < 1:
        raise ValidationError("total must be >= 1")
    if not 0 <= t <= total:
        raise ValidationError(f"schedule position t={t} outside [0, {total}]")
    w = 0.5 * (1.0 + math.cos(math.pi * t / total))
    return lr0 * w + lr_min * (1.0 - w)


_EPOCH_GOLDEN = 0x9E3779B97F4A7C15


def epoch_seed(base_seed: int, epoch: int) -> int:
    """Seed for one epoch's data pipeline: base + golden-ratio stride per
    epoch, mod 2^64. Pair i within the epoch then uses epoch_seed XOR i."""
    return (base_seed + _EPOCH_GOLDEN * (epoch + 1)) % (1 << 64)


def best_epoch(losses: list[float]) -> int:
    """1-based epoch whose mean training loss is minimal (first minimum)."""
    if not losses:
        raise ValidationError("empty loss history")
    return int(np.argmin(losses)) + 1


def split_decay_params(named_params) -> tuple[list, list]:
    """(decay, no_decay) name/param lists. Biases, normalization gains, and
    relative-position bias tables are exempt from weight decay."""
    decay, no_decay = [], []
    for name, p in named_params:
        if p.ndim <= 1 or name.endswith("bias_table"):
            no_decay.append((name, p))
        else:
            decay.append((name, p))
    return decay, no_decay


# ---------------------------------------------------------------------------
# Checkpoint container


class CheckpointError(FileFormatError):
    """Corrupt container or config/weights fingerprint mismatch."""


@dataclasses.dataclass
class Checkpoint:
    ranet: RANet
    bsformer: BSformer
    ranet_back: RANet | None  # None when both resize stages share weights
    epoch: int
    best_loss: float
    dtype: str = "float32"
    format_version: int = CHECKPOINT_VERSION

    @property
    def ranet_for_restore(self) -> RANet:
        return self.ranet_back if self.ranet_back is not None else self.ranet


def _cfg_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _fingerprint(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _named_modules(ckpt: Checkpoint) -> list[tuple[str, torch.nn.Module]]:
    mods = [("ranet", ckpt.ranet), ("bsformer", ckpt.bsformer)]
    if ckpt.ranet_back is not None:
        mods.append(("ranet_back", ckpt.ranet_back))
    return mods


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    np_dtype = _DTYPES[ckpt.dtype][1]
    entries = []
    blobs = []
    offset = 0
    for prefix, module in _named_modules(ckpt):
        for name, p in module.named_parameters():
            blob = p.detach().cpu().numpy().astype(np_dtype).tobytes()
            entries.append({"name": f"{prefix}.{name}", "shape": list(p.shape),
                            "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    ranet_cfg = _cfg_dict(ckpt.ranet.cfg)
    bsformer_cfg = _cfg_dict(ckpt.bsformer.cfg)
    header = {
        "format_version": ckpt.format_version,
        "dtype": ckpt.dtype,
        "epoch": ckpt.epoch,
        "best_loss": ckpt.best_loss,
        "shared_ranet": ckpt.ranet_back is None,
        "ranet_cfg": ranet_cfg,
        "bsformer_cfg": bsformer_cfg,
        "fingerprints": {"ranet": _fingerprint(ranet_cfg),
                         "bsformer": _fingerprint(bsformer_cfg)},
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    Path(path).write_bytes(
        CHECKPOINT_MAGIC + struct.pack(">I", len(head)) + head + b"".join(blobs))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    head_len = struct.unpack(">I", data[4:8])[0]
    if len(data) < 8 + head_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + head_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}")
    for key in ("ranet", "bsformer"):
        if _fingerprint(header[f"{key}_cfg"]) != header["fingerprints"][key]:
            raise CheckpointError(f"{path}: {key} config fingerprint mismatch")

    rd = dict(header["ranet_cfg"])
    rd["working_size"] = tuple(rd["working_size"])
    ranet_cfg = RANetConfig(**rd)
    bd = dict(header["bsformer_cfg"])
    bd["encoder_depths"] = tuple(bd["encoder_depths"])
    bd["heads"] = tuple(bd["heads"])
    bsformer_cfg = BSformerConfig(**bd)

    dtype, np_dtype = _DTYPES[header["dtype"]]
    ckpt = Checkpoint(
        ranet=RANet(ranet_cfg).to(dtype),
        bsformer=BSformer(bsformer_cfg).to(dtype),
        ranet_back=None if header["shared_ranet"] else RANet(ranet_cfg).to(dtype),
        epoch=header["epoch"], best_loss=header["best_loss"],
        dtype=header["dtype"], format_version=header["format_version"])
    params = {f"{prefix}.{name}": p
              for prefix, module in _named_modules(ckpt)
              for name, p in module.named_parameters()}
    body = data[8 + head_len:]
    seen = set()
    for entry in header["entries"]:
        name = entry["name"]
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter entry {name!r}")
        blob = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for {name!r}")
        arr = np.frombuffer(blob, dtype=np_dtype).reshape(entry["shape"])
        with torch.no_grad():
            params[name].copy_(torch.from_numpy(arr.copy()))
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing parameter entries {sorted(missing)[:3]}")
    for module in (ckpt.ranet, ckpt.bsformer, ckpt.ranet_back):
        if module is not None:
            module.eval()
    return ckpt


# ---------------------------------------------------------------------------
# Training loop


def _pad_reflect_to(arr: np.ndarray, th: int, tw: int) -> np.ndarray:
    # np.pad(reflect) cannot pad by more than dim-1 at once; iterate.
    while arr.shape[0] < th or arr.shape[1] < tw:
        pr = min(max(th - arr.shape[0], 0), arr.shape[0] - 1)
        pc = min(max(tw - arr.shape[1], 0), arr.shape[1] - 1)
        if pr == 0 and pc == 0:
            raise ValidationError("cannot reflect-pad a 1-pixel axis")
        arr = np.pad(arr, ((0, pr), (0, pc)), mode="reflect")
    return arr


def _random_crop(pixels: np.ndarray, size: tuple[int, int],
                 rng: np.random.Generator) -> np.ndarray:
    th, tw = size
    arr = _pad_reflect_to(pixels, th, tw)
    r = int(rng.integers(arr.shape[0] - th + 1))
    c = int(rng.integers(arr.shape[1] - tw + 1))
    return np.ascontiguousarray(arr[r:r + th, c:c + tw])


def _center_crop(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    th, tw = size
    arr = _pad_reflect_to(pixels, th, tw)
    r = (arr.shape[0] - th) // 2
    c = (arr.shape[1] - tw) // 2
    return np.ascontiguousarray(arr[r:r + th, c:c + tw])


def _stack_pairs(pairs: list[n2v.TrainingPair], dtype: torch.dtype):
    x = torch.stack([torch.from_numpy(p.input.pixels / PIXEL_MAX) for p in pairs])
    y = torch.stack([torch.from_numpy(p.target.pixels / PIXEL_MAX) for p in pairs])
    m = torch.stack([torch.from_numpy(p.mask) for p in pairs])
    return x.unsqueeze(1).to(dtype), y.unsqueeze(1).to(dtype), m.unsqueeze(1)


_VAL_SEED_TAG = 0x56414C00  # "VAL" marker for validation pair seeds


def train(dataset: list[Image], n2v_cfg: n2v.N2VConfig, ranet_cfg: RANetConfig,
          bsformer_cfg: BSformerConfig, train_cfg: TrainConfig) -> tuple[Checkpoint, list]:
    """Run the recipe and return the best checkpoint plus per-epoch history.

    Per epoch: derive a fresh seed, draw random working-size crops
    (reflect-padded when the source is smaller), rebuild blind-spot pairs
    (pair i uses epoch_seed XOR i), forward the resizer-wrapped pipeline,
    apply masked Charbonnier loss with decoupled weight decay and cosine LR.
    The retained checkpoint has the minimum epoch-mean training loss. With
    single_threaded (the default), histories are bit-reproducible per seed.
    """
    if not dataset:
        raise ValidationError("training dataset is empty")
    if train_cfg.single_threaded:
        torch.set_num_threads(1)
    dtype = _DTYPES[train_cfg.dtype][0]
    working = ranet_cfg.working_size
    if working[0] % bsformer_cfg.min_divisor or working[1] % bsformer_cfg.min_divisor:
        raise ValidationError(
            f"working size {working} not divisible by {bsformer_cfg.min_divisor}")

    n_train = max(1, int(round(train_cfg.train_fraction * len(dataset))))
    train_imgs = list(dataset[:n_train])
    val_imgs = list(dataset[n_train:])

    front = init_ranet(ranet_cfg, dtype)
    back = None
    if not ranet_cfg.shared_weights:
        back_cfg = dataclasses.replace(ranet_cfg, init_seed=ranet_cfg.init_seed + 1)
        back = init_ranet(back_cfg, dtype)
    model = init_bsformer(bsformer_cfg, dtype)
    modules = {"ranet": front, "bsformer": model}
    if back is not None:
        modules["ranet_back"] = back
    named = [(f"{pref}.{n}", p) for pref, m in modules.items()
             for n, p in m.named_parameters()]
    decay, no_decay = split_decay_params(named)
    opt = torch.optim.AdamW(
        [{"params": [p for _, p in decay], "weight_decay": train_cfg.weight_decay},
         {"params": [p for _, p in no_decay], "weight_decay": 0.0}],
        lr=train_cfg.lr_initial, betas=train_cfg.betas)
    loss_cfg = LossConfig(
        reduction="masked_mean" if n2v_cfg.masked_loss_only else "full_mean")

    def forward(x):
        if train_cfg.pipeline == "bsformer_only":
            return model(x)
        t = ranet_forward(x, working, front)
        t = model(t)
        return ranet_forward(t, working, back if back is not None else front)

    def snapshot():
        return {name: p.detach().clone() for name, p in named}

    def make_checkpoint(states, epoch, loss):
        ck = Checkpoint(ranet=init_ranet(ranet_cfg, dtype),
                        bsformer=init_bsformer(bsformer_cfg, dtype),
                        ranet_back=None if back is None else init_ranet(ranet_cfg, dtype),
                        epoch=epoch, best_loss=loss, dtype=train_cfg.dtype)
        target = {f"{pref}.{n}": p for pref, m in _named_modules(ck)
                  for n, p in m.named_parameters()}
        with torch.no_grad():
            for name, value in states.items():
                target[name].copy_(value)
        for m in (ck.ranet, ck.bsformer, ck.ranet_back):
            if m is not None:
                m.eval()
        return ck

    val_pairs = []
    for i, img in enumerate(val_imgs):
        crop = Image(_center_crop(img.pixels, working))
        vcfg = dataclasses.replace(n2v_cfg, seed=(n2v_cfg.seed ^ (_VAL_SEED_TAG + i)))
        val_pairs.append(n2v.build_pair(crop, vcfg))

    steps_per_epoch = math.ceil(len(train_imgs) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    history: list[dict] = []
    best: tuple[float, int, dict] | None = None
    last_finite = (0, snapshot())
    step = 0

    for epoch in range(train_cfg.epochs):
        eseed = epoch_seed(train_cfg.seed, epoch)
        rng = np.random.default_rng(eseed)
        order = rng.permutation(len(train_imgs))
        crops = [_random_crop(train_imgs[i].pixels, working, rng) for i in order]
        ecfg = dataclasses.replace(n2v_cfg, seed=eseed)
        pairs = [n2v.build_pair(Image(c), ecfg, pair_index=rank)
                 for rank, c in enumerate(crops)]
        if not train_cfg.schedule_per_step:
            lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr_initial, train_cfg.lr_min)
            for g in opt.param_groups:
                g["lr"] = lr
        batch_losses = []
        for b0 in range(0, len(pairs), train_cfg.batch_size):
            if train_cfg.schedule_per_step:
                lr = cosine_lr(step, total_steps, train_cfg.lr_initial, train_cfg.lr_min)
                for g in opt.param_groups:
                    g["lr"] = lr
            x, y, m = _stack_pairs(pairs[b0:b0 + train_cfg.batch_size], dtype)
            pred = forward(x)
            loss = charbonnier_loss(pred, y, m if n2v_cfg.masked_loss_only else None,
                                    loss_cfg)
            if not torch.isfinite(loss):
                states = best[2] if best is not None else last_finite[1]
                ep = best[1] if best is not None else last_finite[0]
                ls = best[0] if best is not None else math.inf
                raise TrainingDivergence(make_checkpoint(states, ep, ls),
                                         history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
            step += 1
        epoch_loss = sum(batch_losses) / len(batch_losses)
        entry = {"epoch": epoch + 1, "loss": epoch_loss, "lr": lr}
        if val_pairs:
            with torch.no_grad():
                vx, vy, vm = _stack_pairs(val_pairs, dtype)
                entry["val_loss"] = float(charbonnier_loss(
                    forward(vx), vy, vm if n2v_cfg.masked_loss_only else None, loss_cfg))
        history.append(entry)
        params_finite = all(bool(torch.isfinite(p).all()) for _, p in named)
        if not params_finite:
            states = best[2] if best is not None else last_finite[1]
            ep = best[1] if best is not None else last_finite[0]
            ls = best[0] if best is not None else math.inf
            raise TrainingDivergence(make_checkpoint(states, ep, ls), history)
        last_finite = (epoch + 1, snapshot())
        if best is None or epoch_loss < best[0]:
            best = (epoch_loss, epoch + 1, last_finite[1])

    return make_checkpoint(best[2], best[1], best[0]), history


# ---------------------------------------------------------------------------
# Inference and evaluation


def full_pipeline_infer(img: Image, ckpt: Checkpoint) -> Image:
    """RANet to the working size, BSformer, RANet back to the input size;
    output clamped to [0, 65535] raw units. Runs in the checkpoint's dtype.

    The straight-through path (bicubic bases plus residual adds) stays in raw
    units; only the learned corrections see /65535-normalized copies, and
    their outputs are scaled back. The function computed is the same as a
    fully normalized pipeline, but an identity-initialized checkpoint (all
    corrections exactly zero) reproduces the plain bicubic down-up resize
    bit for bit, with no rounding from the normalization round trip.
    """
    if img.height < 3 or img.width < 3:
        raise ValidationError("inference needs an image of at least 3x3")
    dtype = _DTYPES[ckpt.dtype][0]
    working = ckpt.ranet.cfg.working_size

    def staged(t, size, params):
        base = resize_bicubic_t(t, size[0], size[1])
        return base + PIXEL_MAX * params.correction(base / PIXEL_MAX)

    x = torch.from_numpy(img.pixels).to(dtype).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        t = staged(x, working, ckpt.ranet)
        t = t + PIXEL_MAX * ckpt.bsformer.correction(t / PIXEL_MAX)
        t = staged(t, (img.height, img.width), ckpt.ranet_for_restore)
        out = t[0, 0].clamp(0.0, PIXEL_MAX)
    return Image(out.numpy().astype(np.float64))


def evaluate(method: str, items, checkpoint: Checkpoint | None = None,
             baseline_cfg: BaselineConfig = BaselineConfig()) -> MetricsReport:
    """Metrics for one method over (image_id, image, reference-or-None)
    items; ``identity`` scores the raw inputs."""
    if method not in EVAL_METHODS:
        raise ValidationError(f"unknown method {method!r}, expected one of {EVAL_METHODS}")
    if method == "bsonet" and checkpoint is None:
        raise ValidationError("bsonet evaluation requires a checkpoint")
    records = []
    for image_id, img, ref in items:
        if method == "identity":
            out = img
        elif method == "gaussian":
            out = gaussian_filter(img, baseline_cfg)
        elif method == "bilateral":
            out = bilateral_filter(img, baseline_cfg)
        elif method == "nlm":
            out = nlm_denoise(img, baseline_cfg)
        else:
            out = full_pipeline_infer(img, checkpoint)
        records.append(compute_record(image_id, out, ref))
    return MetricsReport(method=method, records=tuple(records))

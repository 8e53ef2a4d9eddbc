"""Command-line front end: one entry point for corpus generation, pair
preview, training, inference, evaluation, and the remote-inference pair
serve/send.

Option layering, lowest to highest: built-in default, --config JSON file,
environment (only where documented, e.g. BSONET_PORT), explicit flag. Every
command with an output directory echoes the values it actually used into
effective_config.json there, so a run can be reproduced from its artifacts.

Exit codes: 0 success, 2 bad arguments or invalid values, 3 file/image I/O
failure, 4 network or protocol failure, 5 training divergence (partial
artifacts are saved first).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BaselineConfig
from .bsformer import BSformerConfig, paper_config, toy_config
from .imagecore import (FileFormatError, Image, NoiseConfig, ValidationError,
                        apply_noise, generate_phantom, random_scene,
                        read_image, write_image)
from .metrics import save_reports, summary_table
from .n2v import N2VConfig, build_pair
from .ranet import RANetConfig
from .service import (ProtocolError, ServerError, InferenceServer,
                      client_optimize)
from .trainer import (EVAL_METHODS, TrainConfig, TrainingDivergence,
                      evaluate, full_pipeline_infer, load_checkpoint,
                      save_checkpoint, train)

_LOG = logging.getLogger("bsonet")

DEFAULT_PORT = 8553

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NETWORK = 4
EXIT_DIVERGED = 5


class Settings:
    """Resolves one option through the flag > env > config > default chain
    and remembers every resolved value for the effective-config echo."""

    def __init__(self, args: argparse.Namespace):
        self.args = vars(args)
        self.config = {}
        path = self.args.get("config")
        if path:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
            if not isinstance(loaded, dict):
                raise ValidationError("config file must hold a JSON object")
            self.config = loaded
        self.effective: dict = {}

    def get(self, name: str, default, env: str | None = None, cast=None):
        value = default
        if name in self.config:
            value = self.config[name]
        if env is not None and os.environ.get(env):
            value = os.environ[env]
        flag = self.args.get(name)
        if flag is not None:
            value = flag
        if cast is not None and value is not None:
            value = cast(value)
        self.effective[name] = value
        return value


def _write_effective(out_dir: Path, command: str, settings: Settings) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, **settings.effective}
    text = json.dumps(payload, indent=2, sort_keys=True, default=list)
    (out_dir / "effective_config.json").write_text(text + "\n", encoding="utf-8")


def _list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"image directory not found: {folder}")
    paths = sorted(p for p in folder.iterdir()
                   if p.suffix.lower() in (".bsr", ".png"))
    if not paths:
        raise FileFormatError(f"no .bsr or .png images in {folder}")
    return paths


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args: argparse.Namespace) -> int:
    st = Settings(args)
    seed = st.get("seed", 0, cast=int)
    count = st.get("count", 8, cast=int)
    size = st.get("size", 64, cast=int)
    sigma = st.get("sigma", 400.0, cast=float)
    impulse = st.get("impulse", 0.0, cast=float)
    poisson = st.get("poisson_scale", 0.0, cast=float)
    fmt = st.get("format", "bsr")
    if count < 1 or size < 8:
        raise ValidationError("gen-data needs count >= 1 and size >= 8")
    if fmt not in ("bsr", "png"):
        raise ValidationError(f"unknown image format {fmt!r}")
    out = Path(args.out)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        scene_seed = seed + i
        noise_seed = seed + 100_000 + i
        scene = random_scene(np.random.default_rng(scene_seed), size, size)
        clean = generate_phantom(scene)
        noise_cfg = NoiseConfig(gaussian_sigma=sigma, impulse_fraction=impulse,
                                poisson_scale=poisson, seed=noise_seed)
        name = f"img_{i:04d}.{fmt}"
        write_image(clean, out / "clean" / name)
        write_image(apply_noise(clean, noise_cfg), out / "noisy" / name)
        entries.append({"name": name, "scene_seed": scene_seed,
                        "noise_seed": noise_seed, "scene": scene.to_dict()})
    manifest = {"count": count, "size": size,
                "noise": {"gaussian_sigma": sigma, "impulse_fraction": impulse,
                          "poisson_scale": poisson},
                "images": entries}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_effective(out, "gen-data", st)
    _LOG.info("wrote %d clean/noisy pairs under %s", count, out)
    return 0


def cmd_make_pairs(args: argparse.Namespace) -> int:
    st = Settings(args)
    seed = st.get("seed", 0, cast=int)
    mask_fraction = st.get("mask_fraction", 0.10, cast=float)
    aug_sigma = st.get("aug_sigma", 400.0, cast=float)
    count = st.get("count", None, cast=int)
    cfg = N2VConfig(mask_fraction=mask_fraction, aug_gaussian_sigma=aug_sigma,
                    seed=seed)
    paths = _list_images(args.images)
    if count is not None:
        paths = paths[:count]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, path in enumerate(paths):
        pair = build_pair(read_image(path), cfg, pair_index=i)
        write_image(pair.input, out / f"pair_{i:04d}_input.bsr")
        write_image(pair.target, out / f"pair_{i:04d}_target.bsr")
        write_image(Image(pair.mask.astype(np.float64) * 65535.0),
                    out / f"pair_{i:04d}_mask.bsr")
        summary.append({"index": i, "source": path.name,
                        "masked": int(pair.mask.sum()),
                        "flipped_horizontal": pair.flipped_horizontal,
                        "flipped_vertical": pair.flipped_vertical})
    (out / "pairs.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_effective(out, "make-pairs", st)
    _LOG.info("previewed %d pairs under %s", len(summary), out)
    return 0


def _build_train_configs(st: Settings):
    # The toy numbers are the calibrated desk-scale recipe: augmentation
    # noise off (it doubles the input noise relative to what inference
    # sees), small batches for enough optimizer steps on tiny corpora, and
    # the published learning-rate span.
    preset = st.get("preset", "paper")
    if preset == "paper":
        bs_cfg = paper_config()
        channels, working, epochs, batch = 32, 256, 250, 4
        lr, lr_min, fraction, aug = 1e-4, 1e-6, 760 / 906, 400.0
    elif preset == "toy":
        bs_cfg = toy_config()
        channels, working, epochs, batch = 16, 64, 200, 2
        lr, lr_min, fraction, aug = 1e-4, 1e-6, 1.0, 0.0
    else:
        raise ValidationError(f"unknown preset {preset!r}")
    seed = st.get("seed", 0, cast=int)
    working = st.get("working_size", working, cast=int)
    ranet_cfg = RANetConfig(channels=st.get("ranet_channels", channels, cast=int),
                            working_size=(working, working),
                            init_seed=seed + 1)
    bs_cfg = BSformerConfig(**{**bs_cfg.__dict__, "init_seed": seed + 2})
    n2v_cfg = N2VConfig(mask_fraction=st.get("mask_fraction", 0.10, cast=float),
                        aug_gaussian_sigma=st.get("aug_sigma", aug, cast=float),
                        seed=seed)
    train_cfg = TrainConfig(
        epochs=st.get("epochs", epochs, cast=int),
        batch_size=st.get("batch_size", batch, cast=int),
        lr_initial=st.get("lr", lr, cast=float),
        lr_min=st.get("lr_min", lr_min, cast=float),
        weight_decay=st.get("weight_decay", 0.02, cast=float),
        seed=seed,
        train_fraction=st.get("train_fraction", fraction, cast=float),
        pipeline=st.get("pipeline", "full"),
        dtype=st.get("dtype", "float32"))
    return n2v_cfg, ranet_cfg, bs_cfg, train_cfg


def cmd_train(args: argparse.Namespace) -> int:
    st = Settings(args)
    n2v_cfg, ranet_cfg, bs_cfg, train_cfg = _build_train_configs(st)
    dataset = [read_image(p) for p in _list_images(args.images)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(out, "train", st)

    def _save(ckpt, history) -> None:
        save_checkpoint(ckpt, out / "checkpoint.bsck")
        (out / "history.json").write_text(
            json.dumps(history, indent=2) + "\n", encoding="utf-8")

    try:
        ckpt, history = train(dataset, n2v_cfg, ranet_cfg, bs_cfg, train_cfg)
    except TrainingDivergence as exc:
        if exc.checkpoint is not None:
            _save(exc.checkpoint, exc.history)
            _LOG.info("divergence artifacts saved under %s", out)
        raise
    _save(ckpt, history)
    _LOG.info("trained %d epochs, best epoch %d, checkpoint at %s",
              len(history), ckpt.epoch, out / "checkpoint.bsck")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    st = Settings(args)
    st.get("checkpoint", args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in _list_images(args.images):
        restored = full_pipeline_infer(read_image(path), ckpt)
        write_image(restored, out / f"{path.stem}_opt{path.suffix}")
    _write_effective(out, "infer", st)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    st = Settings(args)
    methods = st.get("methods", "identity,gaussian,bilateral,nlm").split(",")
    methods = [m.strip() for m in methods if m.strip()]
    checkpoint_path = st.get("checkpoint", None)
    ckpt = load_checkpoint(checkpoint_path) if checkpoint_path else None
    if ckpt is not None and "bsonet" not in methods:
        methods.append("bsonet")
    for m in methods:
        if m not in EVAL_METHODS:
            raise ValidationError(f"unknown method {m!r}, expected one of {EVAL_METHODS}")

    refs: dict[str, Path] = {}
    if args.reference:
        refs = {p.name: p for p in _list_images(args.reference)}
    items = []
    for path in _list_images(args.images):
        ref = read_image(refs[path.name]) if path.name in refs else None
        items.append((path.stem, read_image(path), ref))

    reports = [evaluate(m, items, checkpoint=ckpt, baseline_cfg=BaselineConfig())
               for m in methods]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_reports(reports, out / "metrics.jsonl")
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    _write_effective(out, "eval", st)
    print(table)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    st = Settings(args)
    host = st.get("host", "127.0.0.1")
    port = st.get("port", DEFAULT_PORT, env="BSONET_PORT", cast=int)
    workers = st.get("workers", 1, cast=int)
    storage = Path(st.get("storage_root", "served"))
    ckpt = load_checkpoint(args.checkpoint)
    server = InferenceServer(ckpt, (host, port), storage, workers=workers)
    _write_effective(storage, "serve", st)
    bound = server.address
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


def cmd_send(args: argparse.Namespace) -> int:
    st = Settings(args)
    host = st.get("host", "127.0.0.1")
    port = st.get("port", DEFAULT_PORT, env="BSONET_PORT", cast=int)
    timeout = st.get("timeout", 30.0, cast=float)
    seed = st.get("seed", 0, cast=int)
    img = read_image(args.image)
    optimized, round_trip, inference = client_optimize(
        img, (host, port), timeout=timeout, request_id=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(optimized, out)
    _write_effective(out.parent, "send", st)
    print(f"round_trip_micros={round_trip} inference_micros={inference}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="base RNG seed (default 0)")
    common.add_argument("--config", default=None,
                        help="JSON file with option defaults; flags win")
    common.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="bsonet",
        description="Backscatter image optimization: synthetic corpora, "
                    "self-supervised training, evaluation, remote inference.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic clean/noisy phantom corpus")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None,
                   help="Gaussian noise sigma in raw units (default 400)")
    p.add_argument("--impulse", type=float, default=None,
                   help="salt-and-pepper fraction (default 0)")
    p.add_argument("--poisson-scale", dest="poisson_scale", type=float, default=None)
    p.add_argument("--format", choices=("bsr", "png"), default=None)
    p.add_argument("--out", default="corpus")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("make-pairs", parents=[common],
                       help="write blind-spot training pairs for inspection")
    p.add_argument("--images", required=True, help="directory of raw images")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float, default=None)
    p.add_argument("--aug-sigma", dest="aug_sigma", type=float, default=None)
    p.add_argument("--out", default="pairs")
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train", parents=[common],
                       help="train the restoration pipeline on a directory of images")
    p.add_argument("--images", required=True)
    p.add_argument("--preset", choices=("paper", "toy"), default=None,
                   help="paper: full-size recipe (default); toy: desk-scale recipe")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-min", dest="lr_min", type=float, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    p.add_argument("--working-size", dest="working_size", type=int, default=None)
    p.add_argument("--ranet-channels", dest="ranet_channels", type=int, default=None)
    p.add_argument("--mask-fraction", dest="mask_fraction", type=float, default=None)
    p.add_argument("--aug-sigma", dest="aug_sigma", type=float, default=None)
    p.add_argument("--pipeline", choices=("full", "bsformer_only"), default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="apply a trained checkpoint to a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", default="restored")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="score methods against references and tabulate")
    p.add_argument("--images", required=True, help="directory of degraded images")
    p.add_argument("--reference", default=None,
                   help="directory of matching clean images (by filename)")
    p.add_argument("--checkpoint", default=None,
                   help="adds the trained pipeline to the method list")
    p.add_argument("--methods", default=None,
                   help="comma list from: identity,gaussian,bilateral,nlm,bsonet")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", parents=[common],
                       help="run the remote-inference server (blocks)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None,
                   help=f"TCP port (BSONET_PORT overrides config; default {DEFAULT_PORT})")
    p.add_argument("--workers", type=int, default=None,
                   help="concurrent inference slots (default 1)")
    p.add_argument("--storage-root", dest="storage_root", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", parents=[common],
                       help="send one image to a running server")
    p.add_argument("--image", required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None)
    p.add_argument("--out", default="optimized.bsr")
    p.set_defaults(func=cmd_send)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"bsonet: invalid arguments: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, ServerError, ConnectionError, TimeoutError) as exc:
        print(f"bsonet: network failure: {exc}", file=sys.stderr)
        return EXIT_NETWORK
    except (FileFormatError, OSError) as exc:
        print(f"bsonet: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingDivergence as exc:
        print(f"bsonet: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

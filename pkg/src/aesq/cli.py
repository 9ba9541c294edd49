"""Command-line entry point: ``aesq <command> [flags]``.

Exit codes are shared by every command: 0 on success, 1 for runtime and
data errors (missing or malformed files, shape mismatches, failed checks),
2 for usage and configuration errors. Every run writes a ``manifest.json``
that ``aesq rerun`` can execute again to reproduce it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .ablation import AXES, run_ablation
from .data import (
    Dataset,
    EncoderConfig,
    PseudoEncoder,
    SyntheticConfig,
    dos_to_mos,
    gen_synthetic,
    prepare_image,
    read_dataset,
    write_embeddings,
    write_images,
)
from .errors import AesqError, ConfigError, UndefinedCorrelationError
from .gradcheck import OP_CLASSES, run_gradcheck
from .metrics import emd_loss
from .qformer import EmbeddingMode, ModelConfig, init_model
from .tensor import corrupt_backward
from .training import (
    LOG_COLUMNS,
    PRESETS,
    Checkpoint,
    EpochLog,
    Trainer,
    TrainConfig,
    dataset_embeddings,
    evaluate,
    load_checkpoint,
    lr_at_epoch,
    predict,
    save_checkpoint,
)

log = logging.getLogger("aesq")

SEED_ENV = "AESQ_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(kind=int):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}")
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    g.add_argument("--m", type=_positive(), help="number of learnable queries")
    g.add_argument("--blocks", type=_positive(), help="querying-transformer blocks (even)")
    g.add_argument("--heads", type=_positive())
    g.add_argument("--hq", type=_positive(), help="query width")
    g.add_argument("--hv", type=_positive(), help="image-embedding width")
    g.add_argument("--mode", choices=[m.value for m in EmbeddingMode], default="LQ")
    g.add_argument("--epochs", type=_positive())
    g.add_argument("--batch", type=_positive())
    g.add_argument("--lr", type=_positive(float))
    g.add_argument("--hf", action="store_true", help="random horizontal flips")
    g.add_argument("--rc", action="store_true", help="resize then random crop")
    g.add_argument("--padding", action="store_true", help="pad to square before resizing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aesq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aesq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--test-n", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--embeddings", action="store_true",
                   help="also write pseudo-encoder embeddings (AQE1) next to the images")
    p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint and log")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lr-schedule", action="store_true",
                   help="print the per-epoch learning rate and exit")
    _add_model_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--padding", action="store_true", default=None)
    p.add_argument("--out")

    p = sub.add_parser("predict", help="print the predicted DOS and MOS for one input")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset file; pick the item with --index")
    src.add_argument("--input", help=".npy image (H, W, C) or embeddings (tokens, H_v)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("ablate", help="run one controlled ablation sweep")
    p.add_argument("--axis", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    _add_model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=_positive(), default=5)
    p.add_argument("--out")
    p.add_argument("--corrupt", choices=sorted(OP_CLASSES), help=argparse.SUPPRESS)

    p = sub.add_parser("rerun", help="re-execute the run recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write outputs here instead of the recorded location")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve_seed(args) -> None:
    env = os.environ.get(SEED_ENV)
    if env is not None and hasattr(args, "seed") and not getattr(args, "_seed_pinned", False):
        try:
            args.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


PATH_FLAGS = ("--data", "--eval-data", "--out", "--checkpoint", "--resume", "--input")


def _resolved_argv(argv: list[str], args) -> list[str]:
    # absolute paths, and the seed actually used, so reruns ignore cwd and environment
    out = list(argv)
    for i, a in enumerate(out[:-1]):
        if a in PATH_FLAGS:
            out[i + 1] = str(Path(out[i + 1]).resolve())
    if hasattr(args, "seed"):
        if "--seed" in out:
            out[out.index("--seed") + 1] = str(args.seed)
        else:
            out += ["--seed", str(args.seed)]
    return out


def _emit_manifest(args, argv, config: dict, seeds: dict, inputs: list, outputs: list) -> dict:
    manifest = {
        "command": args.command,
        "argv": _resolved_argv(argv, args),
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    if getattr(args, "out", None):
        Path(args.out, "manifest.json").write_text(text + "\n")
    else:
        print(f"manifest: {json.dumps(manifest, sort_keys=True)}", file=sys.stderr)
    return manifest


def _out_dir(args) -> Path | None:
    if not getattr(args, "out", None):
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv_line(values) -> str:
    return ",".join(_fmt(v) for v in values)


def _configs(args, data: Dataset) -> tuple[ModelConfig, EncoderConfig | None, TrainConfig]:
    model_cfg, enc_cfg, train_cfg = PRESETS[args.preset]
    encoder = None
    if data.images is not None:
        _, width, _, channels = data.images.shape
        enc_cfg = replace(enc_cfg, width=width, channels=channels,
                          hv=args.hv or enc_cfg.hv)
        if width % enc_cfg.patch:
            raise ConfigError(f"image width {width} is not divisible by the preset's patch "
                              f"size {enc_cfg.patch}")
        encoder = enc_cfg
        hv, n_patches = enc_cfg.hv, enc_cfg.n_patches
    else:
        if args.hf or args.rc:
            raise ConfigError("--hf/--rc need an image dataset (AQI1), not embeddings")
        _, tokens, hv = data.embeddings.shape
        if args.hv and args.hv != hv:
            raise ConfigError(f"--hv {args.hv} disagrees with the embedding file (H_v={hv})")
        n_patches = tokens - 1
    model_cfg = replace(
        model_cfg,
        m=args.m or model_cfg.m,
        num_blocks=args.blocks or model_cfg.num_blocks,
        num_heads=args.heads or model_cfg.num_heads,
        hq=args.hq or model_cfg.hq,
        hv=hv,
        n_patches=n_patches,
        k=data.k,
        seed=args.seed,
        mode=EmbeddingMode(args.mode),
    )
    train_cfg = replace(
        train_cfg,
        epochs=args.epochs or train_cfg.epochs,
        batch_size=args.batch or train_cfg.batch_size,
        base_lr=args.lr or train_cfg.base_lr,
        seed=args.seed,
        hf=args.hf or (train_cfg.hf and data.images is not None),
        rc=args.rc or (train_cfg.rc and data.images is not None),
        padding=args.padding or train_cfg.padding,
    )
    if train_cfg.rc and data.images is not None:
        width = data.images.shape[1]
        if train_cfg.rc_crop != width:
            # keep the preset's resize/crop ratio at this image size
            ratio = train_cfg.rc_resize / train_cfg.rc_crop
            train_cfg = replace(train_cfg, rc_crop=width, rc_resize=int(round(width * ratio)))
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, encoder, train_cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, argv) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    if args.test_n < 0:
        raise UsageError("--test-n must be >= 0")
    if args.k < 2 or args.width < 1 or args.channels < 1:
        raise UsageError("--k must be >= 2 and image dims positive")
    out = _out_dir(args)
    syn = SyntheticConfig(width=args.width, channels=args.channels, k=args.k)
    splits = [("train", args.n, args.seed)]
    if args.test_n:
        splits.append(("test", args.test_n, args.seed + 1))
    enc = None
    if args.embeddings:
        enc_cfg = replace(PRESETS[args.preset][1], width=args.width, channels=args.channels)
        enc = PseudoEncoder(enc_cfg)
    outputs = []
    for split, n, seed in splits:
        ds = gen_synthetic(n, syn, seed=seed, split=split)
        path = out / f"{split}.aqi"
        write_images(path, ds.images, ds.dos)
        outputs.append(path)
        if enc is not None:
            epath = out / f"{split}.aqe"
            write_embeddings(epath, enc.encode(ds.images), ds.dos)
            outputs.append(epath)
        print(f"wrote {path} ({n} samples, K={args.k})")
    config = {"synthetic": asdict(syn),
              "encoder": asdict(enc.config) if enc is not None else None}
    _emit_manifest(args, argv, config, {"train": args.seed, "test": args.seed + 1},
                   [], outputs)
    return 0


def cmd_train(args, argv) -> int:
    if args.lr_schedule:
        _, _, cfg = PRESETS[args.preset]
        cfg = replace(cfg, epochs=args.epochs or cfg.epochs, base_lr=args.lr or cfg.base_lr)
        print("epoch,lr")
        for e in range(cfg.epochs):
            print(_csv_line([e, lr_at_epoch(cfg, e)]))
        return 0
    if not args.data:
        raise UsageError("train needs --data (or --lr-schedule)")
    train_set = read_dataset(args.data, "train")
    eval_set = read_dataset(args.eval_data, "test") if args.eval_data else None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        epochs = args.epochs or ckpt.train_config.epochs
        trainer = Trainer.resume(ckpt, train_set, eval_set, replace(ckpt.train_config,
                                                                     epochs=epochs))
    else:
        model_cfg, enc_cfg, train_cfg = _configs(args, train_set)
        encoder = PseudoEncoder(enc_cfg) if enc_cfg else None
        trainer = Trainer(init_model(model_cfg), train_set, train_cfg, eval_set, encoder)
    out = _out_dir(args)
    rows: list[EpochLog] = []

    print(",".join(LOG_COLUMNS))

    def on_epoch(row: EpochLog) -> None:
        rows.append(row)
        print(_csv_line(row.as_row()), flush=True)

    trainer.run(on_epoch)
    ckpt = trainer.checkpoint()
    outputs = []
    if out is not None:
        save_checkpoint(out / "model.aqck", ckpt)
        with open(out / "log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            w.writerows([[_fmt(v) for v in r.as_row()] for r in rows])
        outputs = [out / "model.aqck", out / "log.csv"]
    scored = [r for r in trainer.log if not math.isnan(r.srcc)]
    if scored:
        best = max(scored, key=lambda r: r.srcc)
        final = trainer.log[-1]
        print(f"final: srcc={final.srcc:.4f} plcc={final.plcc:.4f} "
              f"(best epoch {best.epoch}: srcc={best.srcc:.4f})", file=sys.stderr)
    config = {"model": trainer.model.config.to_dict(), "train": trainer.cfg.to_dict(),
              "encoder": asdict(trainer.encoder.config) if trainer.encoder else None}
    _emit_manifest(args, argv, config, {"model": trainer.model.config.seed,
                                        "train": trainer.cfg.seed},
                   [args.data, args.eval_data, args.resume], outputs)
    return 0


def _padding(args, ckpt: Checkpoint) -> bool:
    if args.padding is not None:
        return bool(args.padding)
    return bool(ckpt.train_config.padding) if ckpt.train_config else False


def cmd_eval(args, argv) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = read_dataset(args.data, "test")
    model = ckpt.build_model()
    encoder = PseudoEncoder(ckpt.encoder_config) if ckpt.encoder_config else None
    if data.images is not None and encoder is None:
        raise ConfigError("checkpoint has no encoder config; evaluate it on embeddings (AQE1)")
    try:
        res = evaluate(model, data, encoder, _padding(args, ckpt))
        values = [res.srcc, res.plcc, res.emd]
    except UndefinedCorrelationError:
        log.warning("predictions are constant; correlations are undefined")
        pred = predict(model, dataset_embeddings(data, encoder, _padding(args, ckpt)))
        values = [math.nan, math.nan, float(np.mean(emd_loss(data.dos, pred)))]
    print(f"SRCC {values[0]:.4f}  PLCC {values[1]:.4f}  mean EMD {values[2]:.5f}  (n={len(data)})")
    print("srcc,plcc,emd")
    print(_csv_line(values))
    out = _out_dir(args)
    outputs = []
    if out is not None:
        (out / "eval.csv").write_text("srcc,plcc,emd\n" + _csv_line(values) + "\n")
        outputs = [out / "eval.csv"]
    _emit_manifest(args, argv, {"model": ckpt.model_config.to_dict()}, {},
                   [args.checkpoint, args.data], outputs)
    return 0


def _single_input(args, ckpt: Checkpoint) -> np.ndarray:
    if args.data:
        data = read_dataset(args.data, "test")
        if not 0 <= args.index < len(data):
            raise ConfigError(f"--index {args.index} out of range for {len(data)} items")
        if data.embeddings is not None:
            return data.embeddings[args.index]
        x = data.images[args.index]
    else:
        try:
            x = np.load(args.input, allow_pickle=False)
        except ValueError as exc:
            raise AesqError(f"cannot read {args.input}: {exc}") from exc
        if x.ndim == 2:
            return np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise AesqError(f"input must be (H, W, C) or (tokens, H_v), got shape {x.shape}")
    if ckpt.encoder_config is None:
        raise ConfigError("checkpoint has no encoder config, so it cannot take raw images")
    enc = PseudoEncoder(ckpt.encoder_config)
    return enc.encode(prepare_image(x, enc.config.width, _padding(args, ckpt)))


def cmd_predict(args, argv) -> int:
    args.padding = None
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    e_v = _single_input(args, ckpt)
    expected = (1 + model.config.n_patches, model.config.hv)
    if e_v.shape != expected:
        raise AesqError(f"input embeddings have shape {e_v.shape}, model expects {expected}")
    dos = predict(model, e_v[None])[0]
    mos = float(dos_to_mos(dos))
    print("bin,probability")
    for i, p in enumerate(dos, start=1):
        print(_csv_line([i, float(p)]))
    print(_csv_line(["mos", mos]))
    out = _out_dir(args)
    outputs = []
    if out is not None:
        (out / "prediction.json").write_text(json.dumps({"dos": dos.tolist(), "mos": mos}) + "\n")
        outputs = [out / "prediction.json"]
    _emit_manifest(args, argv, {"model": ckpt.model_config.to_dict()}, {},
                   [args.checkpoint, args.data or args.input], outputs)
    return 0


def cmd_ablate(args, argv) -> int:
    if args.axis not in AXES:
        raise UsageError(f"unknown --axis {args.axis!r}; choose from {', '.join(AXES)}")
    train_set = read_dataset(args.data, "train")
    test_set = read_dataset(args.eval_data, "test")
    model_cfg, enc_cfg, train_cfg = _configs(args, train_set)
    table = run_ablation(args.axis, train_set, test_set, model_cfg, train_cfg, enc_cfg)
    print(table.to_text())
    print()
    print(table.to_csv(), end="")
    out = _out_dir(args)
    outputs = []
    if out is not None:
        path = out / f"ablation_{args.axis}.csv"
        path.write_text(table.to_csv())
        outputs = [path]
    config = {"axis": args.axis, "model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
              "encoder": asdict(enc_cfg) if enc_cfg else None}
    _emit_manifest(args, argv, config, {"model": args.seed, "train": args.seed},
                   [args.data, args.eval_data], outputs)
    return 0


def cmd_gradcheck(args, argv) -> int:
    if args.corrupt:
        with corrupt_backward(OP_CLASSES[args.corrupt]):
            results = run_gradcheck(args.seed, args.instances)
    else:
        results = run_gradcheck(args.seed, args.instances)
    print(f"{'check':<18} {'instances':>9} {'max_rel_error':>14}  result")
    for r in results:
        print(f"{r.name:<18} {r.instances:>9} {r.max_rel_error:>14.3e}  "
              f"{'pass' if r.passed else 'FAIL'}")
    failed = [r for r in results if not r.passed]
    out = _out_dir(args)
    outputs = []
    if out is not None:
        lines = ["check,instances,max_rel_error,passed"]
        lines += [_csv_line([r.name, r.instances, r.max_rel_error, r.passed]) for r in results]
        (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
        outputs = [out / "gradcheck.csv"]
    _emit_manifest(args, argv, {"instances": args.instances, "corrupt": args.corrupt},
                   {"gradcheck": args.seed}, [], outputs)
    for r in failed:
        print(f"gradcheck failed: {r.name} max relative error {r.max_rel_error:.3e}",
              file=sys.stderr)
    return 1 if failed else 0


def cmd_rerun(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        recorded = list(manifest["argv"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise AesqError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if recorded and recorded[0] == "rerun":
        raise ConfigError("a rerun manifest cannot point at another rerun")
    if args.out:
        if "--out" in recorded:
            recorded[recorded.index("--out") + 1] = args.out
        else:
            recorded += ["--out", args.out]
    return main(recorded, _pinned=True)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "rerun": cmd_rerun,
}


def main(argv: list[str] | None = None, _pinned: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args._seed_pinned = _pinned
    try:
        _resolve_seed(args)
        return COMMANDS[args.command](args, [a for a in argv if a not in ("-v", "--verbose")])
    except UsageError as exc:
        print(f"aesq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"aesq {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (AesqError, OSError) as exc:
        print(f"aesq {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

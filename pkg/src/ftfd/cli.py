"""Command-line interface: ``ftfd {manifest,synth,train,eval,infer,attn}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .audio import AudioError, clip_spectrogram, read_wav
from .checkpoint import CheckpointError
from .dataset import (
    DEFAULT_RATIOS,
    DataError,
    Manifest,
    _read_png,
    build_manifest,
    stack_frames,
    synth_generate,
    write_dataset,
)
from .model import VARIANTS, ConfigError, FTFDModel, ModelConfig, predict, write_pgm
from .tensor import ShapeError
from .training import NumericError, TrainConfig, evaluate, fit

log = logging.getLogger("ftfd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def git_blob_hash(path: Path) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    raw = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class RunRecord:
    variant: str
    model_config: dict
    train_config: dict
    manifest: str
    checkpoint: str
    checkpoint_hash: str
    best_epoch: int
    history: list
    test: dict
    wall_clock_s: float
    version: str = __version__

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def load_configs(path, variant: str, T: int) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"preset": "desk"|"full", "model": {...}, "train": {...}}``.

    Every section is optional; the desk preset is the default because the
    full-width network is impractically slow on a CPU.
    """
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})")
        unknown = set(doc) - {"preset", "model", "train"}
        if unknown:
            raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    preset = doc.get("preset", "desk")
    overrides = dict(doc.get("model", {}))
    for key in ("branches", "attention", "T"):
        if key in overrides:
            raise UsageError(f"model.{key} is set by --variant/--t, not the config file")
    try:
        if preset == "desk":
            model_cfg = ModelConfig.desk(variant, T=T, **overrides)
        elif preset == "full":
            model_cfg = ModelConfig.for_variant(variant, T=T, **overrides)
        else:
            raise UsageError(f"unknown preset {preset!r}; use 'desk' or 'full'")
        train_doc = doc.get("train", {})
        TrainConfig.from_dict(train_doc)  # rejects unknown keys
        train_cfg = TrainConfig.desk(**train_doc) if preset == "desk" else TrainConfig.from_dict(train_doc)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}")
    return model_cfg, train_cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_manifest(args) -> int:
    manifest = build_manifest(args.root, DEFAULT_RATIOS, args.seed, by_generator=args.by_generator)
    out = Path(args.out) if args.out else Path(args.root) / "manifest.json"
    manifest.save(out)
    for vdir, reasons in manifest.rejected:
        print(f"rejected\t{vdir}\t{'; '.join(reasons)}")
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {out}: {len(manifest.entries)} entries ({counts['train']}/{counts['val']}/{counts['test']}), "
          f"{len(manifest.rejected)} rejected")
    return EXIT_OK


def cmd_synth(args) -> int:
    entries = synth_generate(args.count, seed=args.seed)
    manifest = write_dataset(entries, args.out, seed=args.seed)
    n_fake = sum(e.label for e in manifest.entries)
    print(f"wrote {len(manifest.entries)} entries ({len(manifest.entries) - n_fake} real, {n_fake} fake) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_configs(args.config, args.variant, args.t)
    manifest = Manifest.load(args.manifest)
    train, val, test = (manifest.split(s) for s in ("train", "val", "test"))
    if not train or not val:
        raise DataError(f"{args.manifest}: train and val splits must be non-empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ftfd"
    t0 = time.perf_counter()
    model = FTFDModel.init(model_cfg, seed=train_cfg.seed)
    result = fit(model, train, val, train_cfg, metrics_log=out / "metrics.tsv", checkpoint=ckpt)
    report = evaluate(model, test, "random", seed=train_cfg.seed) if test else None
    record = RunRecord(
        variant=args.variant, model_config=model_cfg.to_dict(), train_config=asdict(train_cfg),
        manifest=str(Path(args.manifest).resolve()), checkpoint=str(ckpt), checkpoint_hash=git_blob_hash(ckpt),
        best_epoch=result.best_epoch, history=result.history,
        test=asdict(report) if report else {}, wall_clock_s=time.perf_counter() - t0,
    )
    record.save(out / "run.json")
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val accuracy {best['val_acc']:.4f} bce {best['val_loss']:.4f}")
    if report:
        print(f"test accuracy {report.accuracy:.4f} bce {report.bce:.4f}")
    print(f"checkpoint {ckpt} ({record.checkpoint_hash[:12]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = FTFDModel.load(args.checkpoint)
    manifest = Manifest.load(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise DataError(f"{args.manifest}: split {args.split!r} is empty")
    report = evaluate(model, entries, args.scheme, n=args.n, seed=args.seed)
    for line in report.lines():
        print(line)
    return EXIT_OK


def _clip_from_files(frames_dir, audio_path, start: int, cfg: ModelConfig):
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise DataError(f"frames directory not found: {frames_dir}")
    paths = sorted(frames_dir.glob("*.png"))
    if len(paths) < start + cfg.T:
        raise DataError(f"{frames_dir}: needs {start + cfg.T} frames (start {start}, T={cfg.T}), has {len(paths)}")
    frames = np.stack([_read_png(p) for p in paths[start:start + cfg.T]])
    samples, _ = read_wav(audio_path)
    try:
        spec = clip_spectrogram(samples, start, cfg.T, cfg.crop, cfg.audio_steps)
    except AudioError as exc:
        raise DataError(f"{audio_path}: {exc}") from exc
    visual = stack_frames(frames, cfg.crop)[None]
    return visual, spec.mels[None], spec.resized[None]


def cmd_infer(args) -> int:
    model = FTFDModel.load(args.checkpoint)
    visual, mels, resized = _clip_from_files(args.frames, args.audio, args.start, model.config)
    logit = model.forward(visual, mels, resized, train=False).logit
    p = float(predict(logit).ravel()[0])
    print(f"{'FAKE' if p >= 0.5 else 'REAL'} p={p:.6f}")
    return EXIT_OK


def cmd_attn(args) -> int:
    model = FTFDModel.load(args.checkpoint)
    if model.config.attention == "none":
        raise UsageError(f"checkpoint variant {model.config.variant!r} has no attention module")
    clip = Path(args.clip)
    visual, mels, resized = _clip_from_files(clip / "frames", clip / "audio.wav", args.start, model.config)
    maps = model.forward(visual, mels, resized, train=False).attention_maps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, m in enumerate(maps, start=1):
        path = out / f"stage{s}.pgm"
        write_pgm(path, m.data[0, 0])
        print(f"{path}\t{m.shape[2]}x{m.shape[3]}\tmean={m.data.mean():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ftfd", description="Fake talking-face detection on a numpy autodiff engine.")
    parser.add_argument("--version", action="version", version=f"ftfd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="scan a dataset tree and write manifest.json")
    p.add_argument("--root", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--by-generator", action="store_true", help="stratify splits by label and generator")
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("synth", help="generate a synthetic audio-visual mismatch dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with optional preset/model/train sections")
    p.add_argument("--variant", required=True, choices=list(VARIANTS))
    p.add_argument("--t", type=int, default=3, choices=[1, 3, 5])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scheme", choices=["random", "definite"], default="random")
    p.add_argument("--n", type=int, default=10, help="start frame for the definite scheme")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=0, help="seed of the random scheme")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one clip as REAL or FAKE")
    p.add_argument("--frames", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--start", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("attn", help="export the five stage attention maps of one clip as PGM")
    p.add_argument("--clip", required=True, help="video directory holding frames/ and audio.wav")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--start", type=int, default=0)
    p.set_defaults(func=cmd_attn)
    return parser


def _thread_limit():
    raw = os.environ.get("FTFD_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"FTFD_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"ftfd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"ftfd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AudioError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"ftfd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``fragmentvc {extract,train,convert,inspect}``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error (bad
flags, missing input files, invalid configuration). Failures print one
diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .audio import (
    FeatureFormatError,
    MelSpectrogram,
    UnsupportedAudioError,
    griffin_lim,
    load_wav,
    log_mel,
    pseudo_upstream,
    read_features,
    save_wav,
    write_features,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_config
from .fileio import atomic_write
from .model import FragmentVC
from .training import (
    AdamWState,
    Trainer,
    compute_norm_stats,
    denormalize_mel,
    load_corpus,
    normalize_mel,
)

logger = logging.getLogger("fragmentvc")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    doc = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        doc.setdefault(section, {})[name] = value
    return from_dict(doc)


def _run_config(args, base: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and base is not None and (base / "config.json").exists():
        path = base / "config.json"
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    cfg = load_config(path) if path is not None else RunConfig()
    return _apply_overrides(cfg, args.set or [])


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _speaker_of(wav: Path, root: Path) -> str:
    rel = wav.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    return wav.stem.split("_", 1)[0]


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg = _run_config(args)
    wav_dir = _require(args.wav_dir or cfg.paths.get("wav_dir"), "--wav-dir")
    out_dir = Path(args.out_dir or cfg.paths.get("out_dir") or "")
    if not str(out_dir):
        raise UsageError("missing --out-dir")
    wavs = sorted(wav_dir.rglob("*.wav"))
    if not wavs:
        raise UsageError(f"no .wav files under {wav_dir}")
    # analyse everything before writing so a bad file leaves no partial output
    items = []
    for wav in wavs:
        try:
            mel = log_mel(load_wav(wav), cfg.audio)
        except (UnsupportedAudioError, ValueError) as exc:
            raise UnsupportedAudioError(f"{wav}: {exc}") from exc
        feats = pseudo_upstream(mel, cfg.audio)
        items.append((_speaker_of(wav, wav_dir), wav, mel.frames, feats.frames))
    out_dir.mkdir(parents=True, exist_ok=True)
    speakers: dict[str, list[dict[str, str]]] = {}
    for spk, wav, mel, feats in items:
        (out_dir / spk).mkdir(exist_ok=True)
        mel_rel, feat_rel = f"{spk}/{wav.stem}.mel.fvcf", f"{spk}/{wav.stem}.feat.fvcf"
        write_features(out_dir / mel_rel, mel.astype(np.float32))
        write_features(out_dir / feat_rel, feats.astype(np.float32))
        speakers.setdefault(spk, []).append({"features": feat_rel, "mel": mel_rel})
    mean, std = compute_norm_stats([mel for _, _, mel, _ in items])
    write_features(out_dir / "norm_stats.fvcf", np.stack([mean, std]))
    manifest = json.dumps({"speakers": speakers}, indent=2, sort_keys=True) + "\n"
    atomic_write(out_dir / "manifest.json", manifest.encode("utf-8"))
    print(f"extracted {len(items)} utterances from {len(speakers)} speakers into {out_dir}")
    return 0


def _read_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    return [ln for ln in lines if ln.strip() and int(ln.split("\t", 1)[0]) <= upto]


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = _require(args.manifest or cfg.paths.get("manifest"), "manifest")
    out = args.out or cfg.paths.get("out")
    if not out:
        raise UsageError("missing --out")
    out = Path(out)
    ckpt = load_checkpoint(_require(args.resume, "--resume checkpoint")) if args.resume else None
    norm = (ckpt.norm_mean, ckpt.norm_std) if ckpt else None
    corpus = load_corpus(manifest, cfg.audio, norm_stats=norm)
    model = FragmentVC(cfg.model, seed=cfg.train.seed)
    state, step = AdamWState.zeros_like(model.params), 0
    if ckpt is not None:
        state, step = ckpt.restore(model.params), ckpt.step
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", cfg.to_json().encode("utf-8"))
    log_path = out / "loss.tsv"
    log_lines = _read_log(log_path, step) if ckpt is not None else []

    def on_step(s: int, loss: float, lr: float) -> None:
        log_lines.append(f"{s}\t{loss!r}\t{lr!r}\n")

    def on_checkpoint(trainer: Trainer) -> None:
        path = out / f"ckpt_{trainer.step:07d}.fvck"
        save_checkpoint(path, model.params, trainer.state, trainer.step,
                        (corpus.norm_mean, corpus.norm_std))
        atomic_write(log_path, "".join(log_lines).encode("utf-8"))
        logger.info("step %d: wrote %s", trainer.step, path)

    trainer = Trainer(model, corpus, cfg.train, state, step)
    trainer.run(on_step=on_step, on_checkpoint=on_checkpoint)
    atomic_write(log_path, "".join(log_lines).encode("utf-8"))
    print(f"trained to step {trainer.step}; checkpoints in {out}")
    return 0


def _load_input(path: Path, kind: str, cfg: RunConfig) -> np.ndarray:
    """Source features (``kind='features'``) or raw log-mel (``kind='mel'``)."""
    if path.suffix.lower() == ".wav":
        mel = log_mel(load_wav(path), cfg.audio)
        return pseudo_upstream(mel, cfg.audio).frames if kind == "features" else mel.frames
    arr = read_features(path)
    want = cfg.model.upstream_dim if kind == "features" else cfg.model.n_mel
    if arr.shape[1] == want:
        return arr
    if kind == "features" and arr.shape[1] == cfg.model.n_mel:
        return pseudo_upstream(MelSpectrogram(arr), cfg.audio).frames
    raise FeatureFormatError(f"{path}: dimension {arr.shape[1]} does not match {kind} size {want}")


def cmd_convert(args) -> int:
    ckpt_path = _require(args.ckpt, "checkpoint")
    cfg = _run_config(args, base=ckpt_path.parent)
    source = _require(args.source, "source")
    targets = [_require(t, "target") for t in args.target]
    ckpt = load_checkpoint(ckpt_path)
    model = FragmentVC(cfg.model, seed=cfg.train.seed)
    ckpt.restore(model.params)
    src = _load_input(source, "features", cfg)
    tgts = [normalize_mel(_load_input(t, "mel", cfg), ckpt.norm_mean, ckpt.norm_std) for t in targets]
    mel_norm, attention = model.convert(src.astype(np.float32), tgts)
    mel = denormalize_mel(mel_norm, ckpt.norm_mean, ckpt.norm_std)
    write_features(args.out_mel, mel)
    if args.out_wav:
        save_wav(args.out_wav, griffin_lim(mel, cfg=cfg.audio, seed=cfg.train.seed))
    if args.dump_attention:
        dump = Path(args.dump_attention)
        dump.mkdir(parents=True, exist_ok=True)
        for i, w in enumerate(attention, start=1):
            combined = analysis.combine_heads_rms(w)
            analysis.export_map(combined, dump / f"extractor{i}.csv")
            analysis.export_map(combined, dump / f"extractor{i}.pgm")
    print(f"wrote {args.out_mel} ({mel.shape[0]} frames)")
    return 0


def cmd_inspect(args) -> int:
    m = analysis.read_csv_map(_require(args.attention, "attention map"))
    if args.metric == "diagonality":
        print(f"{analysis.diagonality(m):.6f}")
    else:
        for i0, j0, length in analysis.fragment_runs(analysis.argmax_path(m)):
            print(f"{i0}\t{j0}\t{length}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fragmentvc", description="Any-to-any voice conversion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one configuration field (repeatable)")
        return p

    p = with_config(sub.add_parser("extract", help="compute mel and upstream features for a WAV tree"))
    p.add_argument("--wav-dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("train", help="run two-stage training"))
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--resume", help="FVCK checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("convert", help="convert a source utterance to a target voice"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="WAV or FVCF (features or mel)")
    p.add_argument("--target", required=True, nargs="+", help="WAV or mel FVCF files")
    p.add_argument("--out-mel", required=True)
    p.add_argument("--out-wav")
    p.add_argument("--dump-attention", metavar="DIR")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("inspect", help="score an exported attention map")
    p.add_argument("--attention", required=True, help="CSV map")
    p.add_argument("--metric", choices=("diagonality", "argmax-runs"), default="diagonality")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fragmentvc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (UnsupportedAudioError, FeatureFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"fragmentvc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

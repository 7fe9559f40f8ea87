"""Two-stage training: schedules, batch sampling, AdamW and the step loop.

Stage 1 reconstructs an utterance from itself. Stage 2 reconstructs it from
other utterances of the same speaker; the chance that the source utterance
is still among the targets falls linearly to zero, and the encoders and
extractors train at a reduced learning rate.

Every random draw at step ``s`` comes from a generator seeded with
``(seed, s)``, so a run resumed from a checkpoint replays exactly the same
batches as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .audio import AudioConfig, load_wav, log_mel, pseudo_upstream, read_features
from .autograd import ParameterStore
from .model import FragmentVC

logger = logging.getLogger(__name__)

REDUCED_GROUPS = frozenset({"source_encoder", "target_encoder", "extractors"})


@dataclass
class TrainConfig:
    """Optimisation and schedule settings. Defaults are the full-scale values."""

    total_steps: int = 250_000
    stage1_steps: int = 50_000
    decay_end_step: int = 150_000
    batch_size: int = 16
    peak_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 500
    n_target_utts: int = 10
    lr_reduction_factor: float = 100.0
    seed: int = 0
    max_frames: int = 256
    loss_taps: str = "both"  # "both": mel_pre + mel_post, "post": mel_post only
    checkpoint_interval: int = 10_000

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(total_steps=2000, stage1_steps=1000, decay_end_step=1600, batch_size=2,
                    peak_lr=1e-3, warmup_steps=100, n_target_utts=3, checkpoint_interval=500)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if not 0 <= self.warmup_steps < self.stage1_steps < self.decay_end_step <= self.total_steps:
            raise ValueError("need warmup_steps < stage1_steps < decay_end_step <= total_steps")
        if self.lr_reduction_factor < 1:
            raise ValueError("lr_reduction_factor must be >= 1")
        if self.batch_size < 1 or self.n_target_utts < 1 or self.max_frames < 1:
            raise ValueError("batch_size, n_target_utts and max_frames must be positive")
        if self.loss_taps not in ("both", "post"):
            raise ValueError("loss_taps must be 'both' or 'post'")


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def inclusion_probability(step: int, cfg: TrainConfig) -> float:
    """Probability that the source utterance is among the stage-2 targets."""
    if step <= cfg.stage1_steps:
        return 1.0
    if step >= cfg.decay_end_step:
        return 0.0
    return (cfg.decay_end_step - step) / (cfg.decay_end_step - cfg.stage1_steps)


def base_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine annealing to zero at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = min(step - cfg.warmup_steps, span) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(step: int, group: str, cfg: TrainConfig) -> float:
    lr = base_lr(step, cfg)
    if step > cfg.stage1_steps and group in REDUCED_GROUPS:
        return lr / cfg.lr_reduction_factor
    return lr


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class Utterance:
    name: str
    features: np.ndarray  # T x D
    mel: np.ndarray  # T x M, normalised

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class Corpus:
    speakers: dict[str, list[Utterance]]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)


def compute_norm_stats(mels: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean and standard deviation over every frame of every utterance."""
    stacked = np.concatenate([np.asarray(m, dtype=np.float64) for m in mels], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_mel(mel: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((np.asarray(mel, dtype=np.float32) - mean) / std).astype(np.float32)


def denormalize_mel(mel: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return np.asarray(mel, dtype=np.float32) * std + mean


def read_manifest(path) -> dict[str, list[dict[str, str]]]:
    """Load a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or set(doc) != {"speakers"} or not isinstance(doc["speakers"], dict):
        raise ValueError(f"{path}: manifest must be an object with a single 'speakers' key")
    out: dict[str, list[dict[str, str]]] = {}
    for spk, records in doc["speakers"].items():
        if not isinstance(records, list) or not records:
            raise ValueError(f"{path}: speaker {spk!r} needs a non-empty utterance list")
        resolved = []
        for rec in records:
            if not isinstance(rec, dict) or not set(rec) <= {"wav", "features", "mel"}:
                raise ValueError(f"{path}: bad utterance record for speaker {spk!r}: {rec!r}")
            if "wav" not in rec and not {"features", "mel"} <= set(rec):
                raise ValueError(f"{path}: record needs 'wav' or both 'features' and 'mel': {rec!r}")
            resolved.append({k: str((path.parent / v)) for k, v in rec.items()})
        out[str(spk)] = resolved
    return out


def load_corpus(manifest_path, audio: AudioConfig | None = None,
                norm_stats: tuple[np.ndarray, np.ndarray] | None = None) -> Corpus:
    """Load every utterance of a manifest into memory.

    Records with only a ``wav`` entry are analysed on the fly. Normalisation
    statistics come from ``norm_stats`` when given, otherwise from
    ``norm_stats.fvcf`` beside the manifest, otherwise from the corpus itself.
    """
    audio = audio or AudioConfig()
    manifest_path = Path(manifest_path)
    records = read_manifest(manifest_path)
    raw: dict[str, list[tuple[str, np.ndarray, np.ndarray]]] = {}
    for spk in sorted(records):
        items = []
        for rec in records[spk]:
            if "mel" in rec:
                mel = read_features(rec["mel"])
            else:
                mel = log_mel(load_wav(rec["wav"]), audio).frames.astype(np.float32)
            if "features" in rec:
                feats = read_features(rec["features"])
            else:
                feats = pseudo_upstream(log_mel(load_wav(rec["wav"]), audio), audio).frames
            if feats.shape[0] != mel.shape[0]:
                raise ValueError(f"{rec}: feature and mel frame counts differ "
                                 f"({feats.shape[0]} vs {mel.shape[0]})")
            name = Path(rec.get("mel") or rec["wav"]).stem
            items.append((name, feats, mel))
        raw[spk] = items
    if norm_stats is None:
        stats_path = manifest_path.parent / "norm_stats.fvcf"
        if stats_path.exists():
            st = read_features(stats_path)
            norm_stats = (st[0], st[1])
        else:
            norm_stats = compute_norm_stats([m for items in raw.values() for _, _, m in items])
    mean, std = (np.asarray(a, dtype=np.float32) for a in norm_stats)
    speakers = {spk: [Utterance(n, f, normalize_mel(m, mean, std)) for n, f, m in items]
                for spk, items in raw.items()}
    return Corpus(speakers, mean, std)


@dataclass
class Sample:
    src: np.ndarray  # T x D
    tgt_mels: list[np.ndarray]
    gt: np.ndarray  # T x M
    source_included: bool = True


def _crop(n: int, max_frames: int, rng: np.random.Generator) -> slice:
    if n <= max_frames:
        return slice(0, n)
    start = int(rng.integers(0, n - max_frames + 1))
    return slice(start, start + max_frames)


def _sample_targets(utts: list[Utterance], src_idx: int, n: int, include: bool,
                    rng: np.random.Generator) -> list[int]:
    others = [i for i in range(len(utts)) if i != src_idx]
    if not others:
        logger.warning("speaker has a single utterance; using it as its own target")
        return [src_idx] * n
    if len(others) >= n:
        chosen = [others[i] for i in rng.choice(len(others), size=n, replace=False)]
    else:
        logger.warning("speaker has %d other utterances (< %d targets); sampling with replacement",
                       len(others), n)
        chosen = [others[i] for i in rng.integers(0, len(others), size=n)]
    if include:
        chosen[int(rng.integers(0, n))] = src_idx
    return chosen


def make_batch(corpus: Corpus, step: int, cfg: TrainConfig,
               rng: np.random.Generator | None = None) -> list[Sample]:
    """Draw ``batch_size`` independent samples for ``step``."""
    rng = rng if rng is not None else step_rng(cfg.seed, step)
    ids = corpus.speaker_ids()
    p = inclusion_probability(step, cfg)
    batch = []
    for _ in range(cfg.batch_size):
        utts = corpus.speakers[ids[int(rng.integers(0, len(ids)))]]
        src_idx = int(rng.integers(0, len(utts)))
        u = utts[src_idx]
        window = _crop(u.n_frames, cfg.max_frames, rng)
        src, gt = u.features[window], u.mel[window]
        if step <= cfg.stage1_steps:
            batch.append(Sample(src, [gt], gt, True))
            continue
        include = bool(rng.random() < p)
        tgt_idx = _sample_targets(utts, src_idx, cfg.n_target_utts, include, rng)
        tgts = []
        for i in tgt_idx:
            m = utts[i].mel
            tgts.append(gt if i == src_idx else m[_crop(m.shape[0], cfg.max_frames, rng)])
        batch.append(Sample(src, tgts, gt, src_idx in tgt_idx))
    return batch


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, store: ParameterStore) -> "AdamWState":
        return cls({n: np.zeros_like(t.data) for n, t in store.items()},
                   {n: np.zeros_like(t.data) for n, t in store.items()})


def adamw_step(store: ParameterStore, state: AdamWState, step: int,
               lr_fn: Callable[[int, str], float], cfg: TrainConfig) -> None:
    """One AdamW update with decoupled weight decay; ``step`` counts from 1.

    Parameters without a gradient still decay.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, t in store.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        lr = lr_fn(step, store.group(name))
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * t.data
        t.data -= lr * update


def sample_loss(model: FragmentVC, sample: Sample, loss_taps: str = "both"):
    out = model.forward(sample.src, sample.tgt_mels)
    post = ag.l1_loss(out.mel_post, sample.gt)
    if loss_taps == "post":
        return post, out
    return ag.add(ag.l1_loss(out.mel_pre, sample.gt), post), out


def train_step(model: FragmentVC, batch: list[Sample], state: AdamWState, step: int,
               cfg: TrainConfig) -> float:
    """Forward/backward every sample, apply AdamW, return the mean batch loss.

    Samples are processed one at a time with gradients accumulated, which is
    equivalent to a padded batch with masking.
    """
    model.params.zero_grad()
    total = 0.0
    for sample in batch:
        loss, _ = sample_loss(model, sample, cfg.loss_taps)
        ag.backward(loss, seed=1.0 / len(batch))
        total += float(loss.data)
    adamw_step(model.params, state, step, lambda s, g: lr_at(s, g, cfg), cfg)
    return total / len(batch)


class Trainer:
    """Owns the model, optimiser state and step counter for one run."""

    def __init__(self, model: FragmentVC, corpus: Corpus, cfg: TrainConfig,
                 state: AdamWState | None = None, step: int = 0):
        cfg.validate()
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.state = state or AdamWState.zeros_like(model.params)
        self.step = step

    def run(self, until: int | None = None,
            on_step: Callable[[int, float, float], None] | None = None,
            on_checkpoint: Callable[["Trainer"], None] | None = None) -> list[float]:
        """Train steps ``self.step + 1 .. until`` and return their losses."""
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        losses = []
        while self.step < until:
            step = self.step + 1
            batch = make_batch(self.corpus, step, self.cfg)
            loss = train_step(self.model, batch, self.state, step, self.cfg)
            self.step = step
            losses.append(loss)
            if on_step is not None:
                on_step(step, loss, lr_at(step, "other", self.cfg))
            if on_checkpoint is not None and (step % self.cfg.checkpoint_interval == 0 or step == until):
                on_checkpoint(self)
        return losses

"""Waveform I/O, log-mel analysis, upstream-feature files and Griffin-Lim inversion.

The analysis framing (``win=400``, ``hop=320`` at 16 kHz, no centre padding)
produces exactly one mel frame per upstream-feature frame, so source
features and reconstruction targets line up frame for frame.
"""

from __future__ import annotations

import io
import logging
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fileio import atomic_write

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FVCF_MAGIC = b"FVC1"


class UnsupportedAudioError(ValueError):
    """Raised for WAV files outside the supported PCM16 / mono / 16 kHz format."""


class FeatureFormatError(ValueError):
    """Raised for malformed FVCF feature files."""


@dataclass
class AudioConfig:
    """Analysis parameters.

    The mel-bin count, frequency range and natural-log compression are
    conventions, not values fixed by the original model description.
    """

    sample_rate: int = SAMPLE_RATE
    win_length: int = 400
    hop_length: int = 320
    n_fft: int = 400
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    # pseudo-upstream substitute for pretrained speech features
    upstream_dim: int = 768
    upstream_context: int = 2
    upstream_scale: float = 0.25
    upstream_seed: int = 1234
    griffin_lim_iters: int = 60

    def validate(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE}")
        if self.n_fft < self.win_length:
            raise ValueError("n_fft must be >= win_length")
        if not 0 < self.hop_length <= self.win_length:
            raise ValueError("hop_length must be in (0, win_length]")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= Nyquist")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x M natural-log mel amplitudes
    hop_length: int = 320
    win_length: int = 400

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FeatureSequence:
    frames: np.ndarray  # T x D

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a PCM16 mono 16 kHz WAV file; samples are scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedAudioError(f"{path}: not a PCM WAV file ({exc})") from exc
    if channels != 1:
        raise UnsupportedAudioError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise UnsupportedAudioError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise UnsupportedAudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz (resample externally)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())
    atomic_write(path, buf.getvalue())


# --------------------------------------------------------------------------
# STFT / mel
# --------------------------------------------------------------------------

def frame_count(n_samples: int, win_length: int = 400, hop_length: int = 320) -> int:
    """Number of analysis frames without centre padding: ``1 + (N - win) // hop``."""
    if n_samples < win_length:
        raise ValueError(f"waveform of {n_samples} samples is shorter than one window ({win_length})")
    return 1 + (n_samples - win_length) // hop_length


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _stft(x: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    frames = sliding_window_view(x, cfg.win_length)[::cfg.hop_length]
    return np.fft.rfft(frames * hann_window(cfg.win_length), n=cfg.n_fft, axis=1)


def _istft(spec: np.ndarray, cfg: AudioConfig, length: int) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`_stft`."""
    win = hann_window(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, :cfg.win_length] * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for t, frame in enumerate(frames):
        s = t * cfg.hop_length
        out[s:s + cfg.win_length] += frame
        norm[s:s + cfg.win_length] += win * win
    ok = norm > 1e-10
    out[ok] /= norm[ok]
    out[~ok] = 0.0
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: AudioConfig) -> np.ndarray:
    """Centre frequency (Hz) of each of the ``n_mels`` triangular filters."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """``n_mels x (n_fft//2 + 1)`` matrix of unit-peak triangular filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(w: Waveform, cfg: AudioConfig | None = None) -> MelSpectrogram:
    """Natural-log mel amplitude spectrogram, ``T x n_mels``."""
    cfg = cfg or AudioConfig()
    if w.sample_rate != cfg.sample_rate:
        raise UnsupportedAudioError(f"sample rate {w.sample_rate} != {cfg.sample_rate}")
    x = np.asarray(w.samples, dtype=np.float64)
    frame_count(x.size, cfg.win_length, cfg.hop_length)
    mag = np.abs(_stft(x, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop_length, cfg.win_length)


# --------------------------------------------------------------------------
# upstream features
# --------------------------------------------------------------------------

def pseudo_upstream(mel: MelSpectrogram, cfg: AudioConfig | None = None, seed: int | None = None) -> FeatureSequence:
    """Deterministic stand-in for frozen pretrained speech features.

    Each log-mel frame is stacked with ``upstream_context`` neighbours on each
    side (edges repeated), projected by a fixed seeded Gaussian matrix and
    squashed with tanh. The result keeps the speaker colouring of the input.
    """
    cfg = cfg or AudioConfig()
    seed = cfg.upstream_seed if seed is None else seed
    frames = np.asarray(mel.frames, dtype=np.float64)
    T, M = frames.shape
    c = cfg.upstream_context
    padded = np.pad(frames, ((c, c), (0, 0)), mode="edge")
    stacked = np.concatenate([padded[k:k + T] for k in range(2 * c + 1)], axis=1)
    proj = np.random.default_rng(seed).standard_normal((stacked.shape[1], cfg.upstream_dim))
    proj *= cfg.upstream_scale / np.sqrt(stacked.shape[1])
    return FeatureSequence(np.tanh(stacked @ proj).astype(np.float32))


def write_features(path, frames) -> None:
    """Write a ``T x D`` float32 matrix in FVCF layout."""
    arr = np.ascontiguousarray(np.asarray(getattr(frames, "frames", frames)), dtype="<f4")
    if arr.ndim != 2 or 0 in arr.shape:
        raise FeatureFormatError(f"features must be a non-empty T x D matrix, got {arr.shape}")
    T, D = arr.shape
    atomic_write(path, FVCF_MAGIC + struct.pack("<II", T, D) + arr.tobytes())


def read_features(path) -> np.ndarray:
    """Read an FVCF file into a ``T x D`` float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != FVCF_MAGIC:
        raise FeatureFormatError(f"{path}: bad FVCF magic")
    T, D = struct.unpack_from("<II", blob, 4)
    if T == 0 or D == 0:
        raise FeatureFormatError(f"{path}: empty feature matrix ({T} x {D})")
    if len(blob) != 12 + 4 * T * D:
        raise FeatureFormatError(f"{path}: expected {12 + 4 * T * D} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(T, D).astype(np.float32)


# --------------------------------------------------------------------------
# Griffin-Lim
# --------------------------------------------------------------------------

def mel_to_linear(mel_frames: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Approximate linear STFT magnitudes via the filterbank pseudo-inverse.

    The log floor is subtracted after exponentiation so floored (silent) bins
    map back to zero energy.
    """
    inv = np.linalg.pinv(mel_filterbank(cfg))
    mel = np.maximum(np.exp(np.asarray(mel_frames, dtype=np.float64)) - cfg.log_floor, 0.0)
    return np.maximum(mel @ inv.T, 0.0)


def griffin_lim(mel: MelSpectrogram | np.ndarray, n_iters: int | None = None,
                cfg: AudioConfig | None = None, seed: int = 0,
                return_trace: bool = False):
    """Invert a log-mel spectrogram to a waveform by Griffin-Lim phase recovery.

    Output length is ``(T - 1) * hop + win``. The result is peak-normalised to
    0.95 unless it is effectively silent (peak below 1e-6), in which case it is
    returned as is. With ``return_trace`` the per-iteration spectral
    consistency error ``||  |STFT(x)| - target ||`` is returned as well.
    """
    cfg = cfg or AudioConfig()
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    n_iters = cfg.griffin_lim_iters if n_iters is None else n_iters
    target = mel_to_linear(frames, cfg)
    T = target.shape[0]
    length = (T - 1) * cfg.hop_length + cfg.win_length
    rng = np.random.default_rng(seed)
    spec = target * np.exp(2j * np.pi * rng.random(target.shape))
    x = _istft(spec, cfg, length)
    trace = []
    for _ in range(n_iters):
        rebuilt = _stft(x, cfg)
        trace.append(float(np.linalg.norm(np.abs(rebuilt) - target)))
        spec = target * np.exp(1j * np.angle(rebuilt))
        x = _istft(spec, cfg, length)
    trace.append(float(np.linalg.norm(np.abs(_stft(x, cfg)) - target)))
    peak = float(np.max(np.abs(x)))
    if peak > 1e-6:
        x = x * (0.95 / peak)
    out = Waveform(x, cfg.sample_rate)
    return (out, trace) if return_trace else out

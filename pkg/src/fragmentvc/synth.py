"""Deterministic speech-like test signals.

Utterances are strings of "phones" (formant targets or noise bands) rendered
by additive harmonic synthesis. A speaker is a pitch range plus a formant
scale, so the same phone string spoken by two speakers shares its phonetic
structure but differs in voice colour. This is what the desk-scale
experiments train and convert on; it is not meant to sound natural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE

# (F1, F2, F3) in Hz for voiced phones; None marks a fricative
PHONES: dict[str, tuple[float, float, float] | None] = {
    "iy": (270, 2290, 3010),
    "ih": (390, 1990, 2550),
    "eh": (530, 1840, 2480),
    "ae": (660, 1720, 2410),
    "ah": (520, 1190, 2390),
    "aa": (730, 1090, 2440),
    "ao": (570, 840, 2410),
    "uh": (440, 1020, 2240),
    "uw": (300, 870, 2240),
    "er": (490, 1350, 1690),
    "m": (250, 1100, 2200),
    "l": (360, 1300, 2700),
    "s": None,
    "sh": None,
    "f": None,
}
FRICATIVE_BANDS = {"s": (4500, 7500), "sh": (2200, 4500), "f": (1200, 7000)}


@dataclass(frozen=True)
class Speaker:
    f0: float = 120.0
    formant_scale: float = 1.0
    breathiness: float = 0.02


def make_speaker(seed: int) -> Speaker:
    rng = np.random.default_rng(seed)
    return Speaker(f0=float(rng.uniform(90, 230)),
                   formant_scale=float(rng.uniform(0.85, 1.2)),
                   breathiness=float(rng.uniform(0.005, 0.04)))


def random_phones(n: int, seed: int) -> list[tuple[str, float]]:
    """``n`` (phone, duration-seconds) pairs without immediate repeats."""
    rng = np.random.default_rng(seed)
    names = list(PHONES)
    out: list[tuple[str, float]] = []
    for _ in range(n):
        choice = names[rng.integers(len(names))]
        while out and choice == out[-1][0]:
            choice = names[rng.integers(len(names))]
        out.append((choice, float(rng.uniform(0.07, 0.2))))
    return out


def distinct_phones(seed: int, min_dur: float = 0.12, max_dur: float = 0.24) -> list[tuple[str, float]]:
    """Every phone exactly once in a seeded order, so no content repeats."""
    rng = np.random.default_rng(seed)
    names = list(PHONES)
    rng.shuffle(names)
    return [(name, float(rng.uniform(min_dur, max_dur))) for name in names]


def synthesize(phones, speaker: Speaker, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Render a phone string to a float waveform with peak 0.9."""
    rng = np.random.default_rng(seed)
    n = sum(int(round(d * sample_rate)) for _, d in phones)
    formants = np.zeros((n, 3))
    voiced = np.zeros(n)
    band = np.zeros((n, 2))
    pos = 0
    for name, dur in phones:
        m = int(round(dur * sample_rate))
        spec = PHONES[name]
        if spec is None:
            band[pos:pos + m] = FRICATIVE_BANDS[name]
            formants[pos:pos + m] = (500, 1500, 2500)
        else:
            formants[pos:pos + m] = spec
            voiced[pos:pos + m] = 1.0
        pos += m
    # smooth phone transitions over ~20 ms
    k = int(0.02 * sample_rate)
    ramp = np.hanning(2 * k + 1)
    ramp /= ramp.sum()
    for arr in (formants, band):
        padded = np.pad(arr, ((k, k), (0, 0)), mode="edge")
        for j in range(arr.shape[1]):
            arr[:, j] = np.convolve(padded[:, j], ramp, mode="valid")
    voiced = np.convolve(np.pad(voiced, k, mode="edge"), ramp, mode="valid")
    formants *= speaker.formant_scale

    t = np.arange(n) / sample_rate
    f0 = speaker.f0 * (1 + 0.08 * np.sin(2 * np.pi * 1.3 * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    out = np.zeros(n)
    bandwidths = np.array([80.0, 120.0, 160.0])
    for h in range(1, int((sample_rate / 2) / (0.92 * speaker.f0))):
        fh = h * f0
        gain = np.sum(np.exp(-0.5 * ((fh[:, None] - formants) / bandwidths) ** 2)
                      * np.array([1.0, 0.6, 0.3]), axis=1)
        alive = fh < sample_rate / 2
        out += alive * gain * np.sin(h * phase) / np.sqrt(h)
    out *= voiced

    # fricative noise, shaped per sample block in the frequency domain
    noise = rng.standard_normal(n)
    fric = np.zeros(n)
    block = 256
    freqs = np.fft.rfftfreq(block, 1.0 / sample_rate)
    for s in range(0, n, block):
        seg = noise[s:s + block]
        lo, hi = band[min(s + block // 2, n - 1)]
        if hi <= lo:
            continue
        spec = np.fft.rfft(seg, n=block)
        spec *= (freqs >= lo) & (freqs <= hi)
        fric[s:s + block] = np.fft.irfft(spec, n=block)[:seg.size]
    fric *= 3.0 * (1 - voiced)
    out = out + fric + speaker.breathiness * noise
    return 0.9 * out / np.max(np.abs(out))

"""Noisy/clean pair generation: SNR-controlled mixing and a synthetic tone-plus-noise corpus."""

import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy import signal as sps

from .errors import InvalidInputError
from .frontend import SAMPLE_RATE, read_wav

SNR_RANGE = (-5.0, 15.0)
DATA_DIR_ENV = "ULUNAS_DATA_DIR"


@dataclass
class MixSpec:
    snr_db: float
    clean: np.ndarray
    noise: np.ndarray


def _power(x):
    return float(np.mean(np.square(np.asarray(x, dtype=np.float64))))


def fit_noise(noise, n):
    """Tile or crop ``noise`` to ``n`` samples."""
    noise = np.asarray(noise, dtype=np.float64)
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def noise_scale(clean, noise, snr_db):
    """Gain applied to ``noise`` so that the clean-to-noise power ratio is ``snr_db``."""
    p_clean, p_noise = _power(clean), _power(noise)
    if p_clean == 0:
        raise InvalidInputError("clean signal is silent")
    if p_noise == 0:
        raise InvalidInputError("noise signal is silent")
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix(spec):
    """Add noise to clean speech at the requested SNR.

    The noise is tiled or cropped to the clean length and the SNR is measured
    over that whole span.

    Returns:
        ``(noisy, target)`` as float64 arrays; the target is the clean signal.
    """
    clean = np.asarray(spec.clean, dtype=np.float64)
    noise = np.asarray(spec.noise, dtype=np.float64)
    if clean.ndim != 1 or noise.ndim != 1:
        raise InvalidInputError("mix expects mono signals")
    if len(clean) < SAMPLE_RATE or len(noise) < SAMPLE_RATE:
        raise InvalidInputError("clean and noise must each be at least 1 s long")
    if not SNR_RANGE[0] <= spec.snr_db <= SNR_RANGE[1]:
        raise InvalidInputError(f"snr {spec.snr_db} dB outside {SNR_RANGE}")
    noise = fit_noise(noise, len(clean))
    gain = noise_scale(clean, noise, spec.snr_db)
    return clean + gain * noise, clean


def measured_snr(clean, noisy):
    """SNR of ``noisy`` relative to ``clean`` in dB."""
    clean = np.asarray(clean, dtype=np.float64)
    return 10.0 * np.log10(_power(clean) / _power(np.asarray(noisy, dtype=np.float64) - clean))


def synth_speech(rng, n):
    """Voiced-speech stand-in: harmonic bursts with pitch glides and syllable envelopes."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100, 250) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 6.3)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    harmonics = rng.integers(4, 12)
    tilt = rng.uniform(0.6, 0.9)
    x = sum(tilt ** k * np.sin((k + 1) * phase + rng.uniform(0, 6.3)) for k in range(harmonics))
    rate = rng.uniform(2.5, 5.0)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.3)), 0, None) ** 1.5
    x = x * env
    return 0.3 * x / (np.max(np.abs(x)) + 1e-9)


def synth_noise(rng, n):
    """White, pink-ish or low-passed noise, optionally with a tonal hum."""
    white = rng.standard_normal(n)
    kind = rng.integers(3)
    if kind == 1:
        b, a = sps.butter(1, 0.05)
        x = 0.6 * white + sps.lfilter(b, a, white) * 4
    elif kind == 2:
        b, a = sps.butter(2, rng.uniform(0.1, 0.4))
        x = sps.lfilter(b, a, white)
    else:
        x = white
    if rng.random() < 0.3:
        x = x + 0.5 * np.std(x) * np.sin(2 * np.pi * rng.uniform(50, 400) * np.arange(n) / SAMPLE_RATE)
    return x


class SyntheticPairs(torch.utils.data.Dataset):
    """Deterministic synthetic ``(noisy, clean)`` pairs.

    Item ``i`` depends only on ``(seed, i)``, so any subset can be regenerated
    in any order or process.

    Args:
        size: Number of items.
        seconds: Clip length (at least 1 s).
        seed: Corpus seed.
        snr_range: SNR interval in dB, sampled uniformly.
    """

    def __init__(self, size, seconds=1.0, seed=0, snr_range=SNR_RANGE):
        self.size = size
        self.n = int(round(seconds * SAMPLE_RATE))
        self.seed = seed
        self.snr_range = snr_range

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        if not 0 <= i < self.size:
            raise IndexError(i)
        rng = np.random.default_rng([self.seed, i])
        clean = synth_speech(rng, self.n)
        noise = synth_noise(rng, self.n)
        snr = rng.uniform(*self.snr_range)
        noisy, target = mix(MixSpec(snr, clean, noise))
        return torch.as_tensor(noisy, dtype=torch.float32), torch.as_tensor(target, dtype=torch.float32)


class ManifestPairs(torch.utils.data.Dataset):
    """Pairs mixed on the fly from a text manifest of ``clean_path noise_path [snr_db]`` lines.

    Relative paths resolve against ``data_dir`` or the ``ULUNAS_DATA_DIR``
    environment variable. Without an explicit SNR one is drawn from
    ``(seed, index)``.
    """

    def __init__(self, manifest, data_dir=None, seed=0, seconds=None):
        base = data_dir or os.environ.get(DATA_DIR_ENV) or os.path.dirname(os.path.abspath(manifest))
        self.items = []
        with open(manifest) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise InvalidInputError(f"{manifest}:{lineno}: expected 'clean noise [snr]'")
                clean, noise = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts[:2])
                snr = float(parts[2]) if len(parts) == 3 else None
                self.items.append((clean, noise, snr))
        self.seed = seed
        self.n = None if seconds is None else int(round(seconds * SAMPLE_RATE))

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        clean_path, noise_path, snr = self.items[i]
        clean, noise = read_wav(clean_path), read_wav(noise_path)
        if self.n is not None:
            clean = fit_noise(clean, self.n)
        if snr is None:
            snr = np.random.default_rng([self.seed, i]).uniform(*SNR_RANGE)
        noisy, target = mix(MixSpec(snr, clean, noise))
        return torch.as_tensor(noisy, dtype=torch.float32), torch.as_tensor(target, dtype=torch.float32)

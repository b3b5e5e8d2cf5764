"""Spectral front end: STFT/ISTFT, log-power features and ERB band merging.

Spectrograms are complex tensors shaped ``[..., T, 257]`` (time first), feature
maps are real tensors shaped ``[..., C, T, F]``. Every function accepts numpy
arrays as well and returns torch tensors.
"""

from functools import lru_cache

import numpy as np
import torch
from scipy.io import wavfile

from .errors import InvalidInputError

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_BINS = N_FFT // 2 + 1
N_LOW = 65
N_ERB = 64
N_MERGED = N_LOW + N_ERB
LOG_EPS = 1e-12
# samples whose squared-window envelope is below this are not recoverable
_ENV_FLOOR = 1e-10


def _as_tensor(x, dtype=None):
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        x = x.to(dtype)
    return x


def hann_window(dtype=torch.float64, device=None):
    """Periodic Hann window of length 512."""
    return torch.hann_window(N_FFT, periodic=True, dtype=dtype, device=device)


def _real_dtype(x):
    return x.dtype if x.dtype in (torch.float32, torch.float64) else torch.float32


def stft(wave):
    """Short-time Fourier transform with a 512-point Hann window and 256 hop.

    The first frame starts at sample 0 and samples past the last full window
    are dropped, so frame ``t`` only sees samples ``256 t .. 256 t + 511``.

    Args:
        wave: Real waveform ``[..., N]`` with ``N >= 512``.

    Returns:
        Complex spectrogram ``[..., T, 257]``.
    """
    wave = _as_tensor(wave)
    if wave.is_complex() or wave.dim() == 0:
        raise InvalidInputError("stft expects a real waveform")
    wave = wave.to(_real_dtype(wave))
    n = wave.shape[-1]
    if n < N_FFT:
        raise InvalidInputError(f"waveform has {n} samples, need at least {N_FFT}")
    if not torch.isfinite(wave).all():
        raise InvalidInputError("waveform contains non-finite samples")
    frames = wave.unfold(-1, N_FFT, HOP)
    win = hann_window(wave.dtype, wave.device)
    return torch.fft.rfft(frames * win, n=N_FFT, dim=-1)


def _check_spec(spec):
    spec = _as_tensor(spec)
    if spec.dim() < 2 or spec.shape[-1] != N_BINS:
        raise InvalidInputError(f"spectrogram must end in [T, {N_BINS}], got {tuple(spec.shape)}")
    if not spec.is_complex():
        spec = spec.to(torch.complex64)
    return spec


def istft(spec):
    """Least-squares overlap-add inverse of :func:`stft`.

    Each frame is inverse transformed, windowed again and overlap-added; the sum
    is divided by the squared-window envelope of the frames actually present.
    For spectrograms produced by :func:`stft` this reproduces the input signal
    (except where the envelope vanishes, i.e. sample 0) and ``stft(istft(Y))``
    returns ``Y``.

    Args:
        spec: Complex spectrogram ``[..., T, 257]``.

    Returns:
        Waveform ``[..., 512 + 256 (T - 1)]``.
    """
    spec = _check_spec(spec)
    t = spec.shape[-2]
    if t == 0:
        raise InvalidInputError("spectrogram has no frames")
    rdtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    win = hann_window(rdtype, spec.device)
    frames = torch.fft.irfft(spec, n=N_FFT, dim=-1) * win
    wave = overlap_add(frames)
    env = overlap_add(win.pow(2).expand(t, N_FFT))
    safe = torch.where(env > _ENV_FLOOR, env, torch.ones_like(env))
    return torch.where(env > _ENV_FLOOR, wave / safe, torch.zeros_like(wave))


def overlap_add(frames):
    """Sum 512-sample frames placed 256 samples apart. ``[..., T, 512] -> [..., 256 (T + 1)]``."""
    first, second = frames[..., :HOP], frames[..., HOP:]
    pad = frames.new_zeros(frames.shape[:-2] + (1, HOP))
    blocks = torch.cat([first, pad], dim=-2) + torch.cat([pad, second], dim=-2)
    return blocks.flatten(-2)


def steady_envelope(dtype=torch.float64):
    """Squared-window envelope of one fully overlapped hop, ``[256]``."""
    w2 = hann_window(dtype).pow(2)
    return w2[:HOP] + w2[HOP:]


def log_power(spec):
    """Log-power feature ``log(|X|^2 + 1e-12)`` with a singleton channel axis.

    Args:
        spec: Complex spectrogram ``[..., T, 257]``.

    Returns:
        Real feature map ``[..., 1, T, 257]``.
    """
    spec = _check_spec(spec)
    power = spec.real.pow(2) + spec.imag.pow(2)
    return torch.log(power + LOG_EPS).unsqueeze(-3)


def hz_to_erb_rate(f):
    """Glasberg-Moore ERB-rate (ERB number) of frequency ``f`` in Hz."""
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


class ErbFilterbank:
    """Fixed 257 <-> 129 band merging and splitting matrices.

    Bins 0..64 pass through. Bins 65..256 are covered by 64 triangular filters
    whose centres are evenly spaced in ERB-rate between bin 65 (2031.25 Hz) and
    8 kHz, each triangle reaching the neighbouring centres. The triangles form a
    partition of unity over the high bins.

    Attributes:
        merge_matrix: ``[129, 257]``, rows non-negative and summing to 1.
        split_matrix: ``[257, 129]``, rows non-negative and summing to 1, so a
            constant merged feature is replicated into every bin of its bands.
        passthrough_count: Number of low bins kept unaltered (65).
    """

    passthrough_count = N_LOW

    def __init__(self):
        tri = self.triangles()
        merge_high = tri / tri.sum(axis=1, keepdims=True)
        split_high = tri.T / tri.T.sum(axis=1, keepdims=True)
        merge = np.zeros((N_MERGED, N_BINS))
        merge[:N_LOW, :N_LOW] = np.eye(N_LOW)
        merge[N_LOW:, N_LOW:] = merge_high
        split = np.zeros((N_BINS, N_MERGED))
        split[:N_LOW, :N_LOW] = np.eye(N_LOW)
        split[N_LOW:, N_LOW:] = split_high
        self.merge_high = merge_high
        self.split_high = split_high
        self.merge_matrix = merge
        self.split_matrix = split

    @staticmethod
    def triangles():
        """Unnormalized triangle weights ``[64, 192]`` over bins 65..256."""
        freqs = np.arange(N_LOW, N_BINS) * SAMPLE_RATE / N_FFT
        lo, hi = hz_to_erb_rate(freqs[0]), hz_to_erb_rate(SAMPLE_RATE / 2)
        centres = np.linspace(lo, hi, N_ERB)
        spacing = centres[1] - centres[0]
        pos = hz_to_erb_rate(freqs)
        return np.clip(1.0 - np.abs(pos[None, :] - centres[:, None]) / spacing, 0.0, None)


@lru_cache(maxsize=None)
def default_filterbank():
    return ErbFilterbank()


def _project(feat, low, high_matrix, n_in, name):
    feat = _as_tensor(feat)
    if feat.dim() < 1 or feat.shape[-1] != n_in:
        raise InvalidInputError(f"{name} expects last dim {n_in}, got {tuple(feat.shape)}")
    mat = torch.as_tensor(high_matrix, dtype=feat.dtype, device=feat.device)
    return torch.cat([feat[..., :low], feat[..., low:] @ mat.T], dim=-1)


def band_merge(feat, fb=None):
    """Compress the last axis from 257 bins to 65 + 64 ERB bands."""
    fb = fb or default_filterbank()
    return _project(feat, N_LOW, fb.merge_high, N_BINS, "band_merge")


def band_split(feat, fb=None):
    """Expand the last axis from 129 bands back to 257 bins."""
    fb = fb or default_filterbank()
    return _project(feat, N_LOW, fb.split_high, N_MERGED, "band_split")


def read_wav(path):
    """Read a 16 kHz mono WAV file (16-bit PCM or 32-bit float) as float32 in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise InvalidInputError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim == 2:
        if data.shape[1] != 1:
            raise InvalidInputError(f"{path}: {data.shape[1]} channels, expected mono")
        data = data[:, 0]
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float32)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    if not np.isfinite(data).all():
        raise InvalidInputError(f"{path}: non-finite samples")
    return data


def write_wav(path, wave, pcm16=False):
    """Write a mono waveform at 16 kHz as 32-bit float, or 16-bit PCM if ``pcm16``."""
    wave = np.asarray(wave.detach().cpu() if torch.is_tensor(wave) else wave, dtype=np.float64)
    if wave.ndim != 1:
        raise InvalidInputError("write_wav expects a mono 1-D waveform")
    if pcm16:
        data = np.clip(np.round(wave * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.astype(np.float32)
    wavfile.write(path, SAMPLE_RATE, data)


def frame_count(n_samples):
    """Number of full analysis frames in ``n_samples`` samples."""
    return 0 if n_samples < N_FFT else 1 + (n_samples - N_FFT) // HOP


def frame_rate():
    return SAMPLE_RATE / HOP


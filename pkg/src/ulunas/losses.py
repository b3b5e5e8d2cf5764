"""Training objective: SI-SNR term plus compressed magnitude and real/imaginary spectral terms."""

from dataclasses import dataclass

import torch

from . import frontend
from .errors import InvalidInputError

EPS = 1e-8
# keeps 0/0 finite for an all-zero estimate; far below any audible energy
_TINY = 1e-30


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the hybrid loss.

    Attributes:
        alpha_w: Weight of the SI-SNR term.
        beta_w: Weight of the real + imaginary terms; the magnitude term gets ``1 - beta_w``.
        compress: Power applied to magnitudes.
    """

    alpha_w: float = 0.01
    beta_w: float = 0.3
    compress: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.beta_w < 1.0:
            raise InvalidInputError(f"beta_w must lie in [0, 1), got {self.beta_w}")
        if not 0.0 < self.compress <= 1.0:
            raise InvalidInputError(f"compress must lie in (0, 1], got {self.compress}")


def _project(est, ref):
    if est.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    energy = ref.pow(2).sum(-1, keepdim=True)
    if (energy == 0).any():
        raise InvalidInputError("reference signal is all zeros")
    target = (est * ref).sum(-1, keepdim=True) / energy * ref
    return target, est - target


def sisnr_loss(est, ref, eps=EPS):
    """``-log10(|s_t|^2 / (|e|^2 + eps |s_t|^2))`` averaged over leading axes.

    ``s_t`` is the projection of ``est`` on ``ref`` and ``e = est - s_t``. The
    floor is relative to ``|s_t|^2``, so the value is exactly invariant to
    positive rescaling of ``est`` and a perfect estimate scores ``log10(eps)``.

    Args:
        est: Estimate ``[..., N]``.
        ref: Reference ``[..., N]``, not all zeros.
    """
    target, noise = _project(est, ref)
    t = target.pow(2).sum(-1)
    n = noise.pow(2).sum(-1)
    return -torch.log10((t + _TINY) / (n + eps * t + _TINY)).mean()


def sisnr_db(est, ref):
    """Scale-invariant SNR in dB, ``10 log10(|s_t|^2 / |e|^2)``, averaged over leading axes."""
    target, noise = _project(est, ref)
    return (10.0 * torch.log10(target.pow(2).sum(-1) / noise.pow(2).sum(-1))).mean()


def safe_magnitude(spec):
    """``|spec|`` whose gradient is zero (not NaN) at exactly zero."""
    power = spec.real.pow(2) + spec.imag.pow(2)
    nonzero = power > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, power, torch.ones_like(power))),
                       torch.zeros_like(power))


def _compressed_pow(mag, p):
    nonzero = mag > 0
    return torch.where(nonzero, torch.where(nonzero, mag, torch.ones_like(mag)).pow(p), torch.zeros_like(mag))


def spectral_losses(est, ref, compress=0.3, eps=EPS):
    """Compressed spectral distances.

    Returns:
        ``(mag, real, imag)``: mean squared errors between ``|S|^c``, and between
        the real and imaginary parts each divided by ``max(|S|, eps)^(1 - c)``.
    """
    if est.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    m_est, m_ref = safe_magnitude(est), safe_magnitude(ref)
    mag = (_compressed_pow(m_est, compress) - _compressed_pow(m_ref, compress)).pow(2).mean()
    d_est = m_est.clamp(min=eps).pow(1.0 - compress)
    d_ref = m_ref.clamp(min=eps).pow(1.0 - compress)
    real = (est.real / d_est - ref.real / d_ref).pow(2).mean()
    imag = (est.imag / d_est - ref.imag / d_ref).pow(2).mean()
    return mag, real, imag


def hybrid_loss(est_wave, ref_wave, est_spec=None, ref_spec=None, w=LossWeights()):
    """``alpha_w * SISNR + (1 - beta_w) * mag + beta_w * (real + imag)``.

    Spectrograms default to the front-end STFT of the waveforms.
    """
    if est_spec is None:
        est_spec = frontend.stft(est_wave)
    if ref_spec is None:
        ref_spec = frontend.stft(ref_wave)
    mag, real, imag = spectral_losses(est_spec, ref_spec, w.compress)
    return w.alpha_w * sisnr_loss(est_wave, ref_wave) + (1.0 - w.beta_w) * mag + w.beta_w * (real + imag)

"""Low-level layers shared by the blocks: causal convolutions, APReLU, shuffles.

All stateful layers follow ``forward(x, state=None) -> (y, state)`` where ``x``
is ``[B, C, T, F]``. Passing the returned state with the next chunk of frames
gives the same result as processing the concatenated frames at once.

Layers that the complexity counter must see carry two plain attributes set at
construction: ``positions`` (applications per frame) or ``elements`` (scalars
touched per frame).
"""

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError


def conv_out_freq(freq_in, stride, transposed=False):
    """Frequency extent after a stride-``stride`` (transposed) convolution."""
    if stride == 1:
        return freq_in
    if transposed:
        return (freq_in - 1) * stride + 1
    return -(-freq_in // stride)


def tag(module, positions=None, elements=None):
    """Attach counting metadata to a torch layer and return it."""
    if positions is not None:
        module.positions = positions
    if elements is not None:
        module.elements = elements
    return module


class CausalConv2d(nn.Module):
    """Convolution over (time, frequency), causal in time and strided in frequency.

    The time axis is left-padded with ``kt - 1`` past frames (zeros, or the
    carried state when streaming). Frequency padding keeps ``F`` for stride 1
    and maps ``F -> ceil(F / 2)`` for stride 2. The transposed variant mirrors
    this: stride 2 maps ``F -> 2F - 1``.

    Args:
        in_channels: Input channels.
        out_channels: Output channels.
        kernel_size: ``(kt, kf)``.
        stride: Frequency stride (1 or 2).
        groups: Convolution groups.
        bias: Whether to learn an additive bias.
        transposed: Use a transposed convolution.
        freq_in: Input frequency extent, recorded for complexity accounting.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, groups=1,
                 bias=True, transposed=False, freq_in=None):
        super().__init__()
        kt, kf = kernel_size
        if kt < 1 or kf < 1:
            raise InvalidInputError(f"kernel extents must be >= 1, got {kernel_size}")
        if in_channels % groups or out_channels % groups:
            raise InvalidInputError(f"channels {in_channels}->{out_channels} not divisible by groups {groups}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = (kt, kf)
        self.stride = stride
        self.groups = groups
        self.transposed = transposed
        self.freq_in = freq_in
        self.freq_out = None if freq_in is None else conv_out_freq(freq_in, stride, transposed)
        cls = nn.ConvTranspose2d if transposed else nn.Conv2d
        self.conv = cls(in_channels, out_channels, (kt, kf), stride=(1, stride), groups=groups, bias=bias)

    @property
    def weight(self):
        return self.conv.weight

    @property
    def bias(self):
        return self.conv.bias

    def forward(self, x, state=None):
        kt, kf = self.kernel_size
        new_state = None
        if kt > 1:
            if state is None:
                state = x.new_zeros(x.shape[0], x.shape[1], kt - 1, x.shape[3])
            x = torch.cat([state, x], dim=2)
            new_state = x[:, :, x.shape[2] - (kt - 1):]
        freq = x.shape[3]
        if self.transposed:
            y = self.conv(x)
            n_t = x.shape[2] - (kt - 1)
            left = (kf - 1) // 2
            y = y[:, :, kt - 1:kt - 1 + n_t, left:left + conv_out_freq(freq, self.stride, True)]
        else:
            target = conv_out_freq(freq, self.stride)
            total = (target - 1) * self.stride + kf - freq
            left = (kf - 1) // 2
            y = self.conv(F.pad(x, (left, max(total - left, 0))))
        return y, new_state


def aprelu(x, gamma, beta, alpha):
    """Affine PReLU: ``gamma * x + beta + max(0, x) + alpha * min(0, x)``.

    Args:
        x: ``[..., C, T, F]``.
        gamma: ``[C, F]`` scale, broadcast over time.
        beta: ``[C, F]`` offset, broadcast over time.
        alpha: ``[C]`` negative slope, broadcast over time and frequency.
    """
    if x.dim() < 3 or tuple(gamma.shape) != (x.shape[-3], x.shape[-1]) \
            or tuple(beta.shape) != tuple(gamma.shape) or tuple(alpha.shape) != (x.shape[-3],):
        raise InvalidInputError(
            f"aprelu shapes do not match: x {tuple(x.shape)}, gamma {tuple(gamma.shape)}, "
            f"beta {tuple(beta.shape)}, alpha {tuple(alpha.shape)}")
    g = gamma.unsqueeze(-2)
    b = beta.unsqueeze(-2)
    a = alpha[:, None, None]
    return g * x + b + torch.clamp(x, min=0) + a * torch.clamp(x, max=0)


class APReLU(nn.Module):
    """PReLU plus a learnable per-(channel, frequency) affine branch."""

    def __init__(self, channels, freq):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels, freq))
        self.beta = nn.Parameter(torch.zeros(channels, freq))
        self.alpha = nn.Parameter(torch.full((channels,), 0.25))

    def forward(self, x):
        return aprelu(x, self.gamma, self.beta, self.alpha)


def make_activation(channels, freq, affine):
    """APReLU for extended blocks, otherwise a PReLU with one shared slope."""
    if affine:
        return APReLU(channels, freq)
    return tag(nn.PReLU(1), elements=channels * freq)


def channel_shuffle(x, groups):
    """Interleave channel groups: channel ``g * (C / G) + k`` moves to ``k * G + g``."""
    c = x.shape[-3]
    if groups < 1 or c % groups:
        raise InvalidInputError(f"{c} channels not divisible by {groups} groups")
    if groups == 1:
        return x
    lead = x.shape[:-3]
    y = x.reshape(*lead, groups, c // groups, *x.shape[-2:]).transpose(-4, -3)
    return y.reshape(x.shape)


def effective_groups(groups, *channels):
    """``groups`` if it divides every channel count, else 1."""
    return groups if all(c % groups == 0 for c in channels) else 1


class ConvNorm(nn.Module):
    """Causal convolution followed by batch norm over channels."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, groups=1,
                 transposed=False, freq_in=None):
        super().__init__()
        self.conv = CausalConv2d(in_channels, out_channels, kernel_size, stride, groups,
                                 transposed=transposed, freq_in=freq_in)
        self.freq_out = self.conv.freq_out
        self.norm = tag(nn.BatchNorm2d(out_channels), elements=out_channels * self.freq_out)

    def forward(self, x, state=None):
        y, state = self.conv(x, state)
        return self.norm(y), state


def out_channel_index(conv):
    """Output-channel index of every weight entry's second-dim slot, shaped like the weight."""
    w = conv.conv.weight
    if not conv.transposed:
        return torch.arange(w.shape[0]).view(-1, 1, 1, 1).expand_as(w)
    in_per_group = conv.in_channels // conv.groups
    out_per_group = conv.out_channels // conv.groups
    group = torch.arange(w.shape[0]) // in_per_group
    idx = group.view(-1, 1) * out_per_group + torch.arange(w.shape[1]).view(1, -1)
    return idx.view(w.shape[0], w.shape[1], 1, 1).expand_as(w)


def bn_scale_shift(norm):
    """Per-channel ``(scale, shift)`` so that ``norm(y) == scale * y + shift`` in eval mode."""
    std = torch.sqrt(norm.running_var + norm.eps)
    scale = norm.weight / std
    return scale, norm.bias - norm.running_mean * scale


def folded_kernel(unit):
    """Weight and bias of a :class:`ConvNorm` with its eval-mode norm folded in."""
    scale, shift = bn_scale_shift(unit.norm)
    conv = unit.conv
    w = conv.conv.weight * scale[out_channel_index(conv)]
    b = conv.conv.bias if conv.conv.bias is not None else torch.zeros_like(scale)
    return w, b * scale + shift


def identity_kernel(conv):
    """Kernel of ``conv``'s shape that reproduces its input (requires equal in/out channels, stride 1)."""
    w = torch.zeros_like(conv.conv.weight)
    kt, kf = conv.kernel_size
    t_idx = 0 if conv.transposed else kt - 1
    f_idx = (kf - 1) // 2
    per_group = conv.in_channels // conv.groups
    for c in range(conv.out_channels):
        if conv.transposed:
            w[c, c % (conv.out_channels // conv.groups), t_idx, f_idx] = 1.0
        else:
            w[c, c % per_group, t_idx, f_idx] = 1.0
    return w


def set_identity_norm(norm):
    """Make a batch norm an exact identity in eval mode."""
    with torch.no_grad():
        norm.running_mean.zero_()
        norm.running_var.fill_(1.0 - norm.eps)
        norm.weight.fill_(1.0)
        norm.bias.zero_()


def fuse_conv_norm(unit):
    """Fold a :class:`ConvNorm`'s norm into its convolution in place (eval mode semantics)."""
    with torch.no_grad():
        w, b = folded_kernel(unit)
        conv = unit.conv.conv
        if conv.bias is None:
            conv.bias = nn.Parameter(torch.zeros(conv.out_channels))
        conv.weight.copy_(w)
        conv.bias.copy_(b)
        set_identity_norm(unit.norm)
    return unit


class BandProjection(nn.Module):
    """Fixed linear map on the last axis that passes the first ``keep`` entries through.

    Used for band merging (257 -> 129) and band splitting (129 -> 257). The
    matrix is a non-learnable buffer.
    """

    def __init__(self, keep, matrix, channels=1):
        super().__init__()
        self.keep = keep
        self.register_buffer("matrix", torch.as_tensor(matrix, dtype=torch.float32))
        self.in_features = keep + self.matrix.shape[1]
        self.out_features = keep + self.matrix.shape[0]
        self.positions = channels

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise InvalidInputError(f"expected last dim {self.in_features}, got {x.shape[-1]}")
        high = x[..., self.keep:] @ self.matrix.to(x.dtype).T
        return torch.cat([x[..., :self.keep], high], dim=-1)

"""Causal time-frequency attention (cTFA).

Two gates multiply the input feature map. The frequency-independent gate runs a
GRU over the per-channel frame energies and yields one weight per (channel,
frame). The frequency-dependent gate runs two causal (3, 1) convolutions over
the channel-averaged energies and yields one weight per (frame, bin).
"""

import torch
from torch import nn

from .layers import CausalConv2d, tag

EXPANSION = 5


class CTFA(nn.Module):
    """Causal time-frequency attention over a ``[B, C, T, F]`` map.

    Args:
        channels: Channel count ``C`` of the attended map.
        freq: Frequency extent ``F`` (for complexity accounting).
        use_time: Enable the frequency-independent (recurrent) gate.
        use_freq: Enable the frequency-dependent (convolutional) gate.
        hidden: GRU width of the recurrent gate, default ``2 C``.
    """

    def __init__(self, channels, freq, use_time=True, use_freq=True, hidden=None):
        super().__init__()
        self.channels = channels
        self.freq = freq
        self.use_time, self.use_freq = use_time, use_freq
        if use_time:
            hidden = hidden or 2 * channels
            self.gru = tag(nn.GRU(channels, hidden, batch_first=True), positions=1)
            self.proj = tag(nn.Linear(hidden, channels), positions=1)
        if use_freq:
            self.conv1 = CausalConv2d(1, EXPANSION, (3, 1), freq_in=freq)
            self.act = tag(nn.PReLU(EXPANSION), elements=EXPANSION * freq)
            self.conv2 = CausalConv2d(EXPANSION, 1, (3, 1), freq_in=freq)

    def time_gate(self, v, h=None):
        """``[B, C, T, 1]`` weights from mean-over-frequency energies."""
        z = v.pow(2).mean(dim=-1).transpose(1, 2)
        out, h = self.gru(z, h)
        return torch.sigmoid(self.proj(out)).transpose(1, 2).unsqueeze(-1), h

    def freq_gate(self, v, state=None):
        """``[B, 1, T, F]`` weights from mean-over-channel energies."""
        s1, s2 = state if state is not None else (None, None)
        z = v.pow(2).mean(dim=1, keepdim=True)
        a, s1 = self.conv1(z, s1)
        a, s2 = self.conv2(self.act(a), s2)
        return torch.sigmoid(a), (s1, s2)

    def forward(self, v, state=None):
        state = state or {}
        y = v
        new = {}
        if self.use_time:
            at, new["time"] = self.time_gate(v, state.get("time"))
            y = y * at
        if self.use_freq:
            af, new["freq"] = self.freq_gate(v, state.get("freq"))
            y = y * af
        return y, new


def ctfa(v, module, state=None):
    """Functional form of :class:`CTFA`: returns ``(attended, state)``."""
    return module(v, state)

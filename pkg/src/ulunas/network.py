"""Full enhancement network: band merge, U-Net encoder/decoder, recurrent bottleneck, mask head.

The network consumes a log-power spectrogram ``[B, 1, T, 257]`` and emits a
magnitude mask ``[B, T, 257]`` in (0, 1). :func:`enhance` applies the mask to
the noisy STFT, keeps the noisy phase and resynthesizes. :func:`stream_enhance`
does the same hop by hop with carried state.
"""

import ast
import copy
import re
from dataclasses import dataclass, field

import torch
from torch import nn

from . import frontend
from .blocks import BLOCK_TYPES, BlockSpec, build_block
from .errors import ArchitectureError, ConfigError, InvalidInputError, StateMismatchError
from .layers import BandProjection, CausalConv2d, effective_groups, tag

N_BLOCKS = 5
CHECKPOINT_FORMAT = "ulunas-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GDPRNNConfig:
    """Grouped dual-path recurrent bottleneck.

    Attributes:
        groups: Independent recurrent sub-networks per path.
        layers: Stacked dual-path layers.
        hidden_size: Width of each group's time-wise GRU. Defaults to
            ``channels / groups``; the bidirectional frequency-wise GRU uses
            half of it per direction.
    """

    groups: int = 2
    layers: int = 2
    hidden_size: int = None


def _shuffle_last(x, groups):
    if groups == 1:
        return x
    c = x.shape[-1]
    return x.reshape(*x.shape[:-1], groups, c // groups).transpose(-1, -2).reshape(x.shape)


class DualPathLayer(nn.Module):
    """One intra-frame (bidirectional over frequency) plus inter-frame (causal over time) pass."""

    def __init__(self, channels, freq, groups=2, hidden=None):
        super().__init__()
        if channels % groups or (channels // groups) % 2:
            raise InvalidInputError(f"{channels} bottleneck channels do not split into {groups} "
                                    "groups of even width")
        width = channels // groups
        hidden = hidden or width
        if hidden % 2:
            raise InvalidInputError(f"hidden size {hidden} must be even")
        self.groups = groups
        self.intra = nn.ModuleList(tag(nn.GRU(width, hidden // 2, batch_first=True, bidirectional=True),
                                       positions=freq) for _ in range(groups))
        self.intra_fc = tag(nn.Linear(groups * hidden, channels), positions=freq)
        self.intra_norm = tag(nn.LayerNorm((freq, channels), eps=1e-8), elements=freq * channels)
        self.inter = nn.ModuleList(tag(nn.GRU(width, hidden, batch_first=True), positions=freq)
                                   for _ in range(groups))
        self.inter_fc = tag(nn.Linear(groups * hidden, channels), positions=freq)
        self.inter_norm = tag(nn.LayerNorm((freq, channels), eps=1e-8), elements=freq * channels)

    def forward(self, x, state=None):
        b, c, t, f = x.shape
        y = x.permute(0, 2, 3, 1)  # B T F C
        seq = y.reshape(b * t, f, c)
        parts = seq.chunk(self.groups, dim=-1)
        intra = torch.cat([gru(p)[0] for gru, p in zip(self.intra, parts)], dim=-1)
        intra = self.intra_fc(_shuffle_last(intra, self.groups)).reshape(b, t, f, c)
        y = y + self.intra_norm(intra)
        seq = y.transpose(1, 2).reshape(b * f, t, c)
        parts = seq.chunk(self.groups, dim=-1)
        state = state or [None] * self.groups
        outs, new = [], []
        for gru, p, h in zip(self.inter, parts, state):
            o, h = gru(p, h)
            outs.append(o)
            new.append(h)
        inter = self.inter_fc(_shuffle_last(torch.cat(outs, dim=-1), self.groups))
        inter = inter.reshape(b, f, t, c).transpose(1, 2)
        y = y + self.inter_norm(inter)
        return y.permute(0, 3, 1, 2), new


class GDPRNN(nn.Module):
    """Stack of :class:`DualPathLayer`; shape-preserving on ``[B, C, T, F]``."""

    def __init__(self, channels, freq, cfg=GDPRNNConfig()):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(DualPathLayer(channels, freq, cfg.groups, cfg.hidden_size)
                                    for _ in range(cfg.layers))

    def forward(self, x, state=None):
        state = state or [None] * len(self.layers)
        new = []
        for layer, s in zip(self.layers, state):
            x, s = layer(x, s)
            new.append(s)
        return x, new


def gdprnn_forward(feat, module, state=None):
    """Functional form of :class:`GDPRNN`: returns ``(features, state)``."""
    return module(feat, state)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Five encoder blocks plus bottleneck settings; the decoder mirrors the encoder."""

    encoder_blocks: tuple
    bottleneck: GDPRNNConfig = field(default_factory=GDPRNNConfig)
    input_channels: int = 1

    def __post_init__(self):
        blocks = tuple(self.encoder_blocks)
        object.__setattr__(self, "encoder_blocks", blocks)
        if len(blocks) != N_BLOCKS:
            raise ArchitectureError(f"need exactly {N_BLOCKS} encoder blocks, got {len(blocks)}")
        for i, b in enumerate(blocks):
            if not isinstance(b, BlockSpec):
                raise ArchitectureError(f"not a BlockSpec: {b!r}", i)
            if b.transposed:
                raise ArchitectureError("encoder blocks cannot be transposed", i)
        if self.input_channels < 1:
            raise ArchitectureError(f"input_channels must be >= 1, got {self.input_channels}")

    @classmethod
    def from_lists(cls, types, strides, groups, channels, kernels, **kwargs):
        lists = dict(types=types, strides=strides, groups=groups, channels=channels, kernels=kernels)
        for key, value in lists.items():
            if len(value) != N_BLOCKS:
                raise ArchitectureError(f"{key} has {len(value)} entries, need {N_BLOCKS}")
        blocks = []
        for i, args in enumerate(zip(types, strides, groups, channels, kernels)):
            try:
                blocks.append(BlockSpec(args[0], int(args[1]), int(args[2]), int(args[3]), tuple(args[4])))
            except (InvalidInputError, TypeError, ValueError) as exc:
                raise ArchitectureError(str(exc), i) from exc
        return cls(tuple(blocks), **kwargs)

    @classmethod
    def prototype(cls, block_type, channels=16, kernel=(3, 3), strides=(2, 2, 1, 1, 1)):
        """Five identical blocks, as used for comparing block types."""
        return cls.from_lists([block_type] * N_BLOCKS, strides, [1] * N_BLOCKS,
                              [channels] * N_BLOCKS, [kernel] * N_BLOCKS)

    @property
    def types(self):
        return [b.block_type for b in self.encoder_blocks]

    def to_text(self):
        """Render in the architecture config format."""
        blocks = self.encoder_blocks
        lines = [
            f"types    = [{', '.join(b.block_type for b in blocks)}]",
            f"strides  = [{', '.join(str(b.stride) for b in blocks)}]",
            f"groups   = [{', '.join(str(b.groups) for b in blocks)}]",
            f"channels = [{', '.join(str(b.out_channels) for b in blocks)}]",
            f"kernels  = [{', '.join(f'({b.kernel[0]},{b.kernel[1]})' for b in blocks)}]",
        ]
        defaults = GDPRNNConfig()
        if self.bottleneck.groups != defaults.groups:
            lines.append(f"bottleneck_groups = {self.bottleneck.groups}")
        if self.bottleneck.layers != defaults.layers:
            lines.append(f"bottleneck_layers = {self.bottleneck.layers}")
        if self.bottleneck.hidden_size is not None:
            lines.append(f"bottleneck_hidden = {self.bottleneck.hidden_size}")
        if self.input_channels != 1:
            lines.append(f"input_channels = {self.input_channels}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse the architecture config format (``key = value`` lines, ``#`` comments)."""
        return cls._from_entries(parse_config_lines(text))

    @classmethod
    def _from_entries(cls, entries):
        required = ("types", "strides", "groups", "channels", "kernels")
        optional = ("bottleneck_groups", "bottleneck_layers", "bottleneck_hidden", "input_channels")
        for key in entries:
            if key not in required + optional:
                raise ConfigError("unknown key", key)
        for key in required:
            if key not in entries:
                raise ConfigError("missing", key)
        values = {"types": _parse_names(entries["types"], "types")}
        for key in ("strides", "groups", "channels"):
            values[key] = _parse_ints(entries[key], key)
        values["kernels"] = _parse_kernels(entries["kernels"])
        for key in required:
            if len(values[key]) != N_BLOCKS:
                raise ConfigError(f"{len(values[key])} entries, need {N_BLOCKS}", key)
        for i, t in enumerate(values["types"]):
            if t not in BLOCK_TYPES:
                raise ConfigError(f"unknown block type {t!r} at position {i}", "types")
        extra = {}
        for key in optional:
            if key in entries:
                try:
                    extra[key] = int(entries[key])
                except ValueError as exc:
                    raise ConfigError("expected an integer", key) from exc
        bottleneck = GDPRNNConfig(extra.get("bottleneck_groups", 2), extra.get("bottleneck_layers", 2),
                                  extra.get("bottleneck_hidden"))
        try:
            return cls.from_lists(values["types"], values["strides"], values["groups"], values["channels"],
                                  values["kernels"], bottleneck=bottleneck,
                                  input_channels=extra.get("input_channels", 1))
        except ArchitectureError as exc:
            raise ConfigError(str(exc), "blocks") from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        return cls.from_text(text)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def decoder_blocks(self):
        """Mirrored decoder as ``(BlockSpec, in_channels)`` pairs in execution order.

        Decoder stage ``j`` undoes encoder block ``4 - j``: same type, stride and
        kernel, transposed, and its output channels retargeted to that encoder
        block's input channels.
        """
        ins = [self.input_channels] + [b.out_channels for b in self.encoder_blocks[:-1]]
        out = []
        for b, cin in zip(reversed(self.encoder_blocks), reversed(ins)):
            g = b.groups if cin % b.groups == 0 else 1
            out.append((BlockSpec(b.block_type, b.stride, g, cin, b.kernel, True), b.out_channels))
        return out

    def freq_ladder(self, freq=frontend.N_MERGED):
        """Frequency extent entering each encoder block, plus the bottleneck's."""
        from .layers import conv_out_freq
        ladder = [freq]
        for b in self.encoder_blocks:
            ladder.append(conv_out_freq(ladder[-1], b.stride))
        return ladder


def parse_config_lines(text):
    """``key = value`` pairs from config text; blank lines and ``#`` comments are skipped."""
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]") and "=" not in line:
            continue  # optional section header
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", key):
            raise ConfigError(f"line {lineno}: bad key")
        if key in entries:
            raise ConfigError("duplicate", key)
        entries[key] = value
    return entries


def _strip_list(value, key):
    value = value.strip()
    if not (value.startswith("[") and value.endswith("]")):
        raise ConfigError("expected a bracketed list", key)
    return value[1:-1]


def _parse_names(value, key):
    inner = _strip_list(value, key)
    names = [s.strip().strip("'\"") for s in inner.split(",") if s.strip()]
    if not all(re.fullmatch(r"[A-Za-z]+", n) for n in names):
        raise ConfigError("expected a list of names", key)
    return names


def _literal(value, key):
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"cannot parse {value!r}", key) from exc


def _parse_ints(value, key):
    _strip_list(value, key)
    items = _literal(value, key)
    if not isinstance(items, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
        raise ConfigError("expected a list of integers", key)
    return items


def _parse_kernels(value):
    key = "kernels"
    _strip_list(value, key)
    items = _literal(value, key)
    ok = isinstance(items, list) and all(
        isinstance(k, tuple) and len(k) == 2 and all(isinstance(v, int) for v in k) for k in items)
    if not ok:
        raise ConfigError("expected a list of (time, freq) pairs", key)
    return items


@dataclass
class StreamState:
    """Everything carried between hops of :func:`stream_enhance`.

    Attributes:
        signature: Architecture text of the owning model.
        network: Per-stage recurrent and convolution history, or None before the first frame.
        previous_hop: The last 256 input samples (analysis overlap).
        overlap: Second half of the last synthesized frame.
        hops: Number of hops consumed.
    """

    signature: str
    network: object = None
    previous_hop: torch.Tensor = None
    overlap: torch.Tensor = None
    hops: int = 0


class Model(nn.Module):
    """U-Net mask estimator assembled from an :class:`ArchitectureSpec`."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        fb = frontend.default_filterbank()
        self.merge = BandProjection(frontend.N_LOW, fb.merge_high, channels=arch.input_channels)
        ladder = arch.freq_ladder()
        self.freq_ladder = ladder
        self.encoder = nn.ModuleList()
        cin = arch.input_channels
        for i, (spec, f) in enumerate(zip(arch.encoder_blocks, ladder)):
            try:
                self.encoder.append(build_block(spec, cin, f))
            except InvalidInputError as exc:
                raise ArchitectureError(str(exc), i) from exc
            cin = spec.out_channels
        try:
            self.bottleneck = GDPRNN(cin, ladder[-1], arch.bottleneck)
        except InvalidInputError as exc:
            raise ArchitectureError(f"bottleneck: {exc}", N_BLOCKS - 1) from exc
        self.decoder = nn.ModuleList()
        for j, ((spec, c), f) in enumerate(zip(arch.decoder_blocks(), reversed(ladder[1:]))):
            try:
                self.decoder.append(build_block(spec, c, f))
            except InvalidInputError as exc:
                raise ArchitectureError(f"decoder: {exc}", N_BLOCKS - 1 - j) from exc
        self.head = CausalConv2d(arch.input_channels, 1, (1, 1), freq_in=frontend.N_MERGED)
        self.split = BandProjection(frontend.N_LOW, fb.split_high, channels=1)

    @property
    def signature(self):
        return self.arch.to_text()

    def _check(self, feat):
        if not torch.is_tensor(feat):
            feat = torch.as_tensor(feat)
        squeeze = feat.dim() == 3
        if squeeze:
            feat = feat.unsqueeze(0)
        if feat.dim() != 4 or feat.shape[1] != self.arch.input_channels or feat.shape[-1] != frontend.N_BINS \
                or feat.shape[2] < 1:
            raise InvalidInputError(
                f"expected features [B, {self.arch.input_channels}, T, {frontend.N_BINS}], got {tuple(feat.shape)}")
        return feat.to(self.merge.matrix.dtype), squeeze

    def step(self, feat, state=None):
        """Masks for a chunk of frames, continuing from ``state``.

        Args:
            feat: Log-power features ``[B, 1, T, 257]`` (or ``[1, T, 257]``).
            state: Value returned by the previous call, or None at stream start.

        Returns:
            ``(mask, state)`` with mask ``[B, T, 257]`` (or ``[T, 257]``).
        """
        feat, squeeze = self._check(feat)
        state = state or {}
        enc_state = state.get("encoder", [None] * N_BLOCKS)
        dec_state = state.get("decoder", [None] * N_BLOCKS)
        x = self.merge(feat)
        skips, new_enc, new_dec = [], [], []
        for block, s in zip(self.encoder, enc_state):
            x, s = block(x, s)
            skips.append(x)
            new_enc.append(s)
        x, bott = self.bottleneck(x, state.get("bottleneck"))
        for block, skip, s in zip(self.decoder, reversed(skips), dec_state):
            x, s = block(x + skip, s)
            new_dec.append(s)
        mask = torch.sigmoid(self.head(x)[0])
        mask = self.split(mask)[:, 0]
        if squeeze:
            mask = mask[0]
        return mask, {"encoder": new_enc, "bottleneck": bott, "decoder": new_dec}

    def forward(self, feat):
        return self.step(feat)[0]


def assemble(arch, seed=None):
    """Build a :class:`Model`; with ``seed`` the initial weights are reproducible."""
    if not isinstance(arch, ArchitectureSpec):
        raise InvalidInputError(f"expected an ArchitectureSpec, got {type(arch).__name__}")
    if seed is None:
        return Model(arch)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Model(arch)


def _as_wave(noisy):
    x = torch.as_tensor(noisy.detach() if torch.is_tensor(noisy) else noisy)
    if x.dim() != 1:
        raise InvalidInputError(f"expected a mono waveform, got shape {tuple(x.shape)}")
    if x.numel() == 0:
        raise InvalidInputError("empty waveform")
    if not torch.isfinite(x).all():
        raise InvalidInputError("waveform contains non-finite samples")
    return x.to(torch.float32)


def apply_mask(spec, mask):
    """Scale magnitudes by ``mask`` and keep the phase."""
    return spec * mask.to(spec.real.dtype)


def enhance_batch(noisy, model):
    """Differentiable enhancement of a batch ``[B, N]``; see :func:`enhance`.

    Returns:
        ``(enhanced [B, N], noisy_spec, mask)``.
    """
    n = noisy.shape[-1]
    hop = frontend.HOP
    tail = (-n) % hop + hop
    padded = torch.nn.functional.pad(noisy, (hop, tail))
    spec = frontend.stft(padded)
    mask = model(frontend.log_power(spec))
    out = frontend.istft(apply_mask(spec, mask))
    return out[..., hop:hop + n], spec, mask


def enhance(noisy, model):
    """Enhance a whole waveform.

    One hop of zeros is prepended so every kept sample is covered by two
    analysis frames; the tail is zero-padded to full frames and trimmed.

    Args:
        noisy: 16 kHz mono waveform ``[N]``.
        model: A :class:`Model` (evaluated as is; call ``eval()`` first).

    Returns:
        Enhanced waveform ``[N]``.
    """
    x = _as_wave(noisy)
    with torch.no_grad():
        return enhance_batch(x.unsqueeze(0), model)[0][0]


def new_stream_state(model):
    return StreamState(signature=model.signature)


def stream_enhance(frames, model, state=None):
    """Enhance an iterator of 256-sample hops, yielding one enhanced hop per input hop.

    Output lags input by one hop; the final hop is emitted once the input is
    exhausted. The last input hop may be shorter than 256 samples. The
    concatenated output equals :func:`enhance` on the concatenated input.

    Args:
        frames: Iterable of 1-D arrays.
        model: A :class:`Model`.
        state: A fresh :class:`StreamState` from :func:`new_stream_state`; one is
            created when omitted. It is updated in place and describes a single
            stream that ends when ``frames`` is exhausted.

    Raises:
        InvalidInputError: If ``state`` belongs to a different model, or a hop is
            malformed.
    """
    if state is None:
        state = new_stream_state(model)
    if state.signature != model.signature:
        raise InvalidInputError("stream state was created for a different architecture")
    hop = frontend.HOP
    win = frontend.hann_window(torch.float32)
    env = frontend.steady_envelope(torch.float32)
    if state.previous_hop is None:
        state.previous_hop = torch.zeros(hop)
        state.overlap = torch.zeros(hop)

    def process(chunk):
        frame = torch.cat([state.previous_hop, chunk])
        state.previous_hop = chunk
        spec = torch.fft.rfft(frame * win).unsqueeze(0)
        with torch.no_grad():
            mask, state.network = model.step(frontend.log_power(spec).unsqueeze(0), state.network)
        synth = torch.fft.irfft(apply_mask(spec, mask[0]), n=frontend.N_FFT)[0] * win
        out = (state.overlap + synth[:hop]) / env
        state.overlap = synth[hop:]
        state.hops += 1
        return out

    pending = None  # length of the hop whose output the next frame completes
    for raw in frames:
        if pending is not None and pending < hop:
            raise InvalidInputError("only the last hop may be shorter than 256 samples")
        chunk = _as_wave(raw)
        n = chunk.shape[0]
        if n > hop:
            raise InvalidInputError(f"hops must have at most {hop} samples, got {n}")
        out = process(torch.cat([chunk, chunk.new_zeros(hop - n)]))
        if pending is not None:
            yield out[:pending]
        pending = n
    if pending is not None:
        yield process(torch.zeros(hop))[:pending]


def save_checkpoint(path, model, extra=None):
    """Write weights together with the architecture text and a format tag."""
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "architecture": model.signature, "state_dict": model.state_dict(),
                "extra": extra or {}}, path)


def load_checkpoint(path, arch=None):
    """Rebuild the model stored at ``path``.

    Args:
        path: Checkpoint file.
        arch: Optional expected architecture; a different stored one is an error.

    Returns:
        ``(model, extra)`` with the model in eval mode.

    Raises:
        InvalidInputError: Unreadable file.
        StateMismatchError: Not a checkpoint of this format, or architecture mismatch.
    """
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise InvalidInputError(f"no such checkpoint: {path}") from exc
    except Exception as exc:  # torch raises several unrelated types for corrupt files
        raise StateMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise StateMismatchError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise StateMismatchError(f"unsupported checkpoint version {blob.get('version')}")
    stored = ArchitectureSpec.from_text(blob["architecture"])
    if arch is not None and arch != stored:
        raise StateMismatchError("checkpoint architecture differs from the requested one")
    model = Model(stored)
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise StateMismatchError(f"weights do not fit the architecture: {exc}") from exc
    model.eval()
    return model, blob.get("extra", {})


def clone_model(model):
    return copy.deepcopy(model)


__all__ = ["ArchitectureSpec", "GDPRNNConfig", "GDPRNN", "Model", "StreamState", "assemble", "enhance",
           "enhance_batch", "stream_enhance", "new_stream_state", "gdprnn_forward", "save_checkpoint", "load_checkpoint",
           "effective_groups"]

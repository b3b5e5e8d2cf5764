"""Convolutional blocks: Conv, DWS, Ghost, Rep, MB, Star and the extended X-variants.

Each block maps ``[B, Cin, T, F] -> [B, Cout, T, F']`` with ``F' = ceil(F / 2)``
for stride 2 (``2F - 1`` when transposed) and keeps ``T``. Blocks are causal in
time and support streaming through ``forward(x, state) -> (y, state)``.
Extended blocks swap every activation for APReLU and end with cTFA.
"""

import copy
from dataclasses import dataclass

import torch
from torch import nn

from .attention import CTFA
from .errors import InvalidInputError
from .layers import (CausalConv2d, ConvNorm, bn_scale_shift, channel_shuffle, effective_groups,
                     folded_kernel, fuse_conv_norm, identity_kernel, make_activation,
                     out_channel_index, set_identity_norm, tag)

BASIC_TYPES = ("Conv", "DWS", "Ghost", "Rep", "MB", "Star")
EXTENDED_TYPES = ("XConv", "XDWS", "XMB")
BLOCK_TYPES = BASIC_TYPES + EXTENDED_TYPES
GHOST_CHEAP_KERNEL = (1, 5)


@dataclass(frozen=True)
class BlockSpec:
    """One block's type, frequency stride, groups, output channels and (time, freq) kernel."""

    block_type: str
    stride: int = 1
    groups: int = 1
    out_channels: int = 16
    kernel: tuple = (3, 3)
    transposed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.block_type not in BLOCK_TYPES:
            raise InvalidInputError(f"unknown block type {self.block_type!r}")
        if self.stride not in (1, 2):
            raise InvalidInputError(f"stride must be 1 or 2, got {self.stride}")
        if self.groups not in (1, 2):
            raise InvalidInputError(f"groups must be 1 or 2, got {self.groups}")
        if self.out_channels < 1 or self.out_channels % self.groups:
            raise InvalidInputError(f"{self.out_channels} channels not divisible by {self.groups} groups")
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise InvalidInputError(f"kernel extents must be >= 1, got {self.kernel}")

    @property
    def extended(self):
        return self.block_type in EXTENDED_TYPES

    @property
    def base_type(self):
        return self.block_type[1:] if self.extended else self.block_type


class Block(nn.Module):
    """Common bookkeeping: shapes, shuffling, optional attention."""

    def __init__(self, in_channels, spec, freq_in):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        self.freq_in = freq_in
        self.groups = effective_groups(spec.groups, in_channels, spec.out_channels)
        self.extended = spec.extended

    def _finish(self, freq_out):
        self.freq_out = freq_out
        self.attn = CTFA(self.out_channels, freq_out) if self.extended else None

    def _attend(self, y, state, new):
        if self.attn is not None:
            y, new["attn"] = self.attn(y, state.get("attn"))
        return y, new

    def _act(self, channels, freq):
        return make_activation(channels, freq, self.extended)


class ConvBlock(Block):
    """conv -> BN -> activation."""

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        self.conv = ConvNorm(in_channels, spec.out_channels, spec.kernel, spec.stride, self.groups,
                             spec.transposed, freq_in)
        self.act = self._act(spec.out_channels, self.conv.freq_out)
        self._finish(self.conv.freq_out)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        y, new["conv"] = self.conv(x, state.get("conv"))
        y = channel_shuffle(self.act(y), self.groups)
        return self._attend(y, state, new)


class DWSBlock(Block):
    """Pointwise conv -> BN -> act -> depthwise conv -> BN -> act (pointwise first)."""

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        c = spec.out_channels
        self.pw = ConvNorm(in_channels, c, (1, 1), 1, self.groups, freq_in=freq_in)
        self.act1 = self._act(c, freq_in)
        self.dw = ConvNorm(c, c, spec.kernel, spec.stride, c, spec.transposed, freq_in)
        self.act2 = self._act(c, self.dw.freq_out)
        self._finish(self.dw.freq_out)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        y, _ = self.pw(x)
        y = channel_shuffle(self.act1(y), self.groups)
        y, new["dw"] = self.dw(y, state.get("dw"))
        y = self.act2(y)
        return self._attend(y, state, new)


class GhostBlock(Block):
    """Primary conv for half the outputs; a cheap depthwise conv derives the other half."""

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        c = spec.out_channels
        self.primary_channels = -(-c // 2)
        self.ghost_channels = c - self.primary_channels
        g = effective_groups(spec.groups, in_channels, self.primary_channels)
        self.primary_groups = g
        self.primary = ConvNorm(in_channels, self.primary_channels, spec.kernel, spec.stride, g,
                                spec.transposed, freq_in)
        f = self.primary.freq_out
        self.act1 = self._act(self.primary_channels, f)
        if self.ghost_channels:
            gc = self.ghost_channels
            self.cheap = ConvNorm(gc, gc, GHOST_CHEAP_KERNEL, 1, gc, spec.transposed, f)
            self.act2 = self._act(gc, f)
        self._finish(f)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        p, new["primary"] = self.primary(x, state.get("primary"))
        p = channel_shuffle(self.act1(p), self.primary_groups)
        if self.ghost_channels:
            q, new["cheap"] = self.cheap(p[:, :self.ghost_channels], state.get("cheap"))
            p = torch.cat([p, self.act2(q)], dim=1)
        return self._attend(p, state, new)


class RepBlock(Block):
    """DWS block trained with parallel branches that fold into one at inference.

    Both the pointwise and the depthwise stage carry a duplicate conv+BN branch
    and, when input and output shapes agree, a BN-only identity branch.
    :func:`rep_merge` collapses the block into an equivalent :class:`DWSBlock`.
    """

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        c = spec.out_channels
        self.pw = nn.ModuleList(ConvNorm(in_channels, c, (1, 1), 1, self.groups, freq_in=freq_in)
                                for _ in range(2))
        self.pw_skip = tag(nn.BatchNorm2d(c), elements=c * freq_in) if in_channels == c else None
        self.act1 = self._act(c, freq_in)
        self.dw = nn.ModuleList(ConvNorm(c, c, spec.kernel, spec.stride, c, spec.transposed, freq_in)
                                for _ in range(2))
        f = self.dw[0].freq_out
        self.dw_skip = tag(nn.BatchNorm2d(c), elements=c * f) if spec.stride == 1 else None
        self.act2 = self._act(c, f)
        self._finish(f)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        y = sum(branch(x)[0] for branch in self.pw)
        if self.pw_skip is not None:
            y = y + self.pw_skip(x)
        y = channel_shuffle(self.act1(y), self.groups)
        outs = []
        for i, branch in enumerate(self.dw):
            out, new[f"dw{i}"] = branch(y, state.get(f"dw{i}"))
            outs.append(out)
        z = sum(outs)
        if self.dw_skip is not None:
            z = z + self.dw_skip(y)
        z = self.act2(z)
        return self._attend(z, state, new)


class MBBlock(Block):
    """Pointwise expand -> depthwise -> pointwise project -> extra BN, residual when shapes match.

    The hidden width equals the output channel count.
    """

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        c = spec.out_channels
        h = c
        self.hidden = h
        self.expand_groups = effective_groups(spec.groups, in_channels, h)
        self.project_groups = effective_groups(spec.groups, h, c)
        self.expand = ConvNorm(in_channels, h, (1, 1), 1, self.expand_groups, freq_in=freq_in)
        self.act1 = self._act(h, freq_in)
        self.dw = ConvNorm(h, h, spec.kernel, spec.stride, h, spec.transposed, freq_in)
        f = self.dw.freq_out
        self.act2 = self._act(h, f)
        self.project = ConvNorm(h, c, (1, 1), 1, self.project_groups, freq_in=f)
        self.out_norm = tag(nn.BatchNorm2d(c), elements=c * f)
        self.residual = in_channels == c and spec.stride == 1
        self._finish(f)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        y, _ = self.expand(x)
        y = channel_shuffle(self.act1(y), self.expand_groups)
        y, new["dw"] = self.dw(y, state.get("dw"))
        y = self.act2(y)
        y, _ = self.project(y)
        y = self.out_norm(channel_shuffle(y, self.project_groups))
        if self.residual:
            y = y + x
        return self._attend(y, state, new)


class StarBlock(Block):
    """Two pointwise expansions multiplied elementwise, then depthwise and projection.

    The hidden width is ``round(0.75 * max(Cin, Cout))``.
    """

    def __init__(self, in_channels, spec, freq_in):
        super().__init__(in_channels, spec, freq_in)
        c = spec.out_channels
        h = max(1, int(round(0.75 * max(in_channels, c))))
        self.hidden = h
        g = effective_groups(spec.groups, in_channels, h)
        self.expand_groups = g
        self.f1 = CausalConv2d(in_channels, h, (1, 1), groups=g, freq_in=freq_in)
        self.f2 = CausalConv2d(in_channels, h, (1, 1), groups=g, freq_in=freq_in)
        self.act1 = self._act(h, freq_in)
        self.dw = ConvNorm(h, h, spec.kernel, spec.stride, h, spec.transposed, freq_in)
        f = self.dw.freq_out
        self.act2 = self._act(h, f)
        self.project_groups = effective_groups(spec.groups, h, c)
        self.project = ConvNorm(h, c, (1, 1), 1, self.project_groups, freq_in=f)
        self.out_norm = tag(nn.BatchNorm2d(c), elements=c * f)
        self.residual = in_channels == c and spec.stride == 1
        self._finish(f)

    def forward(self, x, state=None):
        state = state or {}
        new = {}
        y = self.act1(self.f1(x)[0]) * self.f2(x)[0]
        y = channel_shuffle(y, self.expand_groups)
        y, new["dw"] = self.dw(y, state.get("dw"))
        y = self.act2(y)
        y, _ = self.project(y)
        y = self.out_norm(channel_shuffle(y, self.project_groups))
        if self.residual:
            y = y + x
        return self._attend(y, state, new)


_BUILDERS = {"Conv": ConvBlock, "DWS": DWSBlock, "Ghost": GhostBlock, "Rep": RepBlock,
             "MB": MBBlock, "Star": StarBlock}


def build_block(spec, in_channels, freq_in=129):
    """Instantiate the block described by ``spec``.

    Args:
        spec: A :class:`BlockSpec`.
        in_channels: Input channel count.
        freq_in: Input frequency extent.

    Returns:
        A :class:`Block` module.
    """
    if not isinstance(spec, BlockSpec):
        raise InvalidInputError(f"expected a BlockSpec, got {type(spec).__name__}")
    if in_channels < 1 or freq_in < 1:
        raise InvalidInputError(f"invalid input shape: {in_channels} channels, {freq_in} bins")
    return _BUILDERS[spec.base_type](in_channels, spec, freq_in)


def _merge_stage(branches, skip, target):
    """Sum of folded branch kernels plus the BN-only identity branch, shaped for ``target``."""
    w = sum(folded_kernel(br)[0] for br in branches)
    b = sum(folded_kernel(br)[1] for br in branches)
    if skip is not None:
        scale, shift = bn_scale_shift(skip)
        w = w + identity_kernel(target) * scale[out_channel_index(target)]
        b = b + shift
    return w, b


def rep_merge(block):
    """Fold a :class:`RepBlock` into a single-branch :class:`DWSBlock` (eval-mode equivalent).

    Raises:
        InvalidInputError: If ``block`` is not a Rep block.
    """
    if not isinstance(block, RepBlock):
        raise InvalidInputError(f"rep_merge needs a Rep block, got {type(block).__name__}")
    spec = block.spec
    dws_spec = BlockSpec("XDWS" if spec.extended else "DWS", spec.stride, spec.groups,
                         spec.out_channels, spec.kernel, spec.transposed)
    merged = DWSBlock(block.in_channels, dws_spec, block.freq_in)
    with torch.no_grad():
        for target, branches, skip in ((merged.pw, block.pw, block.pw_skip), (merged.dw, block.dw, block.dw_skip)):
            w, b = _merge_stage(list(branches), skip, target.conv)
            target.conv.conv.weight.copy_(w)
            target.conv.conv.bias.copy_(b)
            set_identity_norm(target.norm)
        merged.act1.load_state_dict(block.act1.state_dict())
        merged.act2.load_state_dict(block.act2.state_dict())
        if block.attn is not None:
            merged.attn.load_state_dict(block.attn.state_dict())
    merged.train(block.training)
    return merged


def fuse_bn(block):
    """Return a copy of ``block`` with every conv-norm pair folded (Rep blocks are merged first)."""
    block = rep_merge(block) if isinstance(block, RepBlock) else copy.deepcopy(block)
    for module in block.modules():
        if isinstance(module, ConvNorm):
            fuse_conv_norm(module)
    return block


def inference_form(module):
    """Copy of ``module`` with every Rep block replaced by its merged form."""
    module = copy.deepcopy(module)
    _replace_reps(module)
    return module


def _replace_reps(module):
    for name, child in module.named_children():
        if isinstance(child, RepBlock):
            setattr(module, name, rep_merge(child))
        else:
            _replace_reps(child)

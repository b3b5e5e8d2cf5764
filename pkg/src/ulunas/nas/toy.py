"""A small search space with closed-form quality and cost, for checking the search machinery."""

import math

from .space import SearchSpace

TYPE_GAIN = {"XConv": 0.50, "XDWS": 0.34, "XMB": 0.44}
TYPE_COST = {"XConv": 1.00, "XDWS": 0.30, "XMB": 0.55}
BASE_MACS = 4e6


def toy_space():
    """Two searched blocks: 3 types x 2 strides x 1 group x 3 widths x 1 kernel each, 324 configurations."""
    return SearchSpace(types=("XConv", "XDWS", "XMB"), strides=(1, 2), groups=(1,), channels=(12, 24, 36),
                       kernels=((3, 3),), n_blocks=2)


def toy_macs(blocks):
    """Cost grows with width squared and with the frequency extent each block keeps."""
    freq = 129
    total = BASE_MACS
    for b in blocks:
        freq = -(-freq // b.stride)
        total += TYPE_COST[b.block_type] * b.out_channels ** 2 * freq * 62.5
    return total


def toy_quality(blocks):
    """Saturating benefit of width, a loss for early downsampling, a bonus for mixed types."""
    q = 1.0
    for i, b in enumerate(blocks):
        width = math.sqrt(b.out_channels / 36)
        keep = 1.0 if b.stride == 1 else 0.8 + 0.1 * i
        q += TYPE_GAIN[b.block_type] * width * keep
    if len({b.block_type for b in blocks}) > 1:
        q += 0.05
    return q


class ToyEvaluator:
    """Closed-form ``(q, macs)`` without any training."""

    def __init__(self, space=None):
        self.space = space or toy_space()

    def __call__(self, actions, seed=0):
        blocks = self.space.decode_blocks(actions)
        return toy_quality(blocks), toy_macs(blocks)

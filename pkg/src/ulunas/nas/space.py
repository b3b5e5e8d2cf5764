"""Factorized architecture search space and its action encoding.

Each searched block contributes five consecutive nodes, in the order type,
stride, groups, channels, kernel. An action is the index of the chosen option
at a node, so an architecture is a flat integer sequence.
"""

import itertools
import math
from dataclasses import dataclass, field

from ..blocks import BlockSpec
from ..errors import InvalidInputError
from ..network import N_BLOCKS, ArchitectureSpec

FIELDS = ("type", "stride", "groups", "channels", "kernel")


def _default_fill():
    return BlockSpec("XDWS", 1, 1, 16, (1, 5))


@dataclass(frozen=True)
class SearchSpace:
    """Per-node option lists shared by every searched block.

    Attributes:
        types, strides, groups, channels, kernels: Options in canonical order.
        n_blocks: Number of searched encoder blocks (at most 5). Remaining
            encoder positions are filled with ``fill``.
        fill: Block used for unsearched positions.
    """

    types: tuple = ("XConv", "XDWS", "XMB")
    strides: tuple = (1, 2)
    groups: tuple = (1, 2)
    channels: tuple = (12, 16, 20, 24, 28, 32, 36)
    kernels: tuple = ((1, 5), (1, 7), (2, 5), (3, 3))
    n_blocks: int = N_BLOCKS
    fill: BlockSpec = field(default_factory=_default_fill)

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(tuple(k) for k in self.kernels))
        for name in ("types", "strides", "groups", "channels", "kernels"):
            opts = tuple(getattr(self, name))
            object.__setattr__(self, name, opts)
            if not opts:
                raise InvalidInputError(f"search space option list {name!r} is empty")
            if len(set(opts)) != len(opts):
                raise InvalidInputError(f"search space option list {name!r} has duplicates")
        if not 1 <= self.n_blocks <= N_BLOCKS:
            raise InvalidInputError(f"n_blocks must be in 1..{N_BLOCKS}")
        # every combination must form a valid block
        for t, s, g, c, k in itertools.product(self.types, self.strides, self.groups, self.channels, self.kernels):
            BlockSpec(t, s, g, c, k)

    @property
    def block_options(self):
        return (self.types, self.strides, self.groups, self.channels, self.kernels)

    @property
    def nodes(self):
        """Option list of every node, in sampling order."""
        return self.block_options * self.n_blocks

    @property
    def option_counts(self):
        return [len(opts) for opts in self.nodes]

    @property
    def size(self):
        return math.prod(self.option_counts)

    def encode(self, arch):
        """Action sequence of an architecture whose searched blocks lie in the space.

        Raises:
            InvalidInputError: If any field value is not among the node's options.
        """
        blocks = arch.encoder_blocks if isinstance(arch, ArchitectureSpec) else tuple(arch)
        actions = []
        for i, b in enumerate(blocks[:self.n_blocks]):
            values = (b.block_type, b.stride, b.groups, b.out_channels, tuple(b.kernel))
            for name, opts, v in zip(FIELDS, self.block_options, values):
                if v not in opts:
                    raise InvalidInputError(f"block {i}: {name} {v!r} is not a search option")
                actions.append(opts.index(v))
        return actions

    def decode_blocks(self, actions):
        actions = [int(a) for a in actions]
        counts = self.option_counts
        if len(actions) != len(counts):
            raise InvalidInputError(f"expected {len(counts)} actions, got {len(actions)}")
        for i, (a, n) in enumerate(zip(actions, counts)):
            if not 0 <= a < n:
                raise InvalidInputError(f"action {a} at node {i} outside 0..{n - 1}")
        blocks = []
        for j in range(self.n_blocks):
            chosen = [opts[a] for opts, a in zip(self.block_options, actions[5 * j:5 * j + 5])]
            blocks.append(BlockSpec(*chosen))
        return tuple(blocks)

    def decode(self, actions):
        """Architecture for an action sequence (unsearched positions use ``fill``)."""
        blocks = self.decode_blocks(actions)
        return ArchitectureSpec(blocks + (self.fill,) * (N_BLOCKS - self.n_blocks))

    def all_actions(self):
        """Every action sequence in lexicographic order."""
        return itertools.product(*(range(n) for n in self.option_counts))


def encode(arch, space=None):
    return (space or SearchSpace()).encode(arch)


def decode(actions, space=None):
    return (space or SearchSpace()).decode(actions)

"""Autoregressive LSTM policy over the search-space nodes."""

import torch
from torch import nn


class Controller(nn.Module):
    """Samples one option per node, each conditioned on all previous choices.

    Node ``i`` embeds the action taken at node ``i - 1`` (a learned start vector
    for node 0), advances a shared LSTM cell and maps the hidden state to
    option logits with a node-specific linear layer. Output layers start at
    zero, so the initial policy is uniform.

    Args:
        option_counts: Number of options per node.
        embed_size: Embedding width.
        hidden_size: LSTM width.
    """

    def __init__(self, option_counts, embed_size=100, hidden_size=200):
        super().__init__()
        self.option_counts = list(option_counts)
        self.hidden_size = hidden_size
        self.start = nn.Parameter(torch.randn(embed_size) * 0.1)
        self.embeds = nn.ModuleList(nn.Embedding(n, embed_size) for n in self.option_counts[:-1])
        self.cell = nn.LSTMCell(embed_size, hidden_size)
        self.heads = nn.ModuleList(nn.Linear(hidden_size, n) for n in self.option_counts)
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def _run(self, n, actions=None, generator=None):
        h = self.start.new_zeros(n, self.hidden_size)
        c = torch.zeros_like(h)
        x = self.start.expand(n, -1)
        chosen, logp, entropy = [], 0.0, 0.0
        for i, head in enumerate(self.heads):
            h, c = self.cell(x, (h, c))
            log_probs = torch.log_softmax(head(h), dim=-1)
            if actions is None:
                a = torch.multinomial(log_probs.detach().exp(), 1, generator=generator).squeeze(1)
            else:
                a = actions[:, i]
            chosen.append(a)
            logp = logp + log_probs.gather(1, a[:, None]).squeeze(1)
            probs = log_probs.exp()
            entropy = entropy - torch.where(probs > 0, probs * log_probs, torch.zeros_like(probs)).sum(-1)
            if i < len(self.embeds):
                x = self.embeds[i](a)
        return torch.stack(chosen, dim=1), logp, entropy

    @torch.no_grad()
    def sample(self, n, generator=None):
        """Draw ``n`` action sequences.

        Returns:
            ``(actions [n, nodes] long, log_prob [n])``.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        actions, logp, _ = self._run(n, generator=generator)
        return actions, logp

    def log_prob(self, actions):
        """Differentiable log-probability of each row of ``actions``."""
        actions = torch.as_tensor(actions, dtype=torch.long)
        return self._run(actions.shape[0], actions=actions)[1]

    def node_probs(self, actions):
        """Per-node probability tables given the prefixes in ``actions`` (for inspection)."""
        actions = torch.as_tensor(actions, dtype=torch.long)
        n = actions.shape[0]
        h = self.start.new_zeros(n, self.hidden_size)
        c = torch.zeros_like(h)
        x = self.start.expand(n, -1)
        out = []
        with torch.no_grad():
            for i, head in enumerate(self.heads):
                h, c = self.cell(x, (h, c))
                out.append(torch.softmax(head(h), dim=-1))
                if i < len(self.embeds):
                    x = self.embeds[i](actions[:, i])
        return out


def sample(policy, n, generator=None):
    """Functional alias of :meth:`Controller.sample`, returning a list of ``(actions, log_prob)``."""
    actions, logp = policy.sample(n, generator)
    return [(a.tolist(), float(lp)) for a, lp in zip(actions, logp)]

"""Policy-gradient and Metropolis-Hastings search over categorical spaces.

The policy is a small LSTM that emits one categorical distribution per
step of a search space; training is plain REINFORCE with a batch-mean
baseline. The MH sampler walks the same spaces with a symmetric wrapped
proposal and keeps the best point it ever evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn


class PolicyAgent(nn.Module):
    """Recurrent policy over a fixed sequence of categorical domains.

    Step t conditions on the embedding of the action taken at step t-1
    (zeros at t=0). Output heads start at zero weights, so before any
    update every step is exactly uniform.
    """

    def __init__(
        self,
        cardinalities: Sequence[int],
        embed_dim: int = 32,
        hidden_size: int = 128,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
        learning_rate: float = 0.03,
    ):
        super().__init__()
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.dtype = dtype
        self.cell = nn.LSTMCell(embed_dim, hidden_size)
        # one embedding table per step that feeds a successor
        self.embeds = nn.ModuleList(
            nn.Embedding(card, embed_dim) for card in self.cardinalities[:-1]
        )
        self.heads = nn.ModuleList(
            nn.Linear(hidden_size, card) for card in self.cardinalities
        )
        self.to(dtype)
        self._reset_parameters(generator)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=learning_rate)

    def _reset_parameters(self, generator: Optional[torch.Generator]) -> None:
        # LSTMCell's stock init lacks a generator hook, so redo it here
        k = 1.0 / math.sqrt(self.hidden_size)
        with torch.no_grad():
            for p in self.cell.parameters():
                u = torch.rand(p.shape, generator=generator, dtype=self.dtype)
                p.copy_((u * 2.0 - 1.0) * k)
            for emb in self.embeds:
                emb.weight.copy_(
                    torch.randn(emb.weight.shape, generator=generator,
                                dtype=self.dtype)
                )
            for head in self.heads:
                head.weight.zero_()
                head.bias.zero_()

    def _roll(self, actions=None, generator=None):
        """Walk the sequence, sampling when no actions are given.

        Returns the action list and the per-step log-probability terms
        (attached to the graph).
        """
        device = next(self.parameters()).device
        h = torch.zeros(1, self.hidden_size, dtype=self.dtype, device=device)
        c = torch.zeros(1, self.hidden_size, dtype=self.dtype, device=device)
        x = torch.zeros(1, self.embed_dim, dtype=self.dtype, device=device)
        chosen: list[int] = []
        terms: list[torch.Tensor] = []
        for t, head in enumerate(self.heads):
            h, c = self.cell(x, (h, c))
            logp = torch.log_softmax(head(h).squeeze(0), dim=-1)
            if actions is None:
                a = int(
                    torch.multinomial(logp.exp(), 1, generator=generator).item()
                )
            else:
                a = int(actions[t])
            chosen.append(a)
            terms.append(logp[a])
            if t < len(self.embeds):
                x = self.embeds[t](torch.tensor([a], device=device))
        return chosen, terms

    @torch.no_grad()
    def sample(self, generator: Optional[torch.Generator] = None):
        """Draw one action vector; also returns its per-step log-probs."""
        actions, terms = self._roll(generator=generator)
        return actions, [float(t) for t in terms]

    def score(self, actions: Sequence[int]) -> torch.Tensor:
        """Differentiable log-probability of a full action vector."""
        _, terms = self._roll(actions=actions)
        return torch.stack(terms).sum()


@dataclass
class Episode:
    """One sampled action vector, its sampling log-probs, and its reward.

    step_logprobs records ln P(a_t | a_<t) at sampling time (detached);
    the reward is filled in by whoever evaluated the rendered candidate.
    """

    actions: list[int]
    step_logprobs: list[float]
    reward: Optional[float] = None


def sample_episode(
    agent: PolicyAgent, generator: Optional[torch.Generator] = None
) -> Episode:
    """Draw one action vector from the policy; the reward stays unset."""
    actions, logprobs = agent.sample(generator)
    return Episode(actions, logprobs)


def reinforce_loss(agent: PolicyAgent, episodes: Sequence[Episode]) -> torch.Tensor:
    """Batch REINFORCE loss with the batch-mean reward as baseline.

    loss = mean_k( -(r_k - b) * sum_t log pi(a_t^k) ), b = mean_k r_k.
    The baseline is data, not a function of the parameters, so it only
    reduces variance without biasing the gradient.
    """
    rewards = torch.tensor([e.reward for e in episodes], dtype=agent.dtype)
    baseline = rewards.mean()
    scores = torch.stack([agent.score(e.actions) for e in episodes])
    return (-(rewards - baseline) * scores).mean()


def reinforce_update(agent: PolicyAgent, episodes: Sequence[Episode]) -> float:
    """One policy-gradient step on the agent's own optimizer."""
    agent.optimizer.zero_grad()
    loss = reinforce_loss(agent, episodes)
    loss.backward()
    agent.optimizer.step()
    return float(loss.detach())


def should_stop_early(
    reward_history: Sequence[float], window: int = 3, tol: float = 1e-4
) -> bool:
    """Stop once mean batch reward has flattened.

    Compares the mean of the last `window` iterations against the mean
    of the `window` before them; fires only after 2*window iterations.
    Operates on raw (unbaselined) batch-mean rewards.
    """
    if len(reward_history) < 2 * window:
        return False
    recent = sum(reward_history[-window:]) / window
    previous = sum(reward_history[-2 * window : -window]) / window
    return abs(recent - previous) < tol


def mh_accept_probability(delta: float, temperature: float) -> float:
    """Metropolis rule for a reward gain `delta`: min(1, exp(delta / T)).

    Never below 1 for an improving proposal, regardless of temperature.
    """
    if delta >= 0.0:
        return 1.0
    return math.exp(delta / temperature)


class MetropolisHastings:
    """Random-walk MH over a product of cyclic categorical domains.

    Proposals shift every coordinate by a uniform offset within a
    fraction of its cardinality, wrapped modulo the domain, which keeps
    the proposal symmetric. The best point seen across all evaluations
    is tracked separately from the chain state, and it is the answer:
    the chain itself is only the exploration mechanism.
    """

    def __init__(
        self,
        cardinalities: Sequence[int],
        generator: np.random.Generator,
        temperature: float = 0.1,
        step_fraction: float = 0.1,
        initial: Optional[Sequence[int]] = None,
    ):
        self.cards = tuple(int(c) for c in cardinalities)
        self.gen = generator
        self.temperature = temperature
        self.scales = tuple(
            max(1, int(round(step_fraction * c))) for c in self.cards
        )
        if initial is None:
            self.current = [int(self.gen.integers(c)) for c in self.cards]
        else:
            self.current = [int(a) for a in initial]
        self.current_reward: Optional[float] = None
        self.best: Optional[list[int]] = None
        self.best_reward = -math.inf

    def propose(self) -> list[int]:
        return [
            int((a + self.gen.integers(-s, s + 1)) % c)
            for a, s, c in zip(self.current, self.scales, self.cards)
        ]

    def _consider(self, point: Sequence[int], reward: float) -> None:
        if reward > self.best_reward:
            self.best_reward = reward
            self.best = list(point)

    def step(self, evaluate: Callable[[Sequence[int]], float]) -> bool:
        """One chain transition. Returns True if the proposal was accepted.

        The initial state is evaluated lazily on the first call, so a
        budget error from `evaluate` can surface before any proposal.
        """
        if self.current_reward is None:
            self.current_reward = float(evaluate(self.current))
            self._consider(self.current, self.current_reward)
        proposal = self.propose()
        reward = float(evaluate(proposal))
        self._consider(proposal, reward)
        accept = mh_accept_probability(
            reward - self.current_reward, self.temperature
        )
        if accept >= 1.0 or self.gen.random() < accept:
            self.current = proposal
            self.current_reward = reward
            return True
        return False

"""Semantic similarity reward and a pairwise-preference reward scorer.

The semantic reward embeds reference and candidate token sequences with a
frozen model, unit-normalizes each token's final hidden state, and matches
tokens greedily by cosine: recall averages, over reference tokens, the best
cosine against any candidate token; precision is the mirror image; the
reward is their harmonic mean. Everything runs in double precision so the
score is invariant to positive rescaling of the embeddings.

The scorer is a small trainable head over mean-pooled embeddings, fit by
ranking: it should score a (description, ground-truth comment) pair above
(description, generated comment). One optimization step minimizes
-log(sigmoid(margin)), which is ln 2 at zero margin and pushes the margin up.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RewardError


@dataclass
class RewardBreakdown:
    precision: float
    recall: float
    f1: float


def _unit_embeddings(embedder, ids: list[int]) -> torch.Tensor:
    """[len, d] unit-normalized final hidden states, double precision."""
    h = embedder.hidden_states(ids).detach().double()
    norms = h.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise RewardError("zero-norm embedding; cannot normalize")
    return h / norms


def semantic_reward(
    reference_ids: list[int], candidate_ids: list[int], embedder
) -> RewardBreakdown:
    """Greedy-matched cosine similarity between two token sequences.

    embedder must expose hidden_states(ids) -> [len, d]. Both sequences must
    be non-empty. Returns precision, recall, and their harmonic mean; with
    unit vectors all three live in [-1, 1] and identical sequences score 1.0.
    """
    if not reference_ids or not candidate_ids:
        raise RewardError("semantic reward undefined for empty sequences")
    ref = _unit_embeddings(embedder, reference_ids)
    cand = _unit_embeddings(embedder, candidate_ids)
    sim = ref @ cand.T  # [ref_len, cand_len]
    recall = float(sim.max(dim=1).values.mean())
    precision = float(sim.max(dim=0).values.mean())
    # harmonic mean is only meaningful for positive parts; cosine maxima can
    # go negative for unrelated sequences, and those floor at 0
    if precision <= 0.0 or recall <= 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return RewardBreakdown(precision=precision, recall=recall, f1=f1)


class RewardScorer(nn.Module):
    """Scalar preference score for a (description, comment) pair.

    Both sequences are embedded by the frozen embedder, mean-pooled after
    unit normalization, concatenated, and passed through a two-layer head.
    The head trains in double precision so small ranking steps resolve."""

    def __init__(self, embedder, d_model: int, d_hidden: int = 32, seed: int = 0):
        super().__init__()
        self.embedder = embedder
        torch.manual_seed(seed)
        self.fc = nn.Linear(2 * d_model, d_hidden, dtype=torch.float64)
        self.out = nn.Linear(d_hidden, 1, dtype=torch.float64)

    def _pool(self, ids: list[int]) -> torch.Tensor:
        if not ids:
            raise RewardError("cannot score an empty sequence")
        return _unit_embeddings(self.embedder, ids).mean(dim=0)

    def score(self, description_ids: list[int], comment_ids: list[int]) -> torch.Tensor:
        feat = torch.cat([self._pool(description_ids), self._pool(comment_ids)])
        return self.out(torch.tanh(self.fc(feat))).squeeze(-1)


def preference_loss(
    scorer: RewardScorer,
    description_ids: list[int],
    preferred_ids: list[int],
    other_ids: list[int],
) -> torch.Tensor:
    """-log(sigmoid(score(preferred) - score(other))); ln 2 at equal scores."""
    if preferred_ids == other_ids:
        raise RewardError("preference pair must differ")
    margin = scorer.score(description_ids, preferred_ids) - scorer.score(
        description_ids, other_ids
    )
    return F.softplus(-margin)


def preference_loss_step(
    scorer: RewardScorer,
    description_ids: list[int],
    preferred_ids: list[int],
    other_ids: list[int],
    lr: float = 0.05,
) -> float:
    """One SGD step on the ranking loss; returns the pre-step loss."""
    loss = preference_loss(scorer, description_ids, preferred_ids, other_ids)
    scorer.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in scorer.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)
    return float(loss.detach())


class TableEmbedder:
    """Context-free embedder: a fixed lookup table, one vector per token id.

    Used by tests (permutation invariance is exact under a lookup table) and
    by the reward when no trained model is wanted."""

    def __init__(self, vocab_size: int, d_model: int, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.table = torch.randn(vocab_size, d_model, generator=gen, dtype=torch.float64)
        self.d_model = d_model

    def hidden_states(self, ids: list[int]) -> torch.Tensor:
        if min(ids) < 0 or max(ids) >= self.table.size(0):
            raise RewardError("token id outside embedder table")
        return self.table[torch.tensor(ids, dtype=torch.long)]

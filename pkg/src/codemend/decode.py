"""Decoding: batched beam search, greedy, and temperature sampling.

Anything with forward_logits(ids) -> [seq, vocab] can be decoded; models
that also provide forward_logits_batch(rows) get batched beam expansion.
Scores are cumulative log-probabilities of the generated continuation in
double precision; ranking ties break toward the lower token id, then the
lexicographically smaller sequence, so decoding is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InputError, UsageError
from .tokenizer import BOS_ID, EOS_ID, SEP_ID, TokenizerModel


@dataclass
class DecodeConfig:
    beam_size: int = 4
    temperature: float = 0.5
    max_new_tokens: int = 64
    seed: int = 0
    eos_id: int | None = EOS_ID
    length_normalize: bool = False

    def validate(self) -> None:
        if self.beam_size < 1:
            raise UsageError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_new_tokens < 1:
            raise UsageError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.temperature < 0:
            raise UsageError(f"temperature must be >= 0, got {self.temperature}")


@dataclass
class BeamHypothesis:
    """A generated continuation (prompt excluded). logprob_sum is the sum of
    per-step log-probabilities of ids; finished means EOS was generated or
    the step cap was hit."""

    ids: list[int]
    logprob_sum: float
    finished: bool


def _last_logprob_rows(model, rows: list[list[int]]) -> list[list[float]]:
    """Double-precision next-token log-probabilities for each row."""
    if hasattr(model, "forward_logits_batch"):
        logits = model.forward_logits_batch(rows)[:, -1, :]
    else:
        logits = torch.stack([model.forward_logits(r)[-1] for r in rows])
    return F.log_softmax(logits.double(), dim=-1).tolist()


def beam_search(model, prompt_ids: list[int], cfg: DecodeConfig) -> list[BeamHypothesis]:
    """Expand cfg.beam_size hypotheses in lockstep and return up to that many
    finished candidates, best first.

    Per step, every live hypothesis is extended by every vocabulary token and
    the top beam_size extensions survive, ranked by cumulative log-probability
    (ties: lower token id, then lower parent index). Generating eos_id retires
    a hypothesis into the finished pool without consuming further steps.
    Ranking uses raw sums unless length_normalize is set, in which case final
    ordering divides by generated length."""
    cfg.validate()
    if not prompt_ids:
        raise InputError("beam_search requires a non-empty prompt")
    with torch.no_grad():
        live = [BeamHypothesis([], 0.0, False)]
        pool: list[BeamHypothesis] = []
        for _ in range(cfg.max_new_tokens):
            if not live:
                break
            rows = [prompt_ids + h.ids for h in live]
            logprobs = _last_logprob_rows(model, rows)
            candidates = []
            for i, h in enumerate(live):
                base = h.logprob_sum
                for v, lp in enumerate(logprobs[i]):
                    candidates.append((base + lp, v, i))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_live = []
            for score, v, i in candidates[: cfg.beam_size]:
                hyp = BeamHypothesis(live[i].ids + [v], score, False)
                if cfg.eos_id is not None and v == cfg.eos_id:
                    hyp.finished = True
                    pool.append(hyp)
                else:
                    new_live.append(hyp)
            live = new_live
            # once beam_size finished candidates all strictly beat every live
            # score, no extension (log-probs are <= 0) can change the top-k
            if not cfg.length_normalize and live and len(pool) >= cfg.beam_size:
                kth = sorted(pool, key=lambda h: -h.logprob_sum)[cfg.beam_size - 1]
                if max(h.logprob_sum for h in live) < kth.logprob_sum:
                    live = []
        for h in live:
            h.finished = True  # step cap reached
            pool.append(h)

    def rank_key(h: BeamHypothesis):
        score = h.logprob_sum / len(h.ids) if cfg.length_normalize and h.ids else h.logprob_sum
        return (-score, h.ids)

    pool.sort(key=rank_key)
    return pool[: cfg.beam_size]


def greedy_decode(model, prompt_ids: list[int], cfg: DecodeConfig) -> list[int]:
    """Pick the most probable token each step (ties to the lower id); stops
    at eos_id or after max_new_tokens. Returns the generated ids."""
    cfg.validate()
    if not prompt_ids:
        raise InputError("greedy_decode requires a non-empty prompt")
    ids: list[int] = []
    with torch.no_grad():
        for _ in range(cfg.max_new_tokens):
            row = _last_logprob_rows(model, [prompt_ids + ids])[0]
            best = max(row)
            v = row.index(best)
            ids.append(v)
            if cfg.eos_id is not None and v == cfg.eos_id:
                break
    return ids


def sample_temperature(model, prompt_ids: list[int], cfg: DecodeConfig) -> list[int]:
    """Sample token-by-token from softmax(logits / temperature) with a
    generator seeded from cfg.seed. temperature == 0 falls back to greedy.
    Same seed and prompt give the same sample."""
    cfg.validate()
    if cfg.temperature == 0:
        return greedy_decode(model, prompt_ids, cfg)
    if not prompt_ids:
        raise InputError("sample_temperature requires a non-empty prompt")
    gen = torch.Generator().manual_seed(cfg.seed)
    ids: list[int] = []
    with torch.no_grad():
        for _ in range(cfg.max_new_tokens):
            row = prompt_ids + ids
            if hasattr(model, "forward_logits_batch"):
                logits = model.forward_logits_batch([row])[0, -1, :]
            else:
                logits = model.forward_logits(row)[-1]
            probs = F.softmax(logits.double() / cfg.temperature, dim=-1)
            v = int(torch.multinomial(probs, 1, generator=gen))
            ids.append(v)
            if cfg.eos_id is not None and v == cfg.eos_id:
                break
    return ids


def build_prompt(
    tokenizer: TokenizerModel,
    instruction: str,
    input_text: str,
    max_len: int,
    reserve: int,
) -> list[int]:
    """[BOS] instruction "\\n" input [SEP], left-truncated so that reserve
    tokens of generation still fit under max_len. Mirrors training packing."""
    body = tokenizer.encode(instruction + "\n" + input_text)
    budget = max_len - 2 - reserve
    if budget < 0:
        raise InputError(f"reserve {reserve} exceeds max_len {max_len}")
    if len(body) > budget:
        body = body[len(body) - budget :]
    return [BOS_ID] + body + [SEP_ID]


def hypothesis_text(tokenizer: TokenizerModel, hyp_ids: list[int]) -> str:
    """Decode generated ids to text; specials (EOS in particular) drop out."""
    return tokenizer.decode(hyp_ids)

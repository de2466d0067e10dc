"""PPO fine-tuning of the comment generator.

The policy starts as a copy of the supervised model; a frozen copy of it
anchors the KL term. Episodes are sampled comment generations conditioned on
a description prompt. The terminal reward is the semantic F1 of the generated
comment against the ground-truth comment (embedded by a frozen model: the
anchor copy by default, or any stronger frozen embedder the caller passes),
minus a length penalty for exceeding a token cap.

Advantages come from GAE over a per-token value head; the policy loss is the
clipped surrogate, plus value MSE, plus kl_coef times a squared pull of each
sampled action's log-probability toward the anchor's. Divergence itself is
measured as the sampled mean(log pi - log ref); each inner epoch measures it
before stepping and stops the update early once it crosses the ceiling
(kl_ceiling, default 10 x kl_target).

Behavior log-probabilities are computed by one full-sequence forward right
after sampling, and update epochs recompute log-probabilities the same way
(one forward per episode, no cross-episode padding), so on the first inner
epoch the probability ratios are exactly 1.
"""

from __future__ import annotations

import copy
import csv
import random
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import InstructRecord
from .decode import DecodeConfig, greedy_decode
from .errors import DataError, UsageError
from .model import CausalLM
from .reward import semantic_reward
from .tokenizer import BOS_ID, EOS_ID, NUM_SPECIALS, SEP_ID, TokenizerModel
from .trainer import AdamState, adam_step, init_adam_state

REWARD_SOURCES = ("semantic_f1", "learned_scorer")


@dataclass
class PPOConfig:
    updates: int = 50
    rollouts_per_update: int = 16
    ppo_epochs: int = 4
    clip_epsilon: float = 0.2
    kl_coef: float = 0.1
    kl_target: float = 1.0
    kl_ceiling: float | None = None  # None -> 10 * kl_target
    gamma: float = 1.0
    gae_lambda: float = 0.95
    learning_rate: float = 1e-4
    value_coef: float = 0.5
    grad_clip: float = 1.0
    max_new_tokens: int = 16
    temperature: float = 1.0
    length_penalty: float = 0.0
    length_cap: int | None = None
    reward_source: str = "semantic_f1"
    seed: int = 0

    def validate(self) -> None:
        if self.reward_source not in REWARD_SOURCES:
            raise UsageError(
                f"reward_source must be one of {REWARD_SOURCES}, got {self.reward_source!r}"
            )
        if self.updates < 0 or self.rollouts_per_update < 1 or self.ppo_epochs < 1:
            raise UsageError("updates/rollouts/ppo_epochs out of range")
        if not (0 < self.clip_epsilon < 1):
            raise UsageError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")

    def ceiling(self) -> float:
        return self.kl_ceiling if self.kl_ceiling is not None else 10.0 * self.kl_target


class ValueHead(nn.Module):
    """Scalar state value read from the policy's final hidden states."""

    def __init__(self, d_model: int, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.proj = nn.Linear(d_model, 1)
        nn.init.zeros_(self.proj.bias)
        nn.init.normal_(self.proj.weight, std=0.01)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj(hidden).squeeze(-1)


@dataclass
class Episode:
    prompt_ids: list[int]
    action_ids: list[int]          # sampled tokens, EOS included if emitted
    behavior_logprobs: list[float]  # log pi_old(a_t | prefix)
    ref_logprobs: list[float]       # log pi_ref(a_t | prefix), frozen anchor
    values: list[float]             # V(s_t) at rollout time
    reward: float
    advantages: list[float] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)


@dataclass
class PPOStats:
    update: int
    mean_reward: float
    kl: float
    clip_fraction: float
    applied_epochs: int
    early_stopped: bool


def content_tokens(ids: list[int]) -> list[int]:
    """Generated ids with specials stripped (what the comment text is)."""
    return [t for t in ids if t >= NUM_SPECIALS]


def _sequence_logprobs(model: CausalLM, full: list[int], prompt_len: int) -> torch.Tensor:
    """log p(action_t | prefix) for every action position, double precision.

    One forward over the whole sequence; row prompt_len-1+j predicts action j.
    Differentiable when called with gradients enabled."""
    idx = torch.tensor([full], dtype=torch.long)
    logits = model(idx)[0]
    rows = logits[prompt_len - 1 : len(full) - 1]
    logprobs = F.log_softmax(rows.double(), dim=-1)
    actions = torch.tensor(full[prompt_len:], dtype=torch.long)
    return logprobs[torch.arange(len(actions)), actions]


def episode_reward(
    action_ids: list[int],
    reference_ids: list[int],
    embedder,
    cfg: PPOConfig,
    scorer=None,
) -> float:
    """Terminal reward for one generation; empty content scores 0."""
    content = content_tokens(action_ids)
    if not content:
        return 0.0
    if cfg.reward_source == "learned_scorer":
        if scorer is None:
            raise UsageError("reward_source=learned_scorer requires a scorer")
        with torch.no_grad():
            base = float(scorer.score(reference_ids, content))
    else:
        base = semantic_reward(reference_ids, content, embedder).f1
    if cfg.length_cap is not None and cfg.length_penalty > 0:
        base -= cfg.length_penalty * max(0, len(content) - cfg.length_cap)
    return base


def compute_gae(episode: Episode, cfg: PPOConfig) -> None:
    """Fill advantages and returns in place. The reward lands on the last
    action; the value after the final action is 0 (episode ends there)."""
    k = len(episode.action_ids)
    adv = [0.0] * k
    next_value = 0.0
    next_adv = 0.0
    for t in reversed(range(k)):
        r_t = episode.reward if t == k - 1 else 0.0
        delta = r_t + cfg.gamma * next_value - episode.values[t]
        next_adv = delta + cfg.gamma * cfg.gae_lambda * next_adv
        adv[t] = next_adv
        next_value = episode.values[t]
    episode.advantages = adv
    episode.returns = [a + v for a, v in zip(adv, episode.values)]


def rollout_episode(
    policy: CausalLM,
    value_head: ValueHead,
    prompt_ids: list[int],
    reference_ids: list[int],
    cfg: PPOConfig,
    gen: torch.Generator,
    embedder,
    scorer=None,
) -> Episode:
    """Sample one generation and record everything PPO needs about it."""
    if not prompt_ids:
        raise DataError("rollout requires a non-empty prompt")
    limit = policy.config.max_len - len(prompt_ids)
    if limit < 1:
        raise DataError("prompt leaves no room to generate")
    steps = min(cfg.max_new_tokens, limit)
    ids = list(prompt_ids)
    with torch.no_grad():
        for _ in range(steps):
            logits = policy(torch.tensor([ids], dtype=torch.long))[0, -1]
            if cfg.temperature != 1.0:
                logits = logits / cfg.temperature
            probs = F.softmax(logits.double(), dim=-1)
            v = int(torch.multinomial(probs, 1, generator=gen))
            ids.append(v)
            if v == EOS_ID:
                break
        actions = ids[len(prompt_ids) :]
        # one full-sequence pass for behavior log-probs, anchor log-probs,
        # and values; update epochs redo the same shapes so ratios start at 1
        behavior = _sequence_logprobs(policy, ids, len(prompt_ids)).tolist()
        hidden = policy.hidden(torch.tensor([ids], dtype=torch.long))[0]
        values = value_head(hidden[len(prompt_ids) - 1 : len(ids) - 1]).tolist()
    episode = Episode(
        prompt_ids=list(prompt_ids),
        action_ids=actions,
        behavior_logprobs=behavior,
        ref_logprobs=[],
        values=values,
        reward=episode_reward(actions, reference_ids, embedder, cfg, scorer),
    )
    compute_gae(episode, cfg)
    return episode


def ppo_update(
    policy: CausalLM,
    value_head: ValueHead,
    episodes: list[Episode],
    cfg: PPOConfig,
    adam: AdamState,
    params: list[nn.Parameter],
) -> PPOStats:
    """Run up to ppo_epochs clipped-surrogate steps over the episode batch."""
    if not episodes:
        raise DataError("ppo_update needs at least one episode")
    flat_adv = torch.tensor(
        [a for ep in episodes for a in ep.advantages], dtype=torch.float64
    )
    if len(flat_adv) > 1 and float(flat_adv.std()) > 0:
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
    flat_ret = torch.tensor(
        [r for ep in episodes for r in ep.returns], dtype=torch.float64
    )
    flat_behavior = torch.tensor(
        [b for ep in episodes for b in ep.behavior_logprobs], dtype=torch.float64
    )
    flat_ref = torch.tensor(
        [b for ep in episodes for b in ep.ref_logprobs], dtype=torch.float64
    )
    mean_reward = sum(ep.reward for ep in episodes) / len(episodes)

    kl_measured = 0.0
    clip_fraction = 0.0
    applied = 0
    early = False
    for _epoch in range(cfg.ppo_epochs):
        logp_parts = []
        val_parts = []
        for ep in episodes:
            full = ep.prompt_ids + ep.action_ids
            logp_parts.append(_sequence_logprobs(policy, full, len(ep.prompt_ids)))
            hidden = policy.hidden(torch.tensor([full], dtype=torch.long))[0]
            val_parts.append(
                value_head(hidden[len(ep.prompt_ids) - 1 : len(full) - 1]).double()
            )
        logp = torch.cat(logp_parts)
        values = torch.cat(val_parts)
        # measured KL is the sampled mean(log pi - log ref); the penalty that
        # actually takes gradients is the squared form, whose gradient pulls
        # each sampled log-prob toward the anchor instead of uniformly down
        # (the plain sampled mean has an anti-likelihood gradient that leaks
        # probability onto never-sampled tokens)
        kl_measured = float((logp.detach() - flat_ref).mean())
        if kl_measured > cfg.ceiling():
            early = True
            break
        kl_penalty = 0.5 * ((logp - flat_ref) ** 2).mean()
        ratio = torch.exp(logp - flat_behavior)
        clipped = torch.clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon)
        policy_loss = -torch.min(ratio * flat_adv, clipped * flat_adv).mean()
        value_loss = F.mse_loss(values, flat_ret)
        loss = policy_loss + cfg.value_coef * value_loss + cfg.kl_coef * kl_penalty
        for p in params:
            p.grad = None
        loss.backward()
        adam_step(params, adam, cfg.learning_rate, grad_clip=cfg.grad_clip)
        clip_fraction = float(((ratio - 1.0).abs() > cfg.clip_epsilon).double().mean())
        applied += 1
    return PPOStats(
        update=-1,
        mean_reward=mean_reward,
        kl=kl_measured,
        clip_fraction=clip_fraction,
        applied_epochs=applied,
        early_stopped=early,
    )


@dataclass
class RLResult:
    policy: CausalLM
    curve: list[PPOStats]


def comment_prompt(record: InstructRecord, tokenizer: TokenizerModel, max_len: int, reserve: int) -> list[int]:
    """The packed prefix a comment generation conditions on."""
    body = tokenizer.encode(record.instruction + "\n" + record.input)
    budget = max_len - 2 - reserve
    if len(body) > budget:
        body = body[len(body) - budget :]
    return [BOS_ID] + body + [SEP_ID]


def percentile_length_cap(
    records: list[InstructRecord], tokenizer: TokenizerModel, pct: float = 0.95
) -> int:
    """Token-length cap: the pct quantile of reference comment lengths."""
    lengths = sorted(len(tokenizer.encode(r.output)) for r in records)
    if not lengths:
        raise DataError("no records to derive a length cap from")
    idx = min(len(lengths) - 1, max(0, int(round(pct * (len(lengths) - 1)))))
    return lengths[idx]


def rl_finetune(
    policy: CausalLM,
    records: list[InstructRecord],
    tokenizer: TokenizerModel,
    cfg: PPOConfig,
    scorer=None,
    embedder=None,
) -> RLResult:
    """PPO-tune the policy on comment records; mutates and returns the policy.

    A deep copy of the incoming policy is frozen as the KL anchor. The
    semantic reward embeds tokens with `embedder` if given (any frozen model
    exposing hidden_states), else with that same frozen copy. With
    updates == 0 the policy is returned untouched."""
    cfg.validate()
    if not records:
        raise DataError("rl_finetune needs comment records")
    reference = copy.deepcopy(policy)
    reference.eval()
    for p in reference.parameters():
        p.requires_grad_(False)
    if embedder is None:
        embedder = reference
    curve: list[PPOStats] = []
    if cfg.updates == 0:
        return RLResult(policy=policy, curve=curve)

    value_head = ValueHead(policy.config.d_model, seed=cfg.seed)
    params = [p for p in policy.parameters() if p.requires_grad] + list(
        value_head.parameters()
    )
    adam = init_adam_state(params)
    gen = torch.Generator().manual_seed(cfg.seed)
    picker = random.Random(cfg.seed)
    prompts = [
        comment_prompt(r, tokenizer, policy.config.max_len, cfg.max_new_tokens)
        for r in records
    ]
    refs = [tokenizer.encode(r.output) for r in records]
    for i, ref_ids in enumerate(refs):
        if not ref_ids:
            raise DataError(f"record {i} has an empty reference comment")

    for update in range(cfg.updates):
        episodes = []
        for _ in range(cfg.rollouts_per_update):
            j = picker.randrange(len(records))
            ep = rollout_episode(
                policy, value_head, prompts[j], refs[j], cfg, gen, embedder, scorer
            )
            with torch.no_grad():
                full = ep.prompt_ids + ep.action_ids
                ep.ref_logprobs = _sequence_logprobs(
                    reference, full, len(ep.prompt_ids)
                ).tolist()
            episodes.append(ep)
        stats = ppo_update(policy, value_head, episodes, cfg, adam, params)
        stats.update = update
        curve.append(stats)
    return RLResult(policy=policy, curve=curve)


def evaluate_comment_reward(
    model: CausalLM,
    records: list[InstructRecord],
    tokenizer: TokenizerModel,
    embedder,
    max_new_tokens: int = 16,
) -> float:
    """Mean semantic F1 of greedy comment generations over the records."""
    if not records:
        raise DataError("nothing to evaluate")
    total = 0.0
    dcfg = DecodeConfig(beam_size=1, max_new_tokens=max_new_tokens, eos_id=EOS_ID)
    for rec in records:
        prompt = comment_prompt(rec, tokenizer, model.config.max_len, max_new_tokens)
        gen_ids = greedy_decode(model, prompt, dcfg)
        content = content_tokens(gen_ids)
        ref = tokenizer.encode(rec.output)
        if not content:
            continue  # empty generation scores 0
        total += semantic_reward(ref, content, embedder).f1
    return total / len(records)


def write_reward_curve(curve: list[PPOStats], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["update", "mean_reward", "kl", "clip_fraction"])
        for s in curve:
            w.writerow(
                [s.update, f"{s.mean_reward:.6f}", f"{s.kl:.6f}", f"{s.clip_fraction:.6f}"]
            )

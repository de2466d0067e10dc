import math

import pytest
import torch

from codemend.dataset import InstructRecord, Task
from codemend.errors import DataError, UsageError
from codemend.model import ModelConfig, build_model
from codemend.ppo import (
    Episode,
    PPOConfig,
    ValueHead,
    compute_gae,
    content_tokens,
    episode_reward,
    percentile_length_cap,
    ppo_update,
    rl_finetune,
    rollout_episode,
    _sequence_logprobs,
    write_reward_curve,
)
from codemend.reward import TableEmbedder
from codemend.tokenizer import EOS_ID, SEP_ID, TokenizerModel
from codemend.trainer import init_adam_state

torch.set_num_threads(1)

TINY = ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=32, vocab_size=280, max_len=48)


def _records(n=6):
    return [
        InstructRecord(Task.COMMENT, "condense", f"note number {i} talks a lot", f"n{i}")
        for i in range(n)
    ]


# --- config -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(UsageError):
        PPOConfig(reward_source="votes").validate()
    with pytest.raises(UsageError):
        PPOConfig(clip_epsilon=1.5).validate()
    with pytest.raises(UsageError):
        PPOConfig(rollouts_per_update=0).validate()


def test_ceiling_defaults_to_ten_targets():
    assert PPOConfig(kl_target=0.5).ceiling() == 5.0
    assert PPOConfig(kl_target=0.5, kl_ceiling=2.0).ceiling() == 2.0


def test_content_tokens_strips_specials():
    assert content_tokens([5, EOS_ID, 7, SEP_ID, 300]) == [5, 7, 300]
    assert content_tokens([EOS_ID]) == []


# --- GAE --------------------------------------------------------------------


def test_gae_hand_computed_values():
    # two actions, terminal reward 1, gamma 1, lambda 0.95, values [0.5, 0.25]:
    # delta_1 = 1 - 0.25 = 0.75 -> A_1 = 0.75
    # delta_0 = 0 + 0.25 - 0.5 = -0.25 -> A_0 = -0.25 + 0.95 * 0.75 = 0.4625
    ep = Episode(
        prompt_ids=[1],
        action_ids=[10, 11],
        behavior_logprobs=[0.0, 0.0],
        ref_logprobs=[0.0, 0.0],
        values=[0.5, 0.25],
        reward=1.0,
    )
    compute_gae(ep, PPOConfig(gamma=1.0, gae_lambda=0.95))
    assert ep.advantages == pytest.approx([0.4625, 0.75], abs=1e-12)
    assert ep.returns == pytest.approx([0.9625, 1.0], abs=1e-12)


def test_gae_single_action():
    ep = Episode([1], [10], [0.0], [0.0], values=[0.3], reward=2.0)
    compute_gae(ep, PPOConfig())
    assert ep.advantages == pytest.approx([1.7], abs=1e-12)
    assert ep.returns == pytest.approx([2.0], abs=1e-12)


# --- rewards ------------------------------------------------------------------


def test_episode_reward_empty_content_is_zero():
    emb = TableEmbedder(vocab_size=300, d_model=8, seed=0)
    assert episode_reward([EOS_ID], [5, 6], emb, PPOConfig()) == 0.0


def test_episode_reward_identity_is_one():
    emb = TableEmbedder(vocab_size=300, d_model=8, seed=0)
    got = episode_reward([5, 6, EOS_ID], [5, 6], emb, PPOConfig())
    assert got == pytest.approx(1.0, abs=1e-9)


def test_episode_reward_length_penalty():
    emb = TableEmbedder(vocab_size=300, d_model=8, seed=0)
    cfg = PPOConfig(length_penalty=0.1, length_cap=2)
    capped = episode_reward([5, 6, 7, 8], [5, 6, 7, 8], emb, cfg)
    assert capped == pytest.approx(1.0 - 0.1 * 2, abs=1e-9)


def test_percentile_length_cap():
    tok = TokenizerModel()
    recs = [
        InstructRecord(Task.COMMENT, "c", "x", "a" * (i + 1)) for i in range(10)
    ]  # encoded lengths 1..10
    assert percentile_length_cap(recs, tok, pct=0.95) == 10
    assert percentile_length_cap(recs, tok, pct=0.5) == 5


# --- sequence logprobs --------------------------------------------------------


def test_sequence_logprobs_match_stepwise():
    model = build_model(TINY, seed=0)
    full = [1, 5, 9, 30, 12]
    prompt_len = 2
    got = _sequence_logprobs(model, full, prompt_len)
    with torch.no_grad():
        for j, action in enumerate(full[prompt_len:]):
            logits = model.forward_logits(full[: prompt_len + j])[-1]
            lp = torch.log_softmax(logits.double(), dim=-1)[action]
            assert float(got[j]) == pytest.approx(float(lp), abs=1e-9)


# --- rollouts -----------------------------------------------------------------


def test_rollout_episode_shapes_and_ratio_one():
    policy = build_model(TINY, seed=0)
    head = ValueHead(TINY.d_model, seed=0)
    emb = TableEmbedder(vocab_size=TINY.vocab_size, d_model=8, seed=0)
    gen = torch.Generator().manual_seed(0)
    cfg = PPOConfig(max_new_tokens=6)
    ep = rollout_episode(policy, head, [1, 40, 2], [50, 51], cfg, gen, emb)
    k = len(ep.action_ids)
    assert 1 <= k <= 6
    assert len(ep.behavior_logprobs) == k
    assert len(ep.values) == k
    assert len(ep.advantages) == k
    # recomputing with the unchanged policy reproduces behavior logprobs
    redo = _sequence_logprobs(policy, ep.prompt_ids + ep.action_ids, len(ep.prompt_ids))
    ratios = torch.exp(redo.detach() - torch.tensor(ep.behavior_logprobs, dtype=torch.float64))
    assert torch.allclose(ratios, torch.ones_like(ratios), atol=0, rtol=0)


def test_rollout_rejects_full_prompt():
    policy = build_model(TINY, seed=0)
    head = ValueHead(TINY.d_model, seed=0)
    emb = TableEmbedder(vocab_size=TINY.vocab_size, d_model=8, seed=0)
    gen = torch.Generator().manual_seed(0)
    with pytest.raises(DataError):
        rollout_episode(policy, head, [1] * TINY.max_len, [5], PPOConfig(), gen, emb)


# --- updates ------------------------------------------------------------------


def _one_episode(policy, head, emb, seed=0):
    gen = torch.Generator().manual_seed(seed)
    cfg = PPOConfig(max_new_tokens=5)
    ep = rollout_episode(policy, head, [1, 20, 2], [30, 31], cfg, gen, emb)
    with torch.no_grad():
        ep.ref_logprobs = _sequence_logprobs(
            policy, ep.prompt_ids + ep.action_ids, len(ep.prompt_ids)
        ).tolist()
    return ep


def test_zero_advantages_and_coefs_leave_policy_bitwise_unchanged():
    policy = build_model(TINY, seed=1)
    head = ValueHead(TINY.d_model, seed=1)
    emb = TableEmbedder(vocab_size=TINY.vocab_size, d_model=8, seed=0)
    ep = _one_episode(policy, head, emb)
    ep.advantages = [0.0] * len(ep.action_ids)
    ep.returns = [0.0] * len(ep.action_ids)
    ep.values = [0.0] * len(ep.action_ids)
    before = [p.detach().clone() for p in policy.parameters()]
    cfg = PPOConfig(ppo_epochs=1, value_coef=0.0, kl_coef=0.0, learning_rate=1e-3)
    params = [p for p in policy.parameters() if p.requires_grad]
    ppo_update(policy, head, [ep], cfg, init_adam_state(params), params)
    for p, b in zip(policy.parameters(), before):
        assert torch.equal(p, b)


def test_update_reports_zero_kl_and_clip_on_first_epoch():
    policy = build_model(TINY, seed=2)
    head = ValueHead(TINY.d_model, seed=2)
    emb = TableEmbedder(vocab_size=TINY.vocab_size, d_model=8, seed=0)
    eps = [_one_episode(policy, head, emb, seed=s) for s in range(3)]
    cfg = PPOConfig(ppo_epochs=1, learning_rate=1e-4)
    params = [p for p in policy.parameters() if p.requires_grad] + list(head.parameters())
    stats = ppo_update(policy, head, eps, cfg, init_adam_state(params), params)
    # ref logprobs were computed with the same (unstepped) policy, so the
    # sampled KL is exactly 0 and no ratio can leave the clip window
    assert stats.kl == 0.0
    assert stats.clip_fraction == 0.0
    assert stats.applied_epochs == 1
    assert not stats.early_stopped


def test_kl_ceiling_stops_epochs_early():
    policy = build_model(TINY, seed=3)
    head = ValueHead(TINY.d_model, seed=3)
    emb = TableEmbedder(vocab_size=TINY.vocab_size, d_model=8, seed=0)
    ep = _one_episode(policy, head, emb)
    # pretend the anchor is far away: measured KL is immediately huge
    ep.ref_logprobs = [lp - 100.0 for lp in ep.ref_logprobs]
    cfg = PPOConfig(ppo_epochs=4, kl_target=1.0)  # ceiling 10 < 100
    params = [p for p in policy.parameters() if p.requires_grad]
    before = [p.detach().clone() for p in policy.parameters()]
    stats = ppo_update(policy, head, [ep], cfg, init_adam_state(params), params)
    assert stats.early_stopped
    assert stats.applied_epochs == 0
    assert stats.kl > 10.0
    for p, b in zip(policy.parameters(), before):
        assert torch.equal(p, b)


# --- rl_finetune ----------------------------------------------------------------


def test_zero_updates_returns_policy_untouched():
    tok = TokenizerModel()
    policy = build_model(TINY, seed=4)
    before = [p.detach().clone() for p in policy.parameters()]
    result = rl_finetune(policy, _records(), tok, PPOConfig(updates=0))
    assert result.policy is policy
    assert result.curve == []
    for p, b in zip(policy.parameters(), before):
        assert torch.equal(p, b)


def test_rl_finetune_runs_and_logs(tmp_path):
    tok = TokenizerModel()
    policy = build_model(TINY, seed=5)
    cfg = PPOConfig(
        updates=2, rollouts_per_update=3, ppo_epochs=2, max_new_tokens=4,
        learning_rate=1e-4, seed=0,
    )
    result = rl_finetune(policy, _records(), tok, cfg)
    assert len(result.curve) == 2
    assert [s.update for s in result.curve] == [0, 1]
    for s in result.curve:
        assert s.kl <= cfg.ceiling()
        assert 0.0 <= s.clip_fraction <= 1.0
        assert s.applied_epochs >= 1

    path = str(tmp_path / "curve.csv")
    write_reward_curve(result.curve, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "update,mean_reward,kl,clip_fraction"
    assert len(lines) == 3


def test_rl_finetune_is_seed_deterministic():
    tok = TokenizerModel()
    cfg = PPOConfig(updates=1, rollouts_per_update=2, ppo_epochs=1, max_new_tokens=4, seed=7)
    p1 = build_model(TINY, seed=6)
    p2 = build_model(TINY, seed=6)
    r1 = rl_finetune(p1, _records(), tok, cfg)
    r2 = rl_finetune(p2, _records(), tok, cfg)
    assert r1.curve == r2.curve
    for a, b in zip(p1.parameters(), p2.parameters()):
        assert torch.equal(a, b)


def test_rl_finetune_rejects_empty_records():
    tok = TokenizerModel()
    with pytest.raises(DataError):
        rl_finetune(build_model(TINY, seed=0), [], tok, PPOConfig(updates=1))

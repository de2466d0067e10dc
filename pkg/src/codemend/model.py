"""Decoder-only causal transformer.

Pre-norm blocks, learned absolute position embeddings, multi-head attention
with an additive -inf causal mask, GELU feed-forward, and an output head
tied to the token embedding. Defaults are desk scale: two layers suffice for
the synthetic corpus while keeping CPU budgets honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, InputError


@dataclass
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 512
    max_len: int = 256

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise DataError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise DataError(f"{f.name} must be positive")

    def to_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown model config keys: {sorted(unknown)}")
        missing = known - set(d)
        if missing:
            raise DataError(f"missing model config keys: {sorted(missing)}")
        cfg = cls(**{k: int(v) for k, v in d.items()})
        cfg.validate()
        return cfg


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        mask = torch.tril(torch.ones(cfg.max_len, cfg.max_len, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)
        # [b, heads, t, head_dim]
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~self.causal_mask[:t, :t], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).contiguous().view(b, t, d)
        return self.proj(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc = nn.Linear(cfg.d_model, cfg.d_ff)
        self.out = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.out(F.gelu(self.fc(self.ln2(x))))
        return x


class CausalLM(nn.Module):
    """Batched causal language model over token ids.

    forward(idx) maps [batch, seq] int64 ids to [batch, seq, vocab] logits;
    position j attends only to positions <= j, so prefix logits are
    unaffected by suffix edits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.wte = nn.Embedding(config.vocab_size, config.d_model)
        self.wpe = nn.Embedding(config.max_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.lm_head.weight = self.wte.weight  # tied
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def _check_ids(self, idx: torch.Tensor) -> None:
        if idx.dim() != 2:
            raise InputError(f"expected [batch, seq] ids, got shape {tuple(idx.shape)}")
        if idx.size(1) == 0:
            raise InputError("empty sequence")
        if idx.size(1) > self.config.max_len:
            raise InputError(
                f"sequence length {idx.size(1)} exceeds max_len {self.config.max_len}"
            )
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.config.vocab_size):
            raise InputError("token id outside vocabulary")

    def hidden(self, idx: torch.Tensor) -> torch.Tensor:
        """Final-layer hidden states after the last LayerNorm: [b, t, d_model]."""
        self._check_ids(idx)
        t = idx.size(1)
        pos = torch.arange(t, device=idx.device)
        x = self.wte(idx) + self.wpe(pos)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden(idx))

    # single-sequence conveniences used by decoding and reward code; any
    # object with these two methods can stand in for the model there
    def forward_logits(self, ids: list[int]) -> torch.Tensor:
        """Logits for one sequence: [seq, vocab]."""
        idx = torch.tensor([ids], dtype=torch.long)
        return self.forward(idx)[0]

    def forward_logits_batch(self, rows: list[list[int]]) -> torch.Tensor:
        """Logits for same-length sequences: [batch, seq, vocab]."""
        if len({len(r) for r in rows}) != 1:
            raise InputError("forward_logits_batch requires same-length rows")
        idx = torch.tensor(rows, dtype=torch.long)
        return self.forward(idx)

    def hidden_states(self, ids: list[int]) -> torch.Tensor:
        """Final hidden states for one sequence: [seq, d_model]."""
        idx = torch.tensor([ids], dtype=torch.long)
        return self.hidden(idx)[0]


def build_model(config: ModelConfig, seed: int = 0) -> CausalLM:
    """Construct a model with seeded initialization (same seed, same weights)."""
    torch.manual_seed(seed)
    return CausalLM(config)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of trainable parameters (head tied to embedding)."""
    d, ff, v, ml = config.d_model, config.d_ff, config.vocab_size, config.max_len
    per_layer = (
        2 * d            # ln1
        + 3 * d * d + 3 * d  # qkv
        + d * d + d      # attn proj
        + 2 * d          # ln2
        + d * ff + ff    # fc
        + ff * d + d     # mlp out
    )
    return v * d + ml * d + config.n_layers * per_layer + 2 * d

"""Supervised training: masked cross-entropy over packed sequences, a
hand-rolled Adam with global gradient-norm clipping, and a central-difference
gradient checker used to validate the backward pass.
"""

from __future__ import annotations

import copy
import csv
import math
import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .dataset import PackedSequence, SplitManifest
from .errors import DataError, TrainingDiverged
from .model import CausalLM
from .tokenizer import PAD_ID


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 2
    epochs: int = 3
    seed: int = 0
    grad_clip: float = 1.0
    max_steps: int | None = None
    log_every: int = 25


@dataclass
class CurvePoint:
    step: int
    split: str
    loss: float


@dataclass
class TrainResult:
    steps: int
    curve: list[CurvePoint] = field(default_factory=list)
    final_train_loss: float = math.nan


def lm_loss(model: CausalLM, batch: list[PackedSequence]) -> torch.Tensor:
    """Mean next-token cross-entropy over the scored positions of a batch.

    Sequences are right-padded with PAD; padded and unscored positions are
    excluded from the mean. Raises DataError if nothing is scored."""
    if not batch:
        raise DataError("empty batch")
    width = max(len(ps.ids) for ps in batch) - 1
    b = len(batch)
    inputs = torch.full((b, width), PAD_ID, dtype=torch.long)
    targets = torch.full((b, width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(b, width, dtype=torch.bool)
    for i, ps in enumerate(batch):
        n = len(ps.ids) - 1
        seq = torch.tensor(ps.ids, dtype=torch.long)
        inputs[i, :n] = seq[:-1]
        targets[i, :n] = seq[1:]
        mask[i, :n] = torch.tensor(ps.loss_mask[1:], dtype=torch.bool)
    if not mask.any():
        raise DataError("batch has no scored positions")
    logits = model(inputs)
    nll = F.cross_entropy(
        logits.reshape(-1, logits.size(-1)), targets.reshape(-1), reduction="none"
    ).view(b, width)
    return nll[mask].mean()


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators and the shared step counter."""

    step: int
    exp_avg: list[torch.Tensor]
    exp_avg_sq: list[torch.Tensor]


def init_adam_state(params: list[torch.nn.Parameter]) -> AdamState:
    return AdamState(
        step=0,
        exp_avg=[torch.zeros_like(p) for p in params],
        exp_avg_sq=[torch.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[torch.nn.Parameter],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    grad_clip: float | None = 1.0,
) -> float:
    """One Adam update with bias correction, reading .grad from each param.

    Gradients are first scaled so their global L2 norm is at most grad_clip.
    Returns the pre-clip global norm."""
    grads = []
    for p in params:
        if p.grad is None:
            raise DataError("adam_step: parameter missing gradient")
        grads.append(p.grad)
    total = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads))
    norm = float(total)
    scale = 1.0
    if grad_clip is not None and norm > grad_clip:
        scale = grad_clip / (norm + 1e-12)
    b1, b2 = betas
    state.step += 1
    t = state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            gs = g * scale if scale != 1.0 else g
            m.mul_(b1).add_(gs, alpha=1 - b1)
            v.mul_(b2).addcmul_(gs, gs, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))
    return norm


# --- supervised loop -------------------------------------------------------


def evaluate_loss(
    model: CausalLM, packed: list[PackedSequence], ids: list[int], batch_size: int = 8
) -> float:
    """Mean loss over the given record indices, without gradients."""
    if not ids:
        raise DataError("evaluate_loss: empty id list")
    total, count = 0.0, 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(ids), batch_size):
            chunk = [packed[j] for j in ids[i : i + batch_size]]
            total += float(lm_loss(model, chunk)) * len(chunk)
            count += len(chunk)
    model.train()
    return total / count


def train_supervised(
    model: CausalLM,
    packed: list[PackedSequence],
    manifest: SplitManifest,
    cfg: TrainConfig,
) -> TrainResult:
    """Train on manifest.train with per-epoch validation on manifest.valid.

    Batch order reshuffles each epoch from cfg.seed. Non-finite loss raises
    TrainingDiverged with the step and learning rate. The returned curve
    holds train points every log_every steps plus one valid point per epoch."""
    if not manifest.train:
        raise DataError("manifest has no training records")
    rng = random.Random(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    state = init_adam_state(params)
    result = TrainResult(steps=0)
    model.train()
    last_loss = math.nan
    done = False
    for _epoch in range(cfg.epochs):
        order = list(manifest.train)
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [packed[i] for i in order[start : start + cfg.batch_size]]
            loss = lm_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {result.steps}, lr={cfg.learning_rate}"
                )
            model.zero_grad(set_to_none=True)
            loss.backward()
            adam_step(params, state, cfg.learning_rate, grad_clip=cfg.grad_clip)
            last_loss = float(loss.detach())
            result.steps += 1
            if result.steps % cfg.log_every == 0:
                result.curve.append(CurvePoint(result.steps, "train", last_loss))
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                done = True
                break
        if manifest.valid:
            vl = evaluate_loss(model, packed, manifest.valid, cfg.batch_size)
            result.curve.append(CurvePoint(result.steps, "valid", vl))
        if done:
            break
    result.final_train_loss = last_loss
    return result


def write_loss_curve(points: list[CurvePoint], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["step", "split", "loss"])
        for pt in points:
            w.writerow([pt.step, pt.split, f"{pt.loss:.6f}"])


# --- gradient verification -------------------------------------------------


@dataclass
class FDReport:
    max_rel_err: float
    per_param: dict[str, float]


def finite_diff_check(
    model: CausalLM,
    batch: list[PackedSequence],
    step_size: float = 1e-4,
    samples_per_param: int = 4,
    seed: int = 0,
    grad_hook=None,
) -> FDReport:
    """Compare backward-pass gradients against central finite differences.

    Runs on a double-precision clone of the model (the step size is far below
    single-precision resolution of the loss). For each named parameter a few
    coordinates are sampled and perturbed by +/- step_size; the relative error
    is |fd - grad| / max(|fd|, |grad|, 1e-8). grad_hook, if given, maps
    (name, grad_tensor) to a replacement tensor before comparison, so tests
    can prove the harness notices a wrong gradient."""
    model64 = copy.deepcopy(model).double()
    model64.train()

    def loss_value() -> torch.Tensor:
        return lm_loss(model64, batch)

    loss = loss_value()
    model64.zero_grad(set_to_none=True)
    loss.backward()
    grads = {}
    for name, p in model64.named_parameters():
        if p.grad is None:
            raise DataError(f"no gradient for {name}")
        g = p.grad.detach().clone()
        if grad_hook is not None:
            g = grad_hook(name, g)
        grads[name] = g

    rng = random.Random(seed)
    per_param: dict[str, float] = {}
    with torch.no_grad():
        for name, p in model64.named_parameters():
            flat = p.data.view(-1)
            n = flat.numel()
            picks = rng.sample(range(n), min(samples_per_param, n))
            worst = 0.0
            for i in picks:
                orig = float(flat[i])
                flat[i] = orig + step_size
                up = float(loss_value())
                flat[i] = orig - step_size
                down = float(loss_value())
                flat[i] = orig
                fd = (up - down) / (2.0 * step_size)
                ag = float(grads[name].view(-1)[i])
                rel = abs(fd - ag) / max(abs(fd), abs(ag), 1e-8)
                worst = max(worst, rel)
            per_param[name] = worst
    return FDReport(max_rel_err=max(per_param.values()), per_param=per_param)

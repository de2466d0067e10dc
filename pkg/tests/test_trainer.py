import math

import pytest
import torch

from codemend.dataset import InstructRecord, SplitManifest, Task, pack_sequence
from codemend.errors import DataError, TrainingDiverged
from codemend.model import ModelConfig, build_model
from codemend.tokenizer import TokenizerModel
from codemend.trainer import (
    TrainConfig,
    adam_step,
    evaluate_loss,
    finite_diff_check,
    init_adam_state,
    lm_loss,
    train_supervised,
    write_loss_curve,
)

torch.set_num_threads(1)

TINY = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=300, max_len=48)


def _packed(n=6, mask_inputs=False):
    tok = TokenizerModel()
    recs = [
        InstructRecord(Task.COMMENT, "shorten", f"alpha beta {i}", f"w{i}")
        for i in range(n)
    ]
    return [pack_sequence(r, tok, TINY.max_len, mask_inputs=mask_inputs) for r in recs]


# --- lm_loss ----------------------------------------------------------------


def test_lm_loss_matches_manual_cross_entropy():
    model = build_model(TINY, seed=0)
    ps = _packed(1)[0]
    loss = lm_loss(model, [ps])
    with torch.no_grad():
        logits = model.forward_logits(ps.ids[:-1])
        logp = torch.log_softmax(logits, dim=-1)
        nlls = [
            -float(logp[j, ps.ids[j + 1]])
            for j in range(len(ps.ids) - 1)
            if ps.loss_mask[j + 1]
        ]
    assert math.isclose(float(loss.detach()), sum(nlls) / len(nlls), rel_tol=1e-5)


def test_lm_loss_ignores_padding_rows():
    # a batch with very different lengths: the padded tail must not be scored
    model = build_model(TINY, seed=0)
    tok = TokenizerModel()
    short = pack_sequence(InstructRecord(Task.COMMENT, "s", "a", "b"), tok, 48)
    long = pack_sequence(InstructRecord(Task.COMMENT, "s", "a" * 30, "b"), tok, 48)
    with torch.no_grad():
        both = float(lm_loss(model, [short, long]))
        alone = (
            float(lm_loss(model, [short])) * sum(short.loss_mask)
            + float(lm_loss(model, [long])) * sum(long.loss_mask)
        ) / (sum(short.loss_mask) + sum(long.loss_mask))
    assert math.isclose(both, alone, rel_tol=1e-5)


def test_lm_loss_rejects_empty_and_unscored():
    model = build_model(TINY, seed=0)
    with pytest.raises(DataError):
        lm_loss(model, [])
    ps = _packed(1)[0]
    ps.loss_mask = [False] * len(ps.ids)
    with pytest.raises(DataError):
        lm_loss(model, [ps])


# --- Adam -------------------------------------------------------------------


def test_adam_matches_torch_reference():
    torch.manual_seed(0)
    a = torch.nn.Linear(8, 8)
    b = torch.nn.Linear(8, 8)
    b.load_state_dict(a.state_dict())
    x = torch.randn(16, 8)
    y = torch.randn(16, 8)

    params_a = list(a.parameters())
    state = init_adam_state(params_a)
    ref = torch.optim.Adam(b.parameters(), lr=1e-3)
    for _ in range(5):
        la = ((a(x) - y) ** 2).mean()
        a.zero_grad()
        la.backward()
        adam_step(params_a, state, lr=1e-3, grad_clip=None)

        lb = ((b(x) - y) ** 2).mean()
        ref.zero_grad()
        lb.backward()
        ref.step()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.allclose(pa, pb, atol=2e-5, rtol=0)


def test_adam_clip_rescales_to_global_norm():
    p = torch.nn.Parameter(torch.zeros(4))
    p.grad = torch.full((4,), 10.0)
    state = init_adam_state([p])
    norm = adam_step([p], state, lr=1.0, grad_clip=1.0)
    assert math.isclose(norm, 20.0, rel_tol=1e-6)
    # global norm 20 clips to 1, so each grad entry becomes 0.5 and the
    # first moment after one step is (1 - beta1) * 0.5
    assert torch.allclose(state.exp_avg[0], torch.full((4,), 0.05), atol=1e-7)


def test_adam_requires_gradients():
    p = torch.nn.Parameter(torch.zeros(2))
    with pytest.raises(DataError):
        adam_step([p], init_adam_state([p]), lr=1e-3)


# --- train_supervised -------------------------------------------------------


def test_training_reduces_loss_and_logs_curve(tmp_path):
    model = build_model(TINY, seed=0)
    packed = _packed(8)
    manifest = SplitManifest(train=[0, 1, 2, 3, 4, 5], valid=[6, 7], test=[], seed=0)
    before = evaluate_loss(model, packed, manifest.train)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=3, epochs=25, seed=0, log_every=5)
    result = train_supervised(model, packed, manifest, cfg)
    after = evaluate_loss(model, packed, manifest.train)
    assert after < before * 0.7
    assert result.steps == 50
    assert any(pt.split == "train" for pt in result.curve)
    assert sum(pt.split == "valid" for pt in result.curve) == 25
    assert result.final_train_loss > 0

    path = str(tmp_path / "curve.csv")
    write_loss_curve(result.curve, path)
    lines = open(path).read().splitlines()
    assert lines[0] == "step,split,loss"
    assert len(lines) == len(result.curve) + 1


def test_training_is_deterministic():
    packed = _packed(6)
    manifest = SplitManifest(train=[0, 1, 2, 3], valid=[4, 5], test=[], seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=2, seed=1)
    m1 = build_model(TINY, seed=0)
    m2 = build_model(TINY, seed=0)
    r1 = train_supervised(m1, packed, manifest, cfg)
    r2 = train_supervised(m2, packed, manifest, cfg)
    assert [(p.step, p.split, p.loss) for p in r1.curve] == [
        (p.step, p.split, p.loss) for p in r2.curve
    ]
    for pa, pb in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(pa, pb)


def test_max_steps_stops_early():
    packed = _packed(6)
    manifest = SplitManifest(train=[0, 1, 2, 3, 4, 5], valid=[], test=[], seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=2, epochs=100, max_steps=7)
    result = train_supervised(build_model(TINY, seed=0), packed, manifest, cfg)
    assert result.steps == 7


def test_divergence_raises():
    packed = _packed(4)
    manifest = SplitManifest(train=[0, 1, 2, 3], valid=[], test=[], seed=0)
    cfg = TrainConfig(learning_rate=1e6, batch_size=4, epochs=50, grad_clip=None)
    with pytest.raises(TrainingDiverged):
        train_supervised(build_model(TINY, seed=0), packed, manifest, cfg)


def test_empty_train_split_rejected():
    packed = _packed(2)
    manifest = SplitManifest(train=[], valid=[0, 1], test=[], seed=0)
    with pytest.raises(DataError):
        train_supervised(build_model(TINY, seed=0), packed, manifest, TrainConfig())


# --- finite differences -----------------------------------------------------


@pytest.fixture(scope="module")
def fd_setup():
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=280, max_len=32)
    model = build_model(cfg, seed=0)
    batch = _packed(2)
    return model, batch


def test_finite_diff_confirms_autograd(fd_setup):
    model, batch = fd_setup
    report = finite_diff_check(model, batch, samples_per_param=2, seed=0)
    assert report.max_rel_err <= 1e-3
    assert set(report.per_param) == {n for n, _ in model.named_parameters()}


def test_finite_diff_detects_injected_fault(fd_setup):
    model, batch = fd_setup

    def corrupt(name, grad):
        return grad * 1.05 if name == "blocks.0.fc.weight" else grad

    clean = finite_diff_check(model, batch, samples_per_param=2, seed=0)
    faulty = finite_diff_check(model, batch, samples_per_param=2, seed=0, grad_hook=corrupt)
    assert faulty.per_param["blocks.0.fc.weight"] > 0.04
    assert faulty.per_param["blocks.0.fc.weight"] > 10 * clean.per_param["blocks.0.fc.weight"]

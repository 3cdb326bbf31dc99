import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import scalar_adam
from promptdistill.autodiff import Tensor
from promptdistill.errors import ConfigError, NumericError, ValidationError
from promptdistill.model import EncoderConfig, PromptNet, TemplateModel
from promptdistill.metrics import roc_auc
from promptdistill.synthdata import DatasetSpec, generate_dataset, lesion_intensity_scores
from promptdistill.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    adaptive_weight,
    classification_loss,
    epoch_order,
    lr_at,
    one_hot,
    predict_scores,
    prompt_loss,
    stage2_objective,
    train_promptnet,
    train_template,
)

TINY_CE = EncoderConfig(in_channels=1, stem_channels=4, stage_channels=(4, 4, 4), groups=2, feature_dim=4)
TINY_NE = EncoderConfig(in_channels=3, stem_channels=4, stage_channels=(4, 4, 4), groups=2, feature_dim=4)


@pytest.fixture(scope="module")
def toy():
    spec = DatasetSpec(n_samples=16, volume_extent=8, noise_sigma=0.1, grade_gap=0.8, grade_spread=0.02,
                       ce_signal_strength=4.0, seed=2)
    return generate_dataset(spec)


@pytest.fixture(scope="module")
def toy_template(toy):
    return train_template(toy, TINY_CE, TrainConfig(epochs=2, base_lr=1e-3, seed=0))


# -- schedule and optimizer -------------------------------------------------------


def test_lr_schedule_full_scale():
    cfg = TrainConfig.full_scale()
    assert [lr_at(e, cfg) for e in (0, 29, 30, 59, 60, 99)] == pytest.approx([1e-5, 1e-5, 1e-6, 1e-6, 1e-7, 1e-7], rel=1e-12)
    lrs = [lr_at(e, cfg) for e in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        lr_at(-1, cfg)


def test_adam_first_step():
    p = {"w": Tensor(np.array([1.0]))}
    adam_step(p, {"w": np.array([0.5])}, OptimizerState(), lr=1e-3)
    # bias-corrected first step moves by lr * g / (|g| + eps)
    assert abs((1.0 - p["w"].data[0]) - 1e-3 * 0.5 / (0.5 + 1e-8)) <= 1e-15
    assert abs(1.0 - p["w"].data[0] - 9.99999e-4) <= 1e-9


def test_adam_matches_scalar_oracle(rng):
    grads = rng.normal(size=100)
    p = {"w": Tensor(np.array([0.3]))}
    state = OptimizerState()
    ours = []
    for g in grads:
        adam_step(p, {"w": np.array([g])}, state, lr=1e-2, weight_decay=1e-3)
        ours.append(p["w"].data[0])
    ref = scalar_adam(0.3, grads.tolist(), lr=1e-2, wd=1e-3)
    assert max(abs(a - b) for a, b in zip(ours, ref)) <= 1e-12


def test_adam_rejects_nonfinite():
    p = {"w": Tensor(np.array([1.0]))}
    with pytest.raises(NumericError, match="w"):
        adam_step(p, {"w": np.array([np.nan])}, OptimizerState(), lr=1e-3)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(prompt_mode="sometimes")
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0)


# -- objective pieces -------------------------------------------------------------


def test_adaptive_weight_examples():
    assert adaptive_weight([[1.0, 0.0]], [[0.0, 1.0]])[0] == 1.0
    assert adaptive_weight([[0.3, 0.7]], [[0.3, 0.7]])[0] == 0.0
    with pytest.raises(ValidationError):
        adaptive_weight([[0.5, 0.6]], [[0.5, 0.5]])
    with pytest.raises(ValidationError):
        adaptive_weight([[0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])


probs = st.floats(0, 1, allow_subnormal=False).map(lambda a: [a, 1 - a])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(probs, probs), min_size=1, max_size=8))
def test_adaptive_weight_properties(pairs):
    t = np.array([a for a, _ in pairs])
    s = np.array([b for _, b in pairs])
    w = adaptive_weight(t, s)
    assert np.all((w >= 0) & (w <= 1))
    assert np.array_equal(w == 0, np.all(t == s, axis=1))
    np.testing.assert_array_equal(w, adaptive_weight(s, t))


def test_prompt_loss_reaches_only_student(rng):
    z_cef = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    z_cf = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    loss = prompt_loss(z_cef, z_cf)
    assert loss.shape == (3,)
    np.testing.assert_allclose(loss.data, np.abs(z_cef.data - z_cf.data).mean(axis=1), rtol=0, atol=1e-15)
    loss.mean().backward()
    assert z_cef.grad is None and z_cf.grad is not None
    with pytest.raises(ValidationError):
        prompt_loss(z_cef, Tensor(np.zeros((3, 5))))


def test_stage2_degenerate_cases_are_bitwise(rng):
    logits = rng.normal(size=(4, 2))
    y = one_hot([0, 1, 1, 0])
    z_cef, z_cf = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))

    def value(mode, weights=None, fixed=1.0):
        c, _ = classification_loss(Tensor(logits), y)
        p = prompt_loss(Tensor(z_cef), Tensor(z_cf))
        return stage2_objective(c, p, weights, mode, fixed).item()

    plain = classification_loss(Tensor(logits), y)[0].item()
    assert value("off") == plain
    assert value("adaptive", np.zeros(4)) == plain
    assert value("fixed", fixed=0.0) == plain
    assert value("adaptive", np.ones(4)) == value("fixed")
    with pytest.raises(ValidationError):
        value("adaptive", np.ones(3))
    with pytest.raises(ConfigError):
        value("sometimes")


def test_epoch_order_is_seeded():
    a, b = epoch_order(3, 1, 20), epoch_order(3, 1, 20)
    assert np.array_equal(a, b) and sorted(a.tolist()) == list(range(20))
    assert not np.array_equal(a, epoch_order(3, 2, 20)) and not np.array_equal(a, epoch_order(4, 1, 20))


# -- protocol ---------------------------------------------------------------------


def test_template_fits_separable_toy(toy):
    # the threshold oracle confirms the toy set is separable before training
    assert roc_auc(lesion_intensity_scores(toy, "ce"), [s.label for s in toy]) == 1.0
    ckpt = train_template(toy, TINY_CE, TrainConfig(epochs=15, base_lr=1e-2, weight_decay=0.0, lr_decay_epochs=()))
    history = [h["class_loss"] for h in ckpt.metadata["history"]]
    assert history[-1] < history[0]
    scores = predict_scores(ckpt, toy)
    accuracy = np.mean((scores >= 0.5) == np.array([s.label for s in toy]))
    assert accuracy >= 0.95


def test_template_is_deterministic(toy):
    cfg = TrainConfig(epochs=1, seed=4)
    a, b = train_template(toy, TINY_CE, cfg), train_template(toy, TINY_CE, cfg)
    assert a.model.digest() == b.model.digest()
    assert a.model.digest() != train_template(toy, TINY_CE, TrainConfig(epochs=1, seed=5)).model.digest()


def test_off_mode_ignores_template(toy, toy_template):
    cfg = TrainConfig(epochs=1, prompt_mode="off", seed=1)
    with_t = train_promptnet(toy, toy_template, TINY_NE, cfg)
    without = train_promptnet(toy, None, TINY_NE, cfg)
    assert with_t.model.digest() == without.model.digest()
    assert with_t.metadata["template_digest"] is None


def test_template_stays_frozen(toy, toy_template):
    before = toy_template.model.digest()
    for mode in ("fixed", "adaptive"):
        ckpt = train_promptnet(toy, toy_template, TINY_NE, TrainConfig(epochs=1, prompt_mode=mode))
        assert ckpt.metadata["template_digest"] == before
    assert toy_template.model.digest() == before
    assert all(t.grad is None for t in toy_template.model.params.values())


def test_prompt_modes_differ(toy, toy_template):
    digests = {
        mode: train_promptnet(toy, toy_template, TINY_NE, TrainConfig(epochs=1, prompt_mode=mode)).model.digest()
        for mode in ("off", "fixed", "adaptive")
    }
    assert len(set(digests.values())) == 3


def test_batch_trace(toy, toy_template):
    traces = []
    train_promptnet(toy, toy_template, TINY_NE, TrainConfig(epochs=1, prompt_mode="adaptive"), on_batch=traces.append)
    assert len(traces) == 4
    seen = sorted(sid for t in traces for sid in t.subject_ids)
    assert seen == sorted(s.subject_id for s in toy)
    for t in traces:
        assert np.all((t.w_adaptive >= 0) & (t.w_adaptive <= 1))
        np.testing.assert_array_equal(t.w_adaptive, adaptive_weight(t.teacher_probs, t.student_probs))


def test_stage2_configuration_errors(toy, toy_template):
    with pytest.raises(ConfigError, match="needs a template"):
        train_promptnet(toy, None, TINY_NE, TrainConfig(epochs=1, prompt_mode="fixed"))
    wide = EncoderConfig(in_channels=3, stem_channels=4, stage_channels=(4, 4, 4), groups=2, feature_dim=8)
    with pytest.raises(ConfigError, match="feature_dim"):
        train_promptnet(toy, toy_template, wide, TrainConfig(epochs=1))


def test_divergence_is_reported(toy):
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        train_template(toy, TINY_CE, TrainConfig(epochs=3, base_lr=1e300))


def test_predict_scores_channel_checks(toy, toy_template):
    net = PromptNet.init(TINY_NE, 0)
    assert predict_scores(net, toy).shape == (16,)
    with pytest.raises(ValidationError, match="NE channels only"):
        predict_scores(net, toy, channels="all")
    with pytest.raises(ValidationError, match="channel mismatch"):
        predict_scores(TemplateModel.init(TINY_CE, 0), toy, channels="ne")
    scores = predict_scores(toy_template, toy)
    assert np.all((scores >= 0) & (scores <= 1))

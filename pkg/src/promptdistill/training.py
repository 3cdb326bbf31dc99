"""Objectives, optimizer, schedule and the two-stage training protocol.

Stage 1 fits the template on contrast-enhanced channels with cross-entropy
plus L2 weight decay. Stage 2 freezes it and trains PromptNet on the
non-enhanced channels with

    off       CE
    fixed     CE + c * mean_i |z_cef_i - z_cf_i|
    adaptive  CE + mean_i w_i |z_cef_i - z_cf_i|,   w_i = mean |p_teacher_i - p_student_i|

where |.| is the per-sample mean absolute difference and ``w_i`` is treated
as a constant coefficient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, l1_mean_distance, no_grad, softmax, softmax_cross_entropy
from .errors import ConfigError, NumericError, ValidationError
from .model import EncoderConfig, ModelCheckpoint, PromptNet, TemplateModel, check_volume
from .synthdata import CHANNEL_COUNTS, Sample, stack

log = logging.getLogger(__name__)

PROMPT_MODES = ("off", "fixed", "adaptive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (9, 18)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-4
    prompt_mode: str = "adaptive"
    fixed_prompt_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """100 epochs, lr 1e-5 decayed tenfold at epochs 30 and 60, batch 4."""
        base = dict(epochs=100, batch_size=4, base_lr=1e-5, lr_decay_epochs=(30, 60), lr_decay_factor=0.1)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant step schedule."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    drops = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.base_lr * config.lr_decay_factor ** drops


# -- objective pieces -----------------------------------------------------------


def one_hot(labels, k: int = 2) -> np.ndarray:
    return np.eye(k)[np.asarray(labels, dtype=int)]


def classification_loss(logits: Tensor, one_hot_labels) -> tuple[Tensor, np.ndarray]:
    """The grading loss: batch-mean softmax cross-entropy. Returns (loss, probs)."""
    return softmax_cross_entropy(logits, one_hot_labels)


def prompt_loss(z_cef, z_cf: Tensor) -> Tensor:
    """Per-sample mean absolute feature difference, shape [N].

    ``z_cef`` is detached, so gradients reach only the complementary branch.
    """
    z_cef = z_cef.detach() if isinstance(z_cef, Tensor) else Tensor(z_cef)
    if z_cef.ndim != 2 or z_cef.shape != z_cf.shape:
        raise ValidationError(f"prompt loss needs equal [N,d] features, got {z_cef.shape} and {z_cf.shape}")
    return l1_mean_distance(z_cf, z_cef, axis=1)


def adaptive_weight(teacher_probs, student_probs) -> np.ndarray:
    """Per-sample gap ``mean_k |p_teacher - p_student|`` in [0, 1]; a plain array (no gradient)."""
    t = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs, dtype=np.float64)
    s = np.asarray(student_probs.data if isinstance(student_probs, Tensor) else student_probs, dtype=np.float64)
    if t.shape != s.shape or t.ndim != 2:
        raise ValidationError(f"probability batches must share an [N,k] shape, got {t.shape} and {s.shape}")
    for name, p in (("teacher", t), ("student", s)):
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
            raise ValidationError(f"{name} rows are not probability distributions")
    return np.abs(t - s).mean(axis=1)


def stage2_objective(
    class_loss: Tensor,
    prompt_losses: Tensor | None,
    weights: np.ndarray | None,
    mode: str,
    fixed_weight: float = 1.0,
) -> Tensor:
    if mode == "off":
        return class_loss
    if mode == "fixed":
        return class_loss + fixed_weight * prompt_losses.mean()
    if mode == "adaptive":
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != prompt_losses.shape:
            raise ValidationError(f"{weights.shape[0] if weights.ndim else 0} weights for {prompt_losses.shape[0]} prompt losses")
        return class_loss + (prompt_losses * weights).mean()
    raise ConfigError(f"unknown prompt mode {mode!r}")


# -- optimizer ------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    """Bias-corrected Adam; weight decay is added to the gradient as ``wd * param``.

    Parameters are updated in place. Missing gradients count as zero.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- batching -------------------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """One seeded permutation per epoch, derived from (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


@dataclass
class EpochStats:
    epoch: int
    lr: float
    class_loss: float
    prompt_loss: float | None = None
    w_adaptive: float | None = None
    objective: float = 0.0

    def line(self) -> str:
        fmt = lambda v: "-" if v is None else f"{v:.6f}"  # noqa: E731
        return (
            f"epoch={self.epoch} lr={self.lr:.3e} class_loss={self.class_loss:.6f} "
            f"prompt_loss={fmt(self.prompt_loss)} w_adaptive={fmt(self.w_adaptive)}"
        )


@dataclass
class BatchTrace:
    epoch: int
    step: int
    subject_ids: list[str]
    class_loss: np.ndarray
    prompt_loss: np.ndarray | None
    w_adaptive: np.ndarray | None
    teacher_probs: np.ndarray | None
    student_probs: np.ndarray

    CSV_HEADER = ("epoch", "step", "subject_id", "class_loss", "prompt_loss", "w_adaptive", "teacher_p1", "student_p1")

    def rows(self) -> Iterator[list[str]]:
        f = lambda a, i: "" if a is None else f"{a[i]:.10g}"  # noqa: E731
        for i, sid in enumerate(self.subject_ids):
            teacher = "" if self.teacher_probs is None else f"{self.teacher_probs[i, 1]:.10g}"
            yield [
                str(self.epoch), str(self.step), sid, f(self.class_loss, i), f(self.prompt_loss, i),
                f(self.w_adaptive, i), teacher, f"{self.student_probs[i, 1]:.10g}",
            ]


def _per_sample_ce(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")


def _grads(model) -> dict[str, np.ndarray]:
    return {name: t.grad for name, t in model.params.items()}


# -- stage 1 --------------------------------------------------------------------


def train_template(
    samples: list[Sample],
    encoder_config: EncoderConfig,
    config: TrainConfig,
    channels: str = "ce",
    on_epoch: Callable[[EpochStats], None] | None = None,
) -> ModelCheckpoint:
    """Fit a template model on ``channels`` ("ce", or "all" for the full-sequence variant)."""
    x, y = stack(samples, channels)
    if encoder_config.in_channels != x.shape[1]:
        raise ConfigError(f"encoder expects {encoder_config.in_channels} channels, {channels!r} input has {x.shape[1]}")
    check_volume(x.shape[2:])
    model = TemplateModel.init(encoder_config, config.seed)
    targets = one_hot(y)
    state = OptimizerState()
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        losses = []
        for step, idx in enumerate(batches(epoch_order(config.seed, epoch, len(y)), config.batch_size)):
            out = model.forward(x[idx])
            loss, _ = classification_loss(out.logits, targets[idx])
            _check_finite(loss.item(), epoch, step)
            model.zero_grad()
            loss.backward()
            adam_step(model.params, _grads(model), state, lr, weight_decay=config.weight_decay)
            losses.append(loss.item())
        stats = EpochStats(epoch, lr, float(np.mean(losses)), objective=float(np.mean(losses)))
        history.append(stats)
        log.info("template %s", stats.line())
        if on_epoch:
            on_epoch(stats)
    model.zero_grad()
    meta = {
        "stage": "template",
        "channels": channels,
        "seed": config.seed,
        "epochs": config.epochs,
        "train_config": config.to_dict(),
        "history": [asdict(h) for h in history],
        "final_train_loss": history[-1].class_loss if history else None,
    }
    return ModelCheckpoint(model, meta)


# -- stage 2 --------------------------------------------------------------------


def teacher_outputs(template: TemplateModel, x: np.ndarray, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-template features and probabilities for every sample, in order."""
    zs, ps = [], []
    with no_grad():
        for start in range(0, len(x), batch_size):
            out = template.forward(x[start : start + batch_size])
            zs.append(out.z_cef.data)
            ps.append(softmax(out.logits.data))
    return np.concatenate(zs), np.concatenate(ps)


def train_promptnet(
    samples: list[Sample],
    template: ModelCheckpoint | TemplateModel | None,
    encoder_config: EncoderConfig,
    config: TrainConfig,
    on_epoch: Callable[[EpochStats], None] | None = None,
    on_batch: Callable[[BatchTrace], None] | None = None,
) -> ModelCheckpoint:
    """Stage 2: train PromptNet on NE channels, guided by a frozen template.

    ``template`` may be ``None`` only when ``prompt_mode == "off"``.
    """
    mode = config.prompt_mode
    if isinstance(template, ModelCheckpoint):
        template_meta, template = template.metadata, template.model
    else:
        template_meta = {}
    if template is None and mode != "off":
        raise ConfigError(f"prompt_mode={mode!r} needs a template model")
    if template is not None and template.config.feature_dim != encoder_config.feature_dim:
        raise ConfigError(
            f"template feature_dim {template.config.feature_dim} != PromptNet feature_dim {encoder_config.feature_dim}"
        )

    x, y = stack(samples, "ne")
    if encoder_config.in_channels != x.shape[1]:
        raise ConfigError(f"PromptNet expects {encoder_config.in_channels} channels, NE input has {x.shape[1]}")
    check_volume(x.shape[2:])
    targets = one_hot(y)
    ids = [s.subject_id for s in samples]

    t_feats = t_probs = None
    template_digest = None
    if template is not None and mode != "off":
        template_digest = template.digest()
        teacher_channels = template_meta.get("channels", "ce")
        x_t, _ = stack(samples, teacher_channels)
        t_feats, t_probs = teacher_outputs(template, x_t, config.batch_size)

    model = PromptNet.init(encoder_config, config.seed)
    state = OptimizerState()
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        c_losses, p_losses, weights_seen, objectives = [], [], [], []
        for step, idx in enumerate(batches(epoch_order(config.seed, epoch, len(y)), config.batch_size)):
            out = model.forward(x[idx])
            c_loss, probs = classification_loss(out.logits, targets[idx])
            p_loss = w = None
            if mode != "off":
                p_loss = prompt_loss(Tensor(t_feats[idx]), out.z_cf)
                w = adaptive_weight(t_probs[idx], probs)
            objective = stage2_objective(c_loss, p_loss, w, mode, config.fixed_prompt_weight)
            _check_finite(objective.item(), epoch, step)
            model.zero_grad()
            objective.backward()
            adam_step(model.params, _grads(model), state, lr, weight_decay=config.weight_decay)

            c_losses.append(c_loss.item())
            objectives.append(objective.item())
            if p_loss is not None:
                p_losses.append(float(p_loss.data.mean()))
                weights_seen.append(w)
            if on_batch:
                on_batch(BatchTrace(
                    epoch, step, [ids[i] for i in idx], _per_sample_ce(probs, y[idx]),
                    None if p_loss is None else p_loss.data.copy(), w,
                    None if t_probs is None else t_probs[idx], probs,
                ))

        if template_digest is not None and template.digest() != template_digest:
            raise RuntimeError(f"template parameters changed during stage 2 (epoch {epoch})")
        stats = EpochStats(
            epoch, lr, float(np.mean(c_losses)),
            float(np.mean(p_losses)) if p_losses else None,
            float(np.mean(np.concatenate(weights_seen))) if weights_seen else None,
            float(np.mean(objectives)),
        )
        history.append(stats)
        log.info("promptnet[%s] %s", mode, stats.line())
        if on_epoch:
            on_epoch(stats)

    model.zero_grad()
    meta = {
        "stage": "promptnet",
        "prompt_mode": mode,
        "seed": config.seed,
        "epochs": config.epochs,
        "train_config": config.to_dict(),
        "template_digest": template_digest,
        "history": [asdict(h) for h in history],
        "final_train_loss": history[-1].class_loss if history else None,
    }
    return ModelCheckpoint(model, meta)


# -- inference ------------------------------------------------------------------


def predict_scores(model, samples: list[Sample], channels: str | None = None, batch_size: int = 4) -> np.ndarray:
    """Probability of class 1 per sample. PromptNet always reads NE channels only."""
    if isinstance(model, ModelCheckpoint):
        channels = channels or model.metadata.get("channels")
        model = model.model
    if isinstance(model, PromptNet):
        if channels not in (None, "ne"):
            raise ValidationError(f"PromptNet checkpoints take NE channels only, not {channels!r}")
        channels = "ne"
    channels = channels or "ce"
    if CHANNEL_COUNTS[channels] != model.config.in_channels:
        raise ValidationError(
            f"channel mismatch: model expects {model.config.in_channels} channels, {channels!r} provides {CHANNEL_COUNTS[channels]}"
        )
    x, _ = stack(samples, channels)
    scores = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            scores.append(softmax(model.forward(x[start : start + batch_size]).logits.data)[:, 1])
    return np.concatenate(scores)

"""Template (teacher) network and the two-branch PromptNet student.

Both networks share one encoder architecture:

    stem:   conv3x3x3 -> GroupNorm -> GELU
    stage:  conv3x3x3/stride 2 -> residual block -> GELU        (x3)
            residual block = conv -> GN -> GELU -> conv -> GN, plus skip
    head:   global average pool -> linear to ``feature_dim``

and a three-layer classifier ``in -> 64 -> 16 -> k`` with GELU in between.
The template encodes the contrast-enhanced channels; PromptNet runs two
encoders (non-enhanced and complementary) on the same non-enhanced input and
classifies their concatenation.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, concat, conv3d, gelu, global_avg_pool, group_norm, linear, softmax
from .container import Reader, Writer
from .errors import ConfigError, ShapeError

CLASSIFIER_WIDTHS = (64, 16)
MIN_VOLUME_EXTENT = 8
GN_EPS = 1e-5

CHECKPOINT_MAGIC = b"PDCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (8, 16, 32)
    groups: int = 4
    feature_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if len(self.stage_channels) != 3:
            raise ConfigError(f"exactly 3 residual stages are required, got {len(self.stage_channels)}")
        for name in ("in_channels", "stem_channels", "groups", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for c in (self.stem_channels, *self.stage_channels):
            if c < 1 or c % self.groups:
                raise ConfigError(f"group count {self.groups} does not divide channel count {c}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d


def check_volume(extent_or_shape) -> None:
    extents = np.atleast_1d(extent_or_shape)
    if np.any(extents < MIN_VOLUME_EXTENT):
        raise ConfigError(
            f"volume extents {tuple(int(e) for e in extents)} are too small: three stride-2 stages "
            f"need every spatial extent >= {MIN_VOLUME_EXTENT}"
        )


# -- parameter construction -----------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, prefix: str, cin: int, cout: int, k: int = 3) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.weight": _uniform(rng, (cout, cin, k, k, k), cin * k ** 3),
        f"{prefix}.bias": np.zeros(cout),
    }


def _norm_params(prefix: str, c: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gamma": np.ones(c), f"{prefix}.beta": np.zeros(c)}


def _linear_params(rng, prefix: str, fin: int, fout: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.weight": _uniform(rng, (fin, fout), fin), f"{prefix}.bias": np.zeros(fout)}


def build_encoder(config: EncoderConfig, seed, prefix: str = "encoder") -> dict[str, np.ndarray]:
    """Initial encoder parameters: fan-in uniform weights, zero biases, unit GN scales."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    p.update(_conv_params(rng, f"{prefix}.stem.conv", config.in_channels, config.stem_channels))
    p.update(_norm_params(f"{prefix}.stem.norm", config.stem_channels))
    cin = config.stem_channels
    for i, cout in enumerate(config.stage_channels, start=1):
        s = f"{prefix}.stage{i}"
        p.update(_conv_params(rng, f"{s}.down", cin, cout))
        p.update(_conv_params(rng, f"{s}.conv1", cout, cout))
        p.update(_norm_params(f"{s}.norm1", cout))
        p.update(_conv_params(rng, f"{s}.conv2", cout, cout))
        p.update(_norm_params(f"{s}.norm2", cout))
        cin = cout
    p.update(_linear_params(rng, f"{prefix}.proj", cin, config.feature_dim))
    return p


def build_classifier(rng, fin: int, n_classes: int, prefix: str = "classifier") -> dict[str, np.ndarray]:
    widths = (fin, *CLASSIFIER_WIDTHS, n_classes)
    p: dict[str, np.ndarray] = {}
    for i in range(3):
        p.update(_linear_params(rng, f"{prefix}.fc{i + 1}", widths[i], widths[i + 1]))
    return p


# -- forward passes -------------------------------------------------------------


def encode(params: dict[str, Tensor], prefix: str, config: EncoderConfig, x: Tensor) -> Tensor:
    if x.ndim != 5 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"encoder expects [N,{config.in_channels},D,H,W] input, got {x.shape} (channel mismatch)"
        )
    check_volume(x.shape[2:])
    P = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    g = config.groups

    h = conv3d(x, P("stem.conv.weight"), P("stem.conv.bias"), stride=1, padding=1)
    h = gelu(group_norm(h, g, P("stem.norm.gamma"), P("stem.norm.beta"), GN_EPS))
    for i in (1, 2, 3):
        s = f"stage{i}"
        h = conv3d(h, P(f"{s}.down.weight"), P(f"{s}.down.bias"), stride=2, padding=1)
        r = conv3d(h, P(f"{s}.conv1.weight"), P(f"{s}.conv1.bias"), stride=1, padding=1)
        r = gelu(group_norm(r, g, P(f"{s}.norm1.gamma"), P(f"{s}.norm1.beta"), GN_EPS))
        r = conv3d(r, P(f"{s}.conv2.weight"), P(f"{s}.conv2.bias"), stride=1, padding=1)
        r = group_norm(r, g, P(f"{s}.norm2.gamma"), P(f"{s}.norm2.beta"), GN_EPS)
        h = gelu(h + r)
    return linear(global_avg_pool(h), P("proj.weight"), P("proj.bias"))


def classify(params: dict[str, Tensor], prefix: str, z: Tensor) -> Tensor:
    h = z
    for i in (1, 2, 3):
        h = linear(h, params[f"{prefix}.fc{i}.weight"], params[f"{prefix}.fc{i}.bias"])
        if i < 3:
            h = gelu(h)
    return h


class TemplateOutput(NamedTuple):
    z_cef: Tensor
    logits: Tensor


class PromptNetOutput(NamedTuple):
    z_nef: Tensor
    z_cf: Tensor
    logits: Tensor


class _Model:
    kind = ""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray], n_classes: int = 2):
        self.config = config
        self.n_classes = n_classes
        self.params: dict[str, Tensor] = {
            name: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name) for name, v in params.items()
        }

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def digest(self) -> str:
        """SHA-256 over parameter names and raw bytes (frozen-teacher checks)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def architecture(self) -> dict:
        return {"kind": self.kind, "encoder": self.config.to_dict(), "n_classes": self.n_classes}


class TemplateModel(_Model):
    kind = "template"

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, n_classes: int = 2) -> "TemplateModel":
        rng = np.random.default_rng(seed)
        params = build_encoder(config, rng, "encoder")
        params.update(build_classifier(rng, config.feature_dim, n_classes))
        return cls(config, params, n_classes)

    def forward(self, x) -> TemplateOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        z = encode(self.params, "encoder", self.config, x)
        return TemplateOutput(z, classify(self.params, "classifier", z))


class PromptNet(_Model):
    kind = "promptnet"

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, n_classes: int = 2) -> "PromptNet":
        rng = np.random.default_rng(seed)
        params = build_encoder(config, rng, "ne_branch")
        params.update(build_encoder(config, rng, "comp_branch"))
        params.update(build_classifier(rng, 2 * config.feature_dim, n_classes))
        return cls(config, params, n_classes)

    def forward(self, x) -> PromptNetOutput:
        x = x if isinstance(x, Tensor) else Tensor(x)
        z_nef = encode(self.params, "ne_branch", self.config, x)
        z_cf = encode(self.params, "comp_branch", self.config, x)
        logits = classify(self.params, "classifier", concat([z_nef, z_cf], axis=1))
        return PromptNetOutput(z_nef, z_cf, logits)


def template_forward(model: TemplateModel, x_ce) -> tuple[Tensor, np.ndarray]:
    """Returns ``(z_cef, probs)``; ``z_cef`` is the encoder output before the classifier."""
    out = model.forward(x_ce)
    return out.z_cef, softmax(out.logits.data)


def promptnet_forward(model: PromptNet, x_ne) -> tuple[Tensor, Tensor, np.ndarray]:
    """Returns ``(z_nef, z_cf, probs)`` for non-enhanced input."""
    out = model.forward(x_ne)
    return out.z_nef, out.z_cf, softmax(out.logits.data)


MODEL_KINDS = {cls.kind: cls for cls in (TemplateModel, PromptNet)}


# -- checkpoints ----------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    model: _Model
    metadata: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.model.kind


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """Write a checkpoint container.

    Layout after the common framing (see :mod:`promptdistill.container`): the
    JSON header holds ``architecture`` and ``metadata``; then a uint32 record
    count and, per parameter, its name (uint32 length + UTF-8) followed by the
    array (uint8 ndim, uint32 extents, float64 little-endian values).
    """
    if isinstance(model, ModelCheckpoint):
        metadata = {**model.metadata, **(metadata or {})}
        model = model.model
    w = Writer(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, {"architecture": model.architecture(), "metadata": metadata or {}})
    w.u32(len(model.params))
    for name, t in model.params.items():
        w.text(name)
        w.array(t.data)
    w.save(path)


def load_checkpoint(path) -> ModelCheckpoint:
    r = Reader.open(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
    arch = r.header.get("architecture", {})
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        params[name] = r.array()
    r.finish()

    cls = MODEL_KINDS.get(arch.get("kind"))
    if cls is None:
        raise ConfigError(f"checkpoint declares unknown model kind {arch.get('kind')!r}")
    enc = arch.get("encoder", {})
    config = EncoderConfig(**enc)
    n_classes = int(arch.get("n_classes", 2))
    expected = cls.init(config, 0, n_classes).params
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"checkpoint parameters do not match its config (missing {missing}, unexpected {extra})")
    for name, arr in params.items():
        if arr.shape != expected[name].shape:
            raise ConfigError(f"parameter {name} has shape {arr.shape}, config implies {expected[name].shape}")
    ordered = {name: params[name] for name in expected}
    return ModelCheckpoint(cls(config, ordered, n_classes), r.header.get("metadata", {}))

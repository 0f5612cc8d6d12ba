"""Run configuration: flat key=value sections, parsed and fully validated.

The file format is INI-style (configparser syntax): a [model] section for
geometry and widths, [mask], [loss], [optim], and one [stage.NAME] section
per pipeline stage.  Validation collects every violated constraint before
reporting, and runs before any model parameter is allocated.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights
from .serialize import ORDERS

STRATEGIES = ("cluster", "patch", "pixel", "next_unit")
STAGE_KINDS = ("ar_pretrain", "multitask_pretrain", "finetune")


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "cluster"
    ratio: float = 0.2

    @property
    def granularity(self) -> str:
        return "patch" if self.strategy == "pixel" else self.strategy

    @property
    def mode(self) -> str:
        return "next_unit" if self.strategy == "next_unit" else "masked"


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    target_norm: str = "patch"

    def weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta)


@dataclass(frozen=True)
class OptimConfig:
    base_lr_ref: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    warmup_epochs: float = 5.0
    grad_clip: float = 1.0


@dataclass(frozen=True)
class StageConfig:
    kind: str
    epochs: int = 1
    batch_size: int = 16
    dataset: str | None = None
    depth_dataset: str | None = None
    seg_dataset: str | None = None
    input_size: int | None = None
    augment: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    stages: dict[str, StageConfig] = field(default_factory=dict)
    seed: int = 0
    out: str = "runs/out"


def validate_config(cfg: RunConfig) -> list[str]:
    """Every violated constraint, in a stable order; empty means valid."""
    v: list[str] = []
    m = cfg.model
    if m.image_size < 1 or m.patch < 1:
        v.append(f"model: image_size/patch must be positive "
                 f"({m.image_size}, {m.patch})")
    elif m.image_size % m.patch:
        v.append(f"model: image_size {m.image_size} not divisible by patch {m.patch}")
    else:
        if m.cluster_h < 1 or m.grid_h % m.cluster_h:
            v.append(f"model: grid height {m.grid_h} not divisible by "
                     f"cluster_h {m.cluster_h}")
        if m.cluster_w < 1 or m.grid_w % m.cluster_w:
            v.append(f"model: grid width {m.grid_w} not divisible by "
                     f"cluster_w {m.cluster_w}")
    if m.channels < 1:
        v.append(f"model: channels must be positive ({m.channels})")
    if m.heads < 1 or m.dim % m.heads:
        v.append(f"model: dim {m.dim} not divisible by heads {m.heads}")
    if m.dec_width < 1 or m.dec_width % m.heads:
        v.append(f"model: dec_width {m.dec_width} not divisible by heads {m.heads}")
    if m.enc_blocks < 0 or m.dec_blocks < 0:
        v.append("model: block counts must be nonnegative")
    if m.order not in ORDERS:
        v.append(f"model: unknown order {m.order!r}")
    elif m.order == "random" and m.order_seed is None:
        v.append("model: random order requires order_seed")
    if m.classes < 2:
        v.append(f"model: classes must be >= 2 ({m.classes})")
    if m.seg_classes < 2:
        v.append(f"model: seg_classes must be >= 2 ({m.seg_classes})")
    if m.forget_gate not in ("sigmoid", "exp"):
        v.append(f"model: unknown forget_gate {m.forget_gate!r}")

    if cfg.mask.strategy not in STRATEGIES:
        v.append(f"mask: unknown strategy {cfg.mask.strategy!r}")
    if cfg.mask.strategy != "next_unit" and not 0.0 < cfg.mask.ratio <= 1.0:
        v.append(f"mask: ratio must be in (0, 1] ({cfg.mask.ratio})")

    if cfg.loss.alpha < 0 or cfg.loss.beta < 0 or cfg.loss.alpha + cfg.loss.beta <= 0:
        v.append(f"loss: weights must be nonnegative with positive sum "
                 f"(alpha={cfg.loss.alpha}, beta={cfg.loss.beta})")
    if cfg.loss.target_norm not in ("patch", "raw"):
        v.append(f"loss: unknown target_norm {cfg.loss.target_norm!r}")

    o = cfg.optim
    if o.base_lr_ref <= 0:
        v.append(f"optim: base_lr_ref must be positive ({o.base_lr_ref})")
    if not 0 <= o.beta1 < 1 or not 0 <= o.beta2 < 1:
        v.append("optim: betas must lie in [0, 1)")
    if o.eps <= 0:
        v.append("optim: eps must be positive")
    if not 0.0 <= o.ema_decay <= 1.0:
        v.append(f"optim: ema_decay must lie in [0, 1] ({o.ema_decay})")
    if o.warmup_epochs < 0:
        v.append("optim: warmup_epochs must be nonnegative")
    if o.grad_clip < 0:
        v.append("optim: grad_clip must be nonnegative")
    if o.weight_decay < 0:
        v.append("optim: weight_decay must be nonnegative")

    for name, st in cfg.stages.items():
        where = f"stage.{name}"
        if st.kind not in STAGE_KINDS:
            v.append(f"{where}: unknown kind {st.kind!r}")
            continue
        if st.epochs < 1:
            v.append(f"{where}: epochs must be >= 1 ({st.epochs})")
        if st.batch_size < 1:
            v.append(f"{where}: batch_size must be >= 1 ({st.batch_size})")
        size = st.input_size if st.input_size is not None else m.image_size
        if size != m.image_size:
            v.append(f"{where}: input_size {size} must equal model.image_size "
                     f"{m.image_size} (positional table is fixed)")
        if st.kind == "multitask_pretrain":
            if not st.depth_dataset or not st.seg_dataset:
                v.append(f"{where}: multitask stage needs depth_dataset "
                         f"and seg_dataset")
        elif not st.dataset:
            v.append(f"{where}: missing dataset")
    return v


def check_config(cfg: RunConfig) -> RunConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def _get(parser, section, key, cast, default, errors):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key).strip()
    if raw == "":
        return default
    try:
        if cast is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError:
        errors.append(f"{section}.{key}: cannot parse {raw!r} as {cast.__name__}")
        return default


def parse_config(path) -> RunConfig:
    """Parse and validate a config file; raises ConfigError on any violation."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fp:
            parser.read_file(fp)
    except (OSError, configparser.Error) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc

    errors: list[str] = []
    g = lambda sec, key, cast, default: _get(parser, sec, key, cast, default, errors)

    model = ModelConfig(
        image_size=g("model", "image_size", int, 32),
        channels=g("model", "channels", int, 3),
        patch=g("model", "patch", int, 4),
        dim=g("model", "dim", int, 128),
        heads=g("model", "heads", int, 4),
        enc_blocks=g("model", "enc_blocks", int, 6),
        dec_blocks=g("model", "dec_blocks", int, 4),
        dec_width=g("model", "dec_width", int, 128),
        cluster_h=g("model", "cluster_h", int, 2),
        cluster_w=g("model", "cluster_w", int, 2),
        order=g("model", "order", str, "row_forward"),
        order_seed=g("model", "order_seed", int, None),
        classes=g("model", "classes", int, 3),
        seg_classes=g("model", "seg_classes", int, 4),
        forget_gate=g("model", "forget_gate", str, "sigmoid"),
    )
    mask = MaskConfig(
        strategy=g("mask", "strategy", str, "cluster"),
        ratio=g("mask", "ratio", float, 0.2),
    )
    loss = LossConfig(
        alpha=g("loss", "alpha", float, 1.0),
        beta=g("loss", "beta", float, 1.0),
        target_norm=g("loss", "target_norm", str, "patch"),
    )
    optim = OptimConfig(
        base_lr_ref=g("optim", "base_lr_ref", float, 1.5e-4),
        weight_decay=g("optim", "weight_decay", float, 0.05),
        beta1=g("optim", "beta1", float, 0.9),
        beta2=g("optim", "beta2", float, 0.999),
        eps=g("optim", "eps", float, 1e-8),
        ema_decay=g("optim", "ema_decay", float, 0.999),
        warmup_epochs=g("optim", "warmup_epochs", float, 5.0),
        grad_clip=g("optim", "grad_clip", float, 1.0),
    )
    stages: dict[str, StageConfig] = {}
    for section in parser.sections():
        if not section.startswith("stage."):
            continue
        name = section[len("stage."):]
        stages[name] = StageConfig(
            kind=g(section, "kind", str, name),
            epochs=g(section, "epochs", int, 1),
            batch_size=g(section, "batch_size", int, 16),
            dataset=g(section, "dataset", str, None),
            depth_dataset=g(section, "depth_dataset", str, None),
            seg_dataset=g(section, "seg_dataset", str, None),
            input_size=g(section, "input_size", int, None),
            augment=g(section, "augment", bool, True),
        )
    cfg = RunConfig(
        model=model, mask=mask, loss=loss, optim=optim, stages=stages,
        seed=g("run", "seed", int, 0),
        out=g("run", "out", str, "runs/out"),
    )
    errors.extend(validate_config(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg

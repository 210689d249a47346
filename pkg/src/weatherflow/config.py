"""Training configuration: dataclass defaults + INI-style config files.

Flag precedence is CLI flag > config file > built-in default. Unknown keys
are rejected by name; parse errors carry the line number.
"""

import configparser
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError
from .losses import LossWeights
from .sampling import SamplerConfig


@dataclass
class TrainConfig:
    seed: int = 0
    resolution: int = 64
    channels: int = 1
    dtype: str = "float32"  # training may run single precision; tests use float64
    steps_stage1: int = 2000
    steps_stage2: int = 4000
    steps_stage3: int = 4000
    stage2_pretrain_frac: float = 0.25
    # photometric occlusion masks are disabled for this fraction of stage 2
    # so early random flows cannot mask away their own training signal
    occlusion_warmup_frac: float = 0.5
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    checkpoint_every: int = 1000
    max_skip_rate: float = 0.1
    use_feat_align: bool = True
    use_flow_consis: bool = True
    use_intra: bool = True
    use_inter: bool = True
    shared_encoders: bool = False
    translation_backbone: str = "cycle"
    freeze_translator_stage3: bool = True
    literal_contrastive: bool = False
    init_degraded_from_clean: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        validate(self)

    def np_dtype(self):
        if self.dtype == "float32":
            return np.float32
        if self.dtype == "float64":
            return np.float64
        raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


def validate(cfg: TrainConfig):
    if cfg.steps_stage1 < 0 or cfg.steps_stage2 < 0 or cfg.steps_stage3 < 0:
        raise ConfigError("stage step counts must be >= 0")
    if not (0.0 <= cfg.occlusion_warmup_frac <= 1.0):
        raise ConfigError("occlusion_warmup_frac must lie in [0, 1]")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be > 0")
    if cfg.resolution % 8:
        raise ConfigError(f"resolution {cfg.resolution} must be divisible by 8")
    if cfg.translation_backbone not in ("cycle", "one_way"):
        raise ConfigError(f"translation_backbone must be cycle or one_way, got {cfg.translation_backbone!r}")
    cfg.np_dtype()
    if cfg.literal_contrastive and cfg.sampler.grad_through_warp_error:
        raise ConfigError(
            "incompatible flags: literal_contrastive with grad_through_warp_error "
            "(the literal fraction repels positives when pushed into the flow)"
        )


_SECTION_FIELDS = {
    "train": {f.name for f in fields(TrainConfig)} - {"weights", "sampler"},
    "losses": {f.name for f in fields(LossWeights)},
    "sampler": {f.name for f in fields(SamplerConfig)},
}

_BOOL_FIELDS = {
    "use_feat_align",
    "use_flow_consis",
    "use_intra",
    "use_inter",
    "shared_encoders",
    "freeze_translator_stage3",
    "literal_contrastive",
    "init_degraded_from_clean",
    "grad_through_warp_error",
}
_INT_FIELDS = {
    "seed",
    "resolution",
    "channels",
    "steps_stage1",
    "steps_stage2",
    "steps_stage3",
    "checkpoint_every",
    "n",
    "patch",
    "min_separation",
}
_STR_FIELDS = {"dtype", "translation_backbone", "strategy_pos", "strategy_neg"}


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_FIELDS:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    if key in _INT_FIELDS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from None
    if key in _STR_FIELDS:
        return raw
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from None


def _apply(cfg: TrainConfig, typed: dict) -> TrainConfig:
    """Write {key: value} pairs into the right sections of cfg.

    min_separation tracks patch unless the same source sets it explicitly.
    """
    for key, val in typed.items():
        target = None
        for section, keys in _SECTION_FIELDS.items():
            if key in keys:
                target = section
                break
        if target is None:
            raise ConfigError(f"unknown config key {key!r}")
        obj = {"train": cfg, "losses": cfg.weights, "sampler": cfg.sampler}[target]
        setattr(obj, key, val)
    if "patch" in typed and "min_separation" not in typed:
        cfg.sampler.min_separation = cfg.sampler.patch
    cfg.sampler.__post_init__()
    cfg.weights.__post_init__()
    validate(cfg)
    return cfg


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply {key: raw-or-typed value} onto cfg; keys may hit any section."""
    typed = {k: (_coerce(k, v) if isinstance(v, str) else v) for k, v in overrides.items()}
    return _apply(cfg, typed)


def load_config(path) -> TrainConfig:
    """Parse an INI config with [train], [losses], [sampler] sections."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as f:
            parser.read_file(f, source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None

    typed = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTION_FIELDS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            typed[key] = _coerce(key, raw)
    return _apply(TrainConfig(), typed)


def dump_config(cfg: TrainConfig) -> str:
    """Render cfg as INI text (the same shape load_config accepts)."""
    lines = ["[train]"]
    for f in fields(TrainConfig):
        if f.name in ("weights", "sampler"):
            continue
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    lines.append("")
    lines.append("[losses]")
    for f in fields(LossWeights):
        lines.append(f"{f.name} = {getattr(cfg.weights, f.name)}")
    lines.append("")
    lines.append("[sampler]")
    for f in fields(SamplerConfig):
        lines.append(f"{f.name} = {getattr(cfg.sampler, f.name)}")
    return "\n".join(lines) + "\n"

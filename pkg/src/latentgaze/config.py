"""Declarative run configuration: one file describes an experiment end to end
(architecture dims, ablation flags, optimizer schedules, data paths, seeds).

Config files are YAML with nested sections; CLI ``--set section.key=value``
overrides take precedence.  ``validate`` proves dimensional consistency for
the selected ablation combination before any training starts and reports
every violation, not just the first.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .networks import EncoderConfig, GlobalBranchConfig, LocalBranchConfig


class ConfigError(ValueError):
    """Raised when a run configuration is inconsistent or unparsable."""


@dataclass
class ArchitectureConfig:
    face_size: int = 112
    backbone: str = "toy-cnn"
    attention_heads: int = 8
    local_out_dim: int = 52
    proj_dims: tuple[int, int, int] = (256, 128, 128)
    pred_dims: tuple[int, int, int] = (128, 128, 128)
    ff_dim: int = 256
    head_hidden: tuple[int, int] = (1024, 256)
    dropout: float = 0.1
    bounded_head: bool = True


@dataclass
class AblationConfig:
    """Every published variant is reachable by flags alone."""

    use_pmn: bool = True
    use_ssl_init: bool = True
    use_inv_ev: bool = True
    use_mbyol_mods: bool = True
    use_local: bool = True
    use_global: bool = True
    freeze_backbone: bool = False


@dataclass
class PretrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.06
    momentum: float = 0.9
    batch_size: int = 112
    epochs: int = 100
    tau_base: float = 0.996


@dataclass
class FinetuneConfig:
    optimizer: str = "adam"
    lr: float = 0.0003
    batch_size: int = 16
    epochs: int = 30
    early_stop_patience: int = 2
    early_stop_min_delta: float = 0.1
    plateau_factor: float = 0.1
    plateau_patience: int = 3
    plateau_min_delta: float = 0.0
    min_lr: float = 1e-7
    omega_max: float = 10.0
    omega_in_graph: bool = False


@dataclass
class AugmentationProbs:
    horizontal_flip: float = 0.5
    gaussian_blur: float = 0.2
    random_affine: float = 0.3
    random_rotation: float = 0.3
    random_crop: float = 0.5
    center_crop: float = 0.0
    random_grayscale: float = 0.2
    color_jitter: float = 0.4
    random_invert: float = 0.1
    gaussian_noise: float = 0.2
    cutout: float = 0.3


@dataclass
class DataConfig:
    root: str = ""
    split: str = "random"  # or "loso"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    loso_val_fraction: float = 3000.0 / 42000.0
    split_seed: int = 0


@dataclass
class RunConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    augmentation: AugmentationProbs = field(default_factory=AugmentationProbs)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    deterministic: bool = True

    # -- derived views ---------------------------------------------------

    def effective_flags(self) -> AblationConfig:
        """Ablation flags after applying the plain-pair downgrade: without
        the modified pair, the encoder is global-only and attention-free."""
        flags = dataclasses.replace(self.ablation)
        if not flags.use_mbyol_mods:
            flags.use_local = False
            flags.use_global = True
        return flags

    def encoder_config(self) -> EncoderConfig:
        arch = self.architecture
        flags = self.effective_flags()
        use_attention = self.ablation.use_mbyol_mods
        return EncoderConfig(
            global_branch=GlobalBranchConfig(
                backbone=arch.backbone,
                input_size=(arch.face_size, arch.face_size),
                attention_heads=arch.attention_heads,
                use_attention=use_attention,
            ),
            local_branch=LocalBranchConfig(
                attention_heads=arch.attention_heads,
                out_dim=arch.local_out_dim,
                use_attention=use_attention,
            ),
            use_global=flags.use_global,
            use_local=flags.use_local,
        )

    def to_dict(self) -> dict:
        return _asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


_SECTION_TYPES = {
    "architecture": ArchitectureConfig,
    "ablation": AblationConfig,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "augmentation": AugmentationProbs,
    "data": DataConfig,
}


def _from_dict(cls, payload: dict, errors: list[str], prefix: str = ""):
    kwargs = {}
    known = {f.name for f in fields(cls)}
    defaults = cls()
    for key, value in payload.items():
        if key not in known:
            errors.append(f"unknown key {prefix}{key}")
            continue
        section_cls = _SECTION_TYPES.get(key) if cls is RunConfig else None
        if section_cls is not None:
            if not isinstance(value, dict):
                errors.append(f"{prefix}{key} must be a mapping")
                continue
            kwargs[key] = _from_dict(section_cls, value, errors, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, getattr(defaults, key), f"{prefix}{key}", errors)
    return cls(**kwargs)


def _coerce(value, default, where: str, errors: list[str]):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        errors.append(f"{where}: expected a boolean, got {value!r}")
        return default
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            errors.append(f"{where}: expected an integer, got {value!r}")
            return default
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            errors.append(f"{where}: expected a number, got {value!r}")
            return default
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            errors.append(f"{where}: expected a sequence, got {value!r}")
            return default
        if len(value) != len(default):
            errors.append(f"{where}: expected {len(default)} entries, got {len(value)}")
            return default
        return tuple(int(v) for v in value)
    if isinstance(default, str):
        return str(value)
    return value


def config_from_dict(payload: dict) -> RunConfig:
    errors: list[str] = []
    cfg = _from_dict(RunConfig, payload or {}, errors)
    if errors:
        raise ConfigError("configuration errors:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path: Path | str | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a YAML config file (optional) and apply CLI overrides."""
    payload: dict = {}
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(raw)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping at top level")
        payload = loaded
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        node = payload
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} conflicts with a scalar value")
        node[parts[-1]] = yaml.safe_load(value)
    return config_from_dict(payload)


def save_resolved_config(cfg: RunConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def validate(cfg: RunConfig, dataset_has_landmarks: bool | None = None) -> list[str]:
    """Every violated constraint across architecture, flags, and schedules."""
    errors: list[str] = []
    arch = cfg.architecture
    flags = cfg.effective_flags()

    if not (flags.use_global or flags.use_local):
        errors.append("ablation: at least one of use_global/use_local must be on")
    if arch.proj_dims[2] != cfg.architecture.pred_dims[0]:
        errors.append(
            f"architecture: prediction input dim {arch.pred_dims[0]} must equal "
            f"projection output dim {arch.proj_dims[2]}"
        )
    if any(d <= 0 for d in arch.proj_dims + arch.pred_dims):
        errors.append("architecture: head dims must be positive")
    if arch.face_size < 16:
        errors.append(f"architecture: face_size {arch.face_size} is too small")
    if arch.attention_heads <= 0:
        errors.append("architecture: attention_heads must be positive")
    if arch.ff_dim <= 0:
        errors.append("architecture: ff_dim must be positive")
    if not 0 <= arch.dropout < 1:
        errors.append(f"architecture: dropout {arch.dropout} outside [0, 1)")

    if not 0 < cfg.pretrain.tau_base < 1:
        errors.append(f"pretrain: tau_base {cfg.pretrain.tau_base} outside (0, 1)")
    for name, section in (("pretrain", cfg.pretrain), ("finetune", cfg.finetune)):
        if section.lr <= 0:
            errors.append(f"{name}: learning rate must be positive")
        if section.batch_size < 1:
            errors.append(f"{name}: batch size must be at least 1")
        if section.epochs < 1:
            errors.append(f"{name}: epochs must be at least 1")
    if cfg.finetune.omega_max < 0:
        errors.append("finetune: omega_max must be nonnegative")
    if cfg.finetune.plateau_factor <= 0 or cfg.finetune.plateau_factor >= 1:
        errors.append(f"finetune: plateau_factor {cfg.finetune.plateau_factor} outside (0, 1)")

    for name, p in dataclasses.asdict(cfg.augmentation).items():
        if not 0 <= p <= 1:
            errors.append(f"augmentation: {name} probability {p} outside [0, 1]")

    fracs = (cfg.data.train_fraction, cfg.data.val_fraction, cfg.data.test_fraction)
    if cfg.data.split == "random" and abs(sum(fracs) - 1.0) > 1e-9:
        errors.append(f"data: split fractions {fracs} must sum to 1")
    if cfg.data.split not in ("random", "loso"):
        errors.append(f"data: unknown split scheme {cfg.data.split!r}")

    needs_patches = flags.use_local or cfg.ablation.use_pmn
    if dataset_has_landmarks is False and needs_patches:
        errors.append(
            "ablation: use_pmn/use_local need eye patches but the dataset has no landmarks"
        )
    return errors


def validate_or_raise(cfg: RunConfig, dataset_has_landmarks: bool | None = None) -> None:
    errors = validate(cfg, dataset_has_landmarks)
    if errors:
        raise ConfigError("configuration errors:\n  " + "\n  ".join(errors))

"""Experiment configuration: strict JSON parsing, profiles, digests.

One ExperimentConfig drives the whole pipeline: which pretraining kind
feeds which fine-tuning columns, the episode shape, both synthetic
sources, and every nested training config. Parsing is strict: unknown
keys anywhere are an error, so a typo cannot silently fall back to a
default. Profiles rescale only the episode/repeat budget.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

from .core import config_digest
from .data import HierarchySpec, SyntheticConfig
from .encoder import EncoderConfig
from .finetune import FinetuneConfig
from .ssl import AugmentConfig, IpIrmConfig

PRETRAIN_KINDS = ("none", "supervised-proxy", "simclr", "ipirm")
FINETUNE_KINDS = (
    "meta-fine-same",
    "meta-fine-other",
    "meta-coarse-same",
    "meta-coarse-other",
    "fully-supervised",
)
LABEL_SPACES = ("fine", "coarse")


def train_label_space(kind: str) -> str:
    """Meta-train label space implied by the fine-tune kind."""
    if kind == "fully-supervised":
        return "coarse"
    return "fine" if "-fine-" in kind else "coarse"


def train_source(kind: str) -> str:
    return "other" if kind.endswith("-other") else "same"


@dataclass(frozen=True)
class ProxyConfig:
    """Labeled-proxy supervised pretraining (the stand-in for borrowed
    fully supervised weights)."""

    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 1e-4
    label_space: str = "fine"

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size < 2:
            raise ValueError("proxy training needs positive epochs and batches of at least 2")
        if self.lr <= 0:
            raise ValueError("proxy LR must be positive")
        if self.label_space not in LABEL_SPACES:
            raise ValueError(f"unknown proxy label space {self.label_space!r}")


def _default_other_data() -> SyntheticConfig:
    # the cross-source stand-in: different texture family and hierarchy,
    # noisier acquisition, and wider frequency bands than the primary source
    return SyntheticConfig(
        texture_family="rings",
        hierarchy=HierarchySpec.nested(8, 4),
        noise=0.45,
        band_step=4.0,
        seed=107,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    pretrain: str = "ipirm"
    pretrain_kinds: tuple[str, ...] = ("supervised-proxy", "simclr", "ipirm")
    finetune_kinds: tuple[str, ...] = (
        "meta-fine-same",
        "meta-fine-other",
        "meta-coarse-other",
        "fully-supervised",
    )
    k_shots: tuple[int, ...] = (1, 5)
    n_way: int = 2
    q_query: int = 10
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    other_data: SyntheticConfig = field(default_factory=_default_other_data)
    fractions: tuple[float, float, float] = (0.5, 0.25, 0.25)
    train_domain: int = 0
    eval_domain: int = 1
    fov_mm: float = 100.0
    out_size: int = 16
    ipirm: IpIrmConfig = field(default_factory=IpIrmConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    tune: FinetuneConfig = field(default_factory=FinetuneConfig)
    test_episodes: int = 300
    test_repeats: int = 1
    grid: tuple[tuple[str, tuple], ...] = ()

    def __post_init__(self) -> None:
        if self.pretrain not in PRETRAIN_KINDS:
            raise ValueError(f"unknown pretrain kind {self.pretrain!r}")
        for kind in self.pretrain_kinds:
            if kind not in PRETRAIN_KINDS:
                raise ValueError(f"unknown pretrain kind {kind!r}")
        if len(set(self.pretrain_kinds)) != len(self.pretrain_kinds) or not self.pretrain_kinds:
            raise ValueError("pretrain_kinds must be nonempty and unique")
        for kind in self.finetune_kinds:
            if kind not in FINETUNE_KINDS:
                raise ValueError(f"unknown fine-tune kind {kind!r}")
        if len(set(self.finetune_kinds)) != len(self.finetune_kinds) or not self.finetune_kinds:
            raise ValueError("finetune_kinds must be nonempty and unique")
        if not self.k_shots or len(set(self.k_shots)) != len(self.k_shots) or min(self.k_shots) < 1:
            raise ValueError("k_shots must be nonempty, unique, and positive")
        if self.n_way < 2 or self.q_query < 1:
            raise ValueError("need n_way >= 2 and q_query >= 1")
        if self.test_episodes < 1 or self.test_repeats < 1:
            raise ValueError("test episodes and repeats must be positive")
        if self.train_domain == self.eval_domain:
            raise ValueError("train and eval domains must differ")
        if (self.encoder.height, self.encoder.width) != (self.out_size, self.out_size):
            raise ValueError(
                f"encoder expects {self.encoder.height}x{self.encoder.width} input "
                f"but preprocessing emits {self.out_size}x{self.out_size}"
            )
        # the label spaces each configured column needs must exist at episode width
        for kind in self.finetune_kinds:
            if kind == "fully-supervised":
                continue
            src = self.data if train_source(kind) == "same" else self.other_data
            n_train = src.hierarchy.n_fine if train_label_space(kind) == "fine" else src.hierarchy.n_coarse
            if self.n_way > n_train:
                raise ValueError(f"{kind}: {self.n_way}-way episodes over {n_train} training classes")
        if self.n_way > self.data.hierarchy.n_coarse:
            raise ValueError(
                f"{self.n_way}-way evaluation over {self.data.hierarchy.n_coarse} coarse classes"
            )
        for path, values in self.grid:
            _grid_target(self, path)  # raises on a bad path
            if not values:
                raise ValueError(f"grid axis {path!r} has no values")

    def digest(self) -> str:
        return config_digest(config_to_dict(self))


# ---------------------------------------------------------------------------
# dict <-> config


def _strict(kind: str, raw: dict, builders: dict) -> dict:
    if not isinstance(raw, dict):
        raise ValueError(f"{kind} section must be an object, got {type(raw).__name__}")
    unknown = set(raw) - set(builders)
    if unknown:
        raise ValueError(f"unknown {kind} keys: {sorted(unknown)}")
    return {key: builders[key](raw[key]) for key in raw}


def _pair(conv):
    def build(v):
        if len(v) != 2:
            raise ValueError(f"expected a 2-element range, got {v!r}")
        return (conv(v[0]), conv(v[1]))

    return build


def _tuple_of(conv):
    return lambda v: tuple(conv(x) for x in v)


def _stage(v):
    if len(v) != 3:
        raise ValueError(f"conv stage must be [channels, kernel, stride], got {v!r}")
    return tuple(int(x) for x in v)


def _opt_float(v):
    return None if v is None else float(v)


_ENCODER = {
    "height": int,
    "width": int,
    "channels": int,
    "stages": _tuple_of(_stage),
    "proj_hidden": int,
    "proj_dim": int,
}

_DATA = {
    "count_per_fine": int,
    "image_size": int,
    "hierarchy": lambda v: HierarchySpec(tuple(int(x) for x in v)),
    "texture_family": str,
    "intensity_bias": float,
    "rotation_jitter": float,
    "phase_jitter": float,
    "noise": float,
    "domain_shift": float,
    "confound": float,
    "band_base": float,
    "band_step": float,
    "group_size": int,
    "px": float,
    "py": float,
    "seed": int,
}

_AUGMENT = {"crop_scale": _pair(float), "gain": _pair(float), "bias": _pair(float)}

_IPIRM = {
    "lambda1": float,
    "lambda2": float,
    "tau": float,
    "outer_iterations": int,
    "partition_steps": int,
    "partition_restarts": int,
    "partition_lr": float,
    "tolerance": float,
    "epochs_per_iter": int,
    "batch_size": int,
    "weight_decay": float,
    "base_lr": _opt_float,
    "augment": lambda v: AugmentConfig(**_strict("augment", v, _AUGMENT)),
}

_PROXY = {"epochs": int, "batch_size": int, "lr": float, "weight_decay": float, "label_space": str}

_TUNE = {
    "lr": float,
    "weight_decay": float,
    "epochs": int,
    "decay_epochs": _tuple_of(int),
    "episodes_per_epoch": int,
    "val_episodes": int,
    "loss": str,
    "metric": str,
    "temperature": float,
    "aucm_margin": float,
    "batch_size": int,
    "proximal": float,
}


def _grid_axes(v):
    if not isinstance(v, dict):
        raise ValueError("grid must map axis paths to value lists")
    return tuple((str(path), tuple(values)) for path, values in v.items())


_TOP = {
    "pretrain": str,
    "pretrain_kinds": _tuple_of(str),
    "finetune_kinds": _tuple_of(str),
    "k_shots": _tuple_of(int),
    "n_way": int,
    "q_query": int,
    "encoder": lambda v: EncoderConfig(**_strict("encoder", v, _ENCODER)),
    "data": lambda v: SyntheticConfig(**_strict("data", v, _DATA)),
    "other_data": lambda v: SyntheticConfig(**_strict("other_data", v, _DATA)),
    "fractions": lambda v: tuple(float(x) for x in v),
    "train_domain": int,
    "eval_domain": int,
    "fov_mm": float,
    "out_size": int,
    "ipirm": lambda v: IpIrmConfig(**_strict("ipirm", v, _IPIRM)),
    "proxy": lambda v: ProxyConfig(**_strict("proxy", v, _PROXY)),
    "tune": lambda v: FinetuneConfig(**_strict("tune", v, _TUNE)),
    "test_episodes": int,
    "test_repeats": int,
    "grid": _grid_axes,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    return ExperimentConfig(**_strict("config", raw, _TOP))


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_dict(json.load(f))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            if isinstance(obj, HierarchySpec):
                return list(obj.mapping)
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(x) for x in obj]
        return obj

    out = plain(cfg)
    out["grid"] = {path: list(values) for path, values in cfg.grid}
    return out


def save_config(path: str, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=False)
        f.write("\n")


# ---------------------------------------------------------------------------
# grid paths and profiles


def _grid_target(cfg: ExperimentConfig, path: str) -> tuple[str, str]:
    """Split a dotted grid path and check it names a real tunable field."""
    parts = path.split(".")
    if len(parts) != 2 or parts[0] not in ("tune", "ipirm", "proxy"):
        raise ValueError(f"grid path {path!r} must look like tune.lr, ipirm.weight_decay, ...")
    section, name = parts
    target = getattr(cfg, section)
    if name not in {f.name for f in dataclasses.fields(target)}:
        raise ValueError(f"grid path {path!r}: no field {name!r} in {section}")
    return section, name


def apply_grid_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    for path, value in overrides.items():
        section, name = _grid_target(cfg, path)
        if isinstance(value, (list, tuple)):
            value = tuple(value)
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{name: value})})
    return cfg


PROFILES = ("ci", "paper")


def apply_profile(cfg: ExperimentConfig, profile: str) -> ExperimentConfig:
    """Rescale the episode/repeat budget; everything else stays as configured."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    if profile == "ci":
        counts = dict(episodes_per_epoch=100, val_episodes=100)
        return replace(cfg, tune=replace(cfg.tune, **counts), test_episodes=100, test_repeats=3)
    counts = dict(episodes_per_epoch=600, val_episodes=600)
    return replace(cfg, tune=replace(cfg.tune, **counts), test_episodes=600, test_repeats=5)

"""Flat ``key = value`` configuration files with dotted section prefixes.

Lines are UTF-8, ``#`` starts a comment, and values are plain strings until a
typed consumer parses them (``50,75,125`` for tuples, ``true``/``false`` for
booleans). Serialization is canonical: sorted keys, one space around ``=``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from hrseg.backbone import NetworkSpec
from hrseg.data import AugmentConfig


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def serialize_config(mapping: dict) -> str:
    return "".join(f"{k} = {mapping[k]}\n" for k in sorted(mapping))


def parse_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def _as_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _as_ints(s: str) -> tuple:
    return tuple(int(p.strip()) for p in s.split(","))


def _as_floats(s: str) -> tuple:
    return tuple(float(p.strip()) for p in s.split(","))


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 300
    lr0: float = 0.01
    lr_policy: str = "poly"  # "poly" | "step"
    poly_power: float = 0.9
    milestones: tuple = (30, 60, 90)
    step_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    aux_weight: float = 0.4
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.lr_policy not in ("poly", "step"):
            raise ValueError(f"unknown lr_policy {self.lr_policy!r}")
        if self.lr_policy == "poly" and self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be ascending")


@dataclass
class PseudoLabelConfig:
    threshold: float = 0.9
    output_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0,1], got {self.threshold}")


@dataclass
class RunConfig:
    """Union of everything one run needs; every field defaults except paths."""

    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    train_data: str | None = None
    val_data: str | None = None
    unlabeled_data: str | None = None
    out_dir: str | None = None
    seed: int = 0


# key -> (section object attr, field name, parser, serializer)
_NETWORK_FIELDS = {
    "network.blocks": ("blocks", _as_ints),
    "network.channels": ("channels", _as_ints),
    "network.num_classes": ("num_classes", int),
    "network.head_blocks_per_scale": ("head_blocks_per_scale", int),
    "network.merge_kernel": ("merge_kernel", int),
    "network.aux_supervision": ("aux_supervision", _as_bool),
}
_TRAIN_FIELDS = {
    "train.batch_size": ("batch_size", int),
    "train.epochs": ("epochs", int),
    "train.lr0": ("lr0", float),
    "train.lr_policy": ("lr_policy", str),
    "train.poly_power": ("poly_power", float),
    "train.milestones": ("milestones", _as_ints),
    "train.step_factor": ("step_factor", float),
    "train.momentum": ("momentum", float),
    "train.weight_decay": ("weight_decay", float),
    "train.aux_weight": ("aux_weight", float),
    "train.log_every": ("log_every", int),
}
_AUGMENT_FIELDS = {
    "augment.crop": ("crop", int),
    "augment.scale_range": ("scale_range", _as_floats),
    "augment.hflip_prob": ("hflip_prob", float),
    "augment.brightness": ("brightness", float),
    "augment.contrast": ("contrast", float),
    "augment.saturation": ("saturation", float),
    "augment.cls_resize_range": ("classification_resize_range", _as_ints),
    "augment.cls_crop": ("classification_crop", int),
}
_PSEUDO_FIELDS = {"pseudo.threshold": ("threshold", float)}
_PATH_FIELDS = {
    "data.train": "train_data",
    "data.val": "val_data",
    "data.unlabeled": "unlabeled_data",
    "out": "out_dir",
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_config_from_mapping(mapping: dict) -> RunConfig:
    cfg = RunConfig()
    known = set()
    for table, obj in (
        (_NETWORK_FIELDS, cfg.network),
        (_TRAIN_FIELDS, cfg.train),
        (_AUGMENT_FIELDS, cfg.augment),
        (_PSEUDO_FIELDS, cfg.pseudo),
    ):
        for key, (attr, parse) in table.items():
            known.add(key)
            if key in mapping:
                setattr(obj, attr, parse(mapping[key]))
    for key, attr in _PATH_FIELDS.items():
        known.add(key)
        if key in mapping:
            setattr(cfg, attr, mapping[key])
    known.add("seed")
    if "seed" in mapping:
        cfg.seed = int(mapping["seed"])
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    cfg.network.validate()
    cfg.train.__post_init__()
    cfg.augment.__post_init__()
    cfg.pseudo.__post_init__()
    cfg.train.seed = cfg.seed
    return cfg


def run_config_to_mapping(cfg: RunConfig) -> dict:
    out = {}
    for table, obj in (
        (_NETWORK_FIELDS, cfg.network),
        (_TRAIN_FIELDS, cfg.train),
        (_AUGMENT_FIELDS, cfg.augment),
        (_PSEUDO_FIELDS, cfg.pseudo),
    ):
        for key, (attr, _) in table.items():
            out[key] = _fmt(getattr(obj, attr))
    for key, attr in _PATH_FIELDS.items():
        value = getattr(cfg, attr)
        if value is not None:
            out[key] = value
    out["seed"] = str(cfg.seed)
    return out


def network_spec_to_text(spec: NetworkSpec, kind: str = "seg") -> str:
    """Canonical architecture block embedded in checkpoints."""
    mapping = {key: _fmt(getattr(spec, attr)) for key, (attr, _) in _NETWORK_FIELDS.items()}
    mapping["kind"] = kind
    return serialize_config(mapping)


def network_spec_from_text(text: str):
    mapping = parse_config_text(text)
    kind = mapping.pop("kind", "seg")
    kwargs = {}
    for key, (attr, parse) in _NETWORK_FIELDS.items():
        if key in mapping:
            kwargs[attr] = parse(mapping[key])
    return NetworkSpec(**kwargs), kind

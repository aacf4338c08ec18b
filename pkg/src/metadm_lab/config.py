"""Run configuration: sectioned dataclasses stored as INI text.

Every field has a default. ``load_config`` applies a file and then
``--set section.key=value`` overrides; ``dump_config`` writes the fully
resolved form back out, and ``config_digest`` hashes that text.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
import typing
from dataclasses import dataclass, field

from .errors import ConfigError
from .metadm import MetaDMConfig, Strategy

OUTPUT_DIR_ENV = "METADM_OUTPUT_DIR"


@dataclass
class DatasetSection:
    source: str = "synth"  # "synth" or a path to a manifest.json
    n_classes: int = 16
    images_per_class: int = 40
    image_size: int = 32
    split: str = "8/3/5"  # train/val/test class counts; empty = 50/25/25
    seed: int = 0


@dataclass
class DiffusionSection:
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    scale_betas: bool = True  # multiply both betas by 1000/T
    epochs: int = 60
    lr: float = 2e-3
    batch_size: int = 32
    widths: str = "32,64,64"
    time_embed_dim: int = 64


@dataclass
class MetaDMSection:
    method: str = "metadm"  # "metadm" or "baseline"
    good_strength: float = 0.05
    bad_strength: float = 0.2
    strategy: str = Strategy.PER_CLASS_EXTRA.value
    bad_per_class: int = 5
    augment_enabled: bool = True
    sharpen_enabled: bool = True
    good_as_query: bool = True

    def to_metadm(self, seed: int) -> MetaDMConfig:
        return MetaDMConfig(self.good_strength, self.bad_strength, Strategy(self.strategy), self.bad_per_class,
                            self.augment_enabled, self.sharpen_enabled, seed, self.good_as_query)


@dataclass
class FSLSection:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_query_train: int = 5
    episodes_train: int = 600
    episodes_eval: int = 600
    val_every: int = 100
    val_episodes: int = 300
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay_every: int = 0
    lambda_reg: float = 1e-4
    hidden: int = 64
    eval_shots: str = "1,5"
    include_fake_ways_at_test: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    metadm: MetaDMSection = field(default_factory=MetaDMSection)
    fsl: FSLSection = field(default_factory=FSLSection)

    def split_counts(self):
        if not self.dataset.split:
            return None
        try:
            counts = tuple(int(x) for x in self.dataset.split.split("/"))
        except ValueError as exc:
            raise ConfigError(f"dataset.split must look like 8/3/5, got {self.dataset.split!r}") from exc
        if len(counts) != 3 or min(counts) < 1 or sum(counts) != self.dataset.n_classes:
            raise ConfigError(f"dataset.split {self.dataset.split!r} must be three positive counts "
                              f"summing to n_classes={self.dataset.n_classes}")
        return counts

    def widths(self) -> tuple:
        return tuple(int(w) for w in self.diffusion.widths.split(","))

    def eval_shots(self) -> list:
        return [int(k) for k in self.fsl.eval_shots.split(",") if k.strip()]

    def betas(self):
        scale = 1000.0 / self.diffusion.T if self.diffusion.scale_betas else 1.0
        return self.diffusion.beta_min * scale, min(self.diffusion.beta_max * scale, 0.999)

    def validate(self) -> "RunConfig":
        self.split_counts()
        d, f = self.diffusion, self.fsl
        if d.T < 1 or d.epochs < 0 or d.batch_size < 1:
            raise ConfigError("diffusion.T, epochs and batch_size must be positive")
        if not 0 < d.beta_min <= d.beta_max < 1:
            raise ConfigError("need 0 < diffusion.beta_min <= diffusion.beta_max < 1")
        if self.metadm.method not in ("metadm", "baseline"):
            raise ConfigError(f"metadm.method must be metadm or baseline, got {self.metadm.method!r}")
        try:
            Strategy(self.metadm.strategy)
        except ValueError as exc:
            raise ConfigError(f"unknown metadm.strategy {self.metadm.strategy!r}") from exc
        self.metadm.to_metadm(self.seed).validate(active=self.metadm.method == "metadm")
        if f.n_way < 1 or f.k_shot < 1 or f.n_query < 1 or f.n_query_train < 1:
            raise ConfigError("fsl episode shape must be positive")
        if f.episodes_eval < 2:
            raise ConfigError("fsl.episodes_eval must be >= 2")
        if f.lambda_reg < 0 or f.lr < 0:
            raise ConfigError("fsl.lr and fsl.lambda_reg must be non-negative")
        if f.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"fsl.optimizer must be adam or sgd, got {f.optimizer!r}")
        return self


SECTIONS = ("dataset", "diffusion", "metadm", "fsl")


def _convert(raw: str, typ, where: str):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from exc


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def set_value(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply one ``section.key=value`` (or top-level ``key=value``) override."""
    if "." in dotted:
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
    else:
        key, target = dotted, cfg
    types = _field_types(type(target))
    if key not in types or key in SECTIONS:
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(target, key, _convert(raw, types[key], dotted))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(cfg, key if section == "run" else f"{section}.{key}", raw)
    return cfg


def load_config(path=None, overrides=(), seed=None, output_dir=None) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides, then explicit flags.

    The ``METADM_OUTPUT_DIR`` environment variable overrides ``output_dir``
    from the file, but an explicit flag still wins.
    """
    cfg = RunConfig()
    if path is not None:
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg)
    if os.environ.get(OUTPUT_DIR_ENV):
        cfg.output_dir = os.environ[OUTPUT_DIR_ENV]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_value(cfg, k.strip(), v)
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = output_dir
    return cfg.validate()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig, include_output_dir: bool = True) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    run = {"seed": _fmt(cfg.seed)}
    if include_output_dir:
        run["output_dir"] = cfg.output_dir
    parser["run"] = run
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the resolved config, ignoring where outputs are written."""
    return hashlib.sha256(dump_config(cfg, include_output_dir=False).encode()).hexdigest()


def copy_config(cfg: RunConfig) -> RunConfig:
    return parse_config(dump_config(cfg))

"""Run configuration: two profiles, an INI file on top, ``section.key=value`` overrides last.

Example file::

    [run]
    profile = desk
    seed = 0

    [train]
    epochs = 10

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Iterable

from .augmentation import AugmentConfig
from .retrieval import SearchConfig
from .training import TrainConfig


@dataclass(frozen=True)
class RunSection:
    profile: str = "desk"
    seed: int = 0
    threads: int = 1
    run_tag: str = "formularank"


@dataclass(frozen=True)
class ModelSection:
    dim: int = 32
    n_layers: int = 2
    min_frequency: int = 2
    head_order: str = "relu_normalize"


@dataclass(frozen=True)
class AugmentSection:
    p1: float = 0.3
    p2: float = 0.005
    p3: float = 0.002
    mask_rate: float = 0.01
    substitution: bool = True
    masking: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 3e-3
    temperature: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_nodes: int = 3


@dataclass(frozen=True)
class SemanticSection:
    provider: str = "fallback"
    dim: int = 256
    max_length: int = 1024
    unit: str = "chars"


@dataclass(frozen=True)
class SearchSection:
    lam: float = 0.5
    stage1_k: int = 2000
    final_n: int = 100


@dataclass(frozen=True)
class EvalSection:
    k_rrf: float = 60.0
    depth: int = 1000


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    train: TrainSection = field(default_factory=TrainSection)
    semantic: SemanticSection = field(default_factory=SemanticSection)
    search: SearchSection = field(default_factory=SearchSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def augment_config(self) -> AugmentConfig:
        a = self.augment
        return AugmentConfig(a.p1, a.p2, a.p3, a.mask_rate, self.run.seed, a.substitution, a.masking)

    def train_config(self) -> TrainConfig:
        t, m = self.train, self.model
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate,
            temperature=t.temperature, beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps,
            seed=self.run.seed, dim=m.dim, n_layers=m.n_layers, min_frequency=m.min_frequency,
            head_order=m.head_order, min_nodes=t.min_nodes,
        )

    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(s.lam, s.stage1_k, s.final_n)

    def validate(self) -> None:
        """Raise ValueError if any section is inconsistent."""
        self.augment_config()
        self.train_config()
        self.search_config()
        if self.model.head_order not in ("relu_normalize", "normalize_relu"):
            raise ValueError(f"unknown head_order {self.model.head_order!r}")
        if self.semantic.provider not in ("fallback", "import"):
            raise ValueError("semantic.provider must be 'fallback' or 'import'")
        if self.semantic.unit not in ("chars", "tokens"):
            raise ValueError("semantic.unit must be 'chars' or 'tokens'")
        if self.run.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.run.profile!r}")
        if self.run.threads < 1 or self.semantic.dim < 1 or self.semantic.max_length < 1:
            raise ValueError("threads, semantic.dim and semantic.max_length must be positive")
        if self.eval.k_rrf < 0 or self.eval.depth < 1:
            raise ValueError("eval.k_rrf must be >= 0 and eval.depth >= 1")

    def to_ini(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for f in fields(getattr(self, sec.name)):
                value = getattr(getattr(self, sec.name), f.name)
                lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
            lines.append("")
        return "\n".join(lines)


PROFILES = {
    "desk": RunConfig(),
    "full": RunConfig(
        run=RunSection(profile="full"),
        model=ModelSection(dim=400, n_layers=2, min_frequency=11),
        train=TrainSection(epochs=25, batch_size=2560, learning_rate=1e-4),
        semantic=SemanticSection(provider="import", dim=384),
        search=SearchSection(lam=0.5, stage1_k=500_000, final_n=1000),
    ),
}


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    names = {f.name for f in fields(cfg)}
    if section not in names:
        raise ValueError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    keys = {f.name for f in fields(sec)}
    if key not in keys:
        raise ValueError(f"unknown config key {section}.{key}")
    try:
        value = _convert(raw, getattr(sec, key))
    except ValueError as exc:
        raise ValueError(f"bad value for {section}.{key}: {exc}") from exc
    return replace(cfg, **{section: replace(sec, **{key: value})})


def load_config(text: str | None = None, overrides: Iterable[str] = (), profile: str | None = None) -> RunConfig:
    """Build a config from a profile, an optional INI text and ``section.key=value`` overrides.

    The profile comes from ``profile``, else ``[run] profile`` in the file, else ``desk``.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    if text:
        parser.read_string(text)
    file_profile = parser.get("run", "profile", fallback=None) if parser.has_section("run") else None
    name = profile or file_profile or "desk"
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[name]
    for section in parser.sections():
        for key, raw in parser.items(section):
            if section == "run" and key == "profile":
                continue
            cfg = _apply(cfg, section, key, raw)
    for item in overrides:
        target, sep, raw = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        cfg = _apply(cfg, section, key.strip(), raw)
    cfg = replace(cfg, run=replace(cfg.run, profile=name))
    cfg.validate()
    return cfg


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)

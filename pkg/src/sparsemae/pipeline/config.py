"""Pipeline configuration and its INI-style text format."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    dim: int = 32
    heads: int = 2
    blocks: int = 1
    cluster_size: int = 16
    groups: int = 3
    rate: float = 0.4  # fraction kept when merging into the next stage


def _default_stages() -> list[StageConfig]:
    return [StageConfig(32, 2, 1, 16, 3, 0.4), StageConfig(48, 2, 1, 16, 3, 0.4)]


@dataclass
class PipelineConfig:
    image_size: int = 64
    patch: int = 4
    channels: int = 1
    stages: list[StageConfig] = field(default_factory=_default_stages)
    pos_freqs: int = 4
    bias_hidden: int = 8
    mlp_ratio: int = 2
    scorer_hidden: int = 16
    merge_k: int = 8
    # decoder
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 2
    gather_k: int = 4
    self_k: int = 8
    offset_clamp: float = 2.0  # in patch widths
    # objective
    deep_sup_weight: float = 0.5
    norm_pix: bool = False
    # masking
    mask_strategy: str = "perlin"
    mask_ratio: float = 0.5
    perlin_octaves: int = 2
    perlin_base_freq: int = 4
    perlin_persistence: float = 0.5
    # optimisation
    lr: float = 2e-3
    warmup_steps: int = 100
    steps: int = 2000
    batch_size: int = 4
    weight_decay: float = 0.05
    beta1: float = 0.883
    beta2: float = 0.935
    adam_eps: float = 1e-8
    rank_every: int = 100
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.validate()

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if not self.stages:
            raise ConfigError("need at least one encoder stage")
        for i, s in enumerate(self.stages):
            if not 0.0 < s.rate <= 1.0:
                raise ConfigError(f"stage {i}: rate {s.rate} outside (0, 1]")
            if s.dim % s.heads:
                raise ConfigError(f"stage {i}: dim {s.dim} not divisible by heads {s.heads}")
            if s.cluster_size < 1 or s.groups < 1 or s.blocks < 0:
                raise ConfigError(f"stage {i}: cluster_size, groups must be >= 1 and blocks >= 0")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim {self.dec_dim} not divisible by dec_heads {self.dec_heads}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio {self.mask_ratio} outside [0, 1)")
        if self.mask_strategy not in ("perlin", "random"):
            raise ConfigError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.gather_k < 1 or self.self_k < 1:
            raise ConfigError("gather_k and self_k must be >= 1")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    # -- text format ---------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        flat = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "stages"}
        cp["pipeline"] = {k: str(v) for k, v in flat.items()}
        for i, s in enumerate(self.stages):
            cp[f"stage{i}"] = {k: str(v) for k, v in dataclasses.asdict(s).items()}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        values = dict(cp["pipeline"]) if cp.has_section("pipeline") else {}
        stage_sections = sorted((s for s in cp.sections() if s.startswith("stage")), key=lambda s: int(s[5:]))
        stages = [dict(cp[s]) for s in stage_sections]
        for key, val in (overrides or {}).items():
            if "." in key:
                sec, sub = key.split(".", 1)
                if not sec.startswith("stage"):
                    raise ConfigError(f"unknown override section in {key!r}")
                i = int(sec[5:])
                while len(stages) <= i:
                    stages.append({})
                stages[i][sub] = val
            else:
                values[key] = val
        return cls.from_strings(values, stages)

    @classmethod
    def from_strings(cls, values: dict[str, str], stages: list[dict[str, str]]) -> "PipelineConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in types or key == "stages":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], raw, key)
        if stages:
            stypes = {f.name: f.type for f in dataclasses.fields(StageConfig)}
            built = []
            for i, st in enumerate(stages):
                defaults = dataclasses.asdict(_default_stages()[min(i, 1)])
                for key, raw in st.items():
                    if key not in stypes:
                        raise ConfigError(f"unknown stage key {key!r}")
                    defaults[key] = _coerce(stypes[key], raw, f"stage{i}.{key}")
                built.append(StageConfig(**defaults))
            kwargs["stages"] = built
        return cls(**kwargs)


def _coerce(type_name, raw, key):
    t = str(type_name)
    try:
        if t == "bool":
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} ({t})") from None


def toy_config(**changes) -> PipelineConfig:
    return PipelineConfig(**changes)


def tiny_config(**changes) -> PipelineConfig:
    """Smallest meaningful model, for gradient checks and fast tests."""
    base = dict(
        image_size=16, patch=4, stages=[StageConfig(8, 2, 1, 4, 2, 0.5), StageConfig(8, 2, 1, 4, 2, 0.5)],
        pos_freqs=2, bias_hidden=3, mlp_ratio=2, scorer_hidden=4, merge_k=3,
        dec_dim=8, dec_depth=2, dec_heads=2, gather_k=3, self_k=3,
        # a 4x4 patch grid puts every sample on a noise-lattice corner, so noise masks would not vary
        mask_strategy="random",
    )
    base.update(changes)
    return PipelineConfig(**base)

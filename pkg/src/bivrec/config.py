"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


VIEW_MODES = ("both", "pure_id", "pure_mm")
MODALITIES = ("image", "text", "both")
GAUSS_MODES = ("mul", "logadd")


@dataclass
class RunConfig:
    # multi-scale embedding
    max_len: int = 20
    scales: tuple[int, ...] = (1, 4)
    dim: int = 256
    common_dim: int = 0  # 0 means "same as dim"
    # intra-view decomposition
    gauss_layers: int = 1
    k_list: tuple[int, ...] = (4,)
    f_top: int = 1
    tau: float = 1.0
    gauss_mode: str = "mul"
    use_sqrt_scaling: bool = True
    use_ffn: bool = True
    # cross-view learning
    lambda1: float = 0.5
    lambda2: float = 0.3
    beta_init: float = 0.07
    normalize_common: bool = True
    # optimization
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 64
    neg_samples: int = 128
    max_iters: int = 10_000
    log_every: int = 100
    ckpt_every: int = 1000
    seed: int = 0
    view_mode: str = "both"
    # data and evaluation
    modality: str = "both"
    min_interactions: int = 5  # keep users/items with strictly more than this
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    k_eval: int = 20
    filter_history: bool = False
    eval_workers: int = 1

    @property
    def d_common(self) -> int:
        return self.common_dim or self.dim

    @property
    def views(self) -> tuple[str, ...]:
        return {"both": ("id", "mm"), "pure_id": ("id",), "pure_mm": ("mm",)}[self.view_mode]

    @property
    def num_tokens(self) -> int:
        return sum(self.max_len // s for s in self.scales)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        if self.max_len < 1:
            raise ConfigError("max_len", "must be positive")
        if not self.scales or self.scales[0] != 1:
            raise ConfigError("scales", "must list scale 1 first")
        for s in self.scales:
            if s < 1 or self.max_len % s:
                raise ConfigError("scales", f"max_len {self.max_len} is not divisible by scale {s}")
        if len(set(self.scales)) != len(self.scales):
            raise ConfigError("scales", "duplicate scale")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list", "must be a non-empty list of positive counts")
        if any(b >= a for a, b in zip(self.k_list, self.k_list[1:])):
            raise ConfigError("k_list", "interest counts must decrease stage to stage")
        if not 1 <= self.f_top <= min(self.k_list):
            raise ConfigError("f_top", f"must lie in [1, {min(self.k_list)}]")
        for key in ("tau", "lr", "beta_init"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        for key in ("lambda1", "lambda2"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        for key in ("dim", "batch", "neg_samples", "k_eval", "log_every", "ckpt_every", "eval_workers"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be positive")
        for key in ("gauss_layers", "max_iters", "seed", "common_dim", "min_interactions"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be non-negative")
        if self.view_mode not in VIEW_MODES:
            raise ConfigError("view_mode", f"expected one of {VIEW_MODES}")
        if self.modality not in MODALITIES:
            raise ConfigError("modality", f"expected one of {MODALITIES}")
        if self.gauss_mode not in GAUSS_MODES:
            raise ConfigError("gauss_mode", f"expected one of {GAUSS_MODES}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split", "expects three non-negative ratios summing to 1")
        return self

    # -- text format ---------------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key = value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(key, "unknown config key")
            values[key] = _parse(key, types[key], value)
        cfg = dataclasses.replace(base or cls(), **values)
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _parse(key: str, type_name: str, text: str):
    try:
        if type_name == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "str":
            return text
        if type_name.startswith("tuple[int"):
            return tuple(int(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip())
        if type_name.startswith("tuple[float"):
            return tuple(float(v) for v in text.replace("[", "").replace("]", "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {type_name}") from None
    raise ConfigError(key, f"unsupported type {type_name}")


def full_scale_preset(dataset: str = "amazon") -> RunConfig:
    """Hyperparameters for full-scale runs."""
    if dataset == "movielens":
        scales, k_list = (1, 4, 8), (24, 4)
    else:
        scales, k_list = (1, 4), (4,)
    return RunConfig(scales=scales, k_list=k_list, f_top=1, lambda1=0.5, lambda2=0.3,
                     dim=256, tau=1.0, beta_init=0.07, lr=0.001, batch=2048,
                     max_iters=1_000_000, max_len=40).validate()

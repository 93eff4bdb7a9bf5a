"""Run configuration: a flat dataclass persisted as ``key=value`` lines."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .backbone import EncoderConfig
from .errors import ConfigurationError
from .objectives import LossConfig

SEED_ENV = "DMPT_SEED"


@dataclass(frozen=True)
class RunConfig:
    # encoder
    layers: int = 2
    d_v: int = 32
    d_t: int = 32
    d_e: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    image_size: int = 8
    patch_size: int = 4
    text_object: str = "person"
    # prompts and interaction
    S: int = 32
    M: int = 1
    k: int = 1
    shared_proj: bool = False
    use_semantic: bool = True
    use_modality: bool = True
    use_bind: bool = True
    use_text: bool = True
    anchors: str = "modality"
    # loss
    tau: float = 0.07
    margin: float = 0.3
    label_smoothing: float = 0.1
    w_ce: float = 1.0
    w_tri: float = 1.0
    w_mae: float = 1.0
    w_con: float = 1.0
    # optimisation
    lr: float = 0.001
    warmup_frac: float = 0.1
    weight_decay: float = 0.0001
    P: int = 4
    K: int = 4
    steps: int = 300
    seed: int = 0
    backbone_seed: int = 0
    # io
    data: str = ""
    out: str = "runs/default"
    ckpt_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        for name in ("S", "M", "k"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.use_bind and not self.use_semantic:
            raise ConfigurationError("bind prompts require semantic prompts")
        if self.use_modality and not self.use_semantic:
            raise ConfigurationError("modality prompts require semantic prompts")
        if self.k_eff > 0 and self.S_eff == 0:
            raise ConfigurationError("interaction layers need at least one semantic prompt token (S > 0)")
        if self.anchors not in ("modality", "identity"):
            raise ConfigurationError(f"anchors must be 'modality' or 'identity', got {self.anchors!r}")
        if self.steps < 0 or self.P < 1 or self.K < 1:
            raise ConfigurationError("steps, P and K must be positive")
        self.encoder  # validates encoder shapes
        self.loss

    @property
    def S_eff(self) -> int:
        return self.S if self.use_semantic else 0

    @property
    def M_eff(self) -> int:
        return self.M if self.use_modality else 0

    @property
    def k_eff(self) -> int:
        return self.k if self.use_bind else 0

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            layers=self.layers, d_v=self.d_v, d_t=self.d_t, d_e=self.d_e, heads=self.heads,
            image_size=self.image_size, patch_size=self.patch_size, mlp_ratio=self.mlp_ratio,
            text_object=self.text_object,
        )

    @property
    def loss(self) -> LossConfig:
        w_con = self.w_con if self.use_text else 0.0
        return LossConfig(self.tau, self.margin, self.label_smoothing, (self.w_ce, self.w_tri, self.w_mae, w_con))

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)

    def to_lines(self) -> list[str]:
        return [f"{key}={_format(value)}" for key, value in asdict(self).items()]


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(key: str, text: str):
    kind = _TYPES.get(key)
    if kind is None:
        raise ConfigurationError(f"unknown config key {key!r}")
    text = text.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None
    return text


def parse_lines(lines) -> dict:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), value)
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < $DMPT_SEED < config file < explicit overrides."""
    values: dict = {}
    if os.environ.get(SEED_ENV):
        values["seed"] = parse_value("seed", os.environ[SEED_ENV])
    if path:
        values.update(parse_lines(Path(path).read_text(encoding="utf-8").splitlines()))
    values.update(overrides or {})
    return RunConfig(**values)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text("\n".join(cfg.to_lines()) + "\n", encoding="utf-8")

"""Run configuration stored as an INI-style text file.

Every field lives in a named section; unknown sections or keys are rejected
so a typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneSpec, VisibilityMatrix
from .modality import DEFAULT_NAMES
from .model import ModelConfig, VariantConfig
from .training import LossWeights


class ConfigError(ValueError):
    pass


def _f(section: str, default, **kw):
    return field(default=default, metadata={"section": section}, **kw)


@dataclass(frozen=True)
class RunConfig:
    # data
    modalities: tuple[str, ...] = _f("data", DEFAULT_NAMES)
    height: int = _f("data", 64)
    width: int = _f("data", 64)
    num_classes: int = _f("data", 5)
    min_shapes: int = _f("data", 3)
    max_shapes: int = _f("data", 6)
    noise: float = _f("data", 0.05)
    data_seed: int = _f("data", 7)
    train_scenes: int = _f("data", 512)
    eval_scenes: int = _f("data", 128)
    dataset_dir: str = _f("data", "data")
    # model
    channels: tuple[int, ...] = _f("model", (16, 32, 64, 128))
    encoder_depth: int = _f("model", 2)
    mpu_depth: int = _f("model", 2)
    heads: int = _f("model", 2)
    windows: tuple[int, ...] = _f("model", (4, 4, 2, 2))
    dec_channels: int = _f("model", 64)
    # variant
    use_mpu: bool = _f("variant", True)
    use_col: bool = _f("variant", True)
    use_ine: bool = _f("variant", True)
    use_kl_align: bool = _f("variant", False)
    allow_align_with_mpu: bool = _f("variant", False)
    # loss
    lambda_col: float = _f("loss", 1.0)
    lambda_ine: float = _f("loss", 1.0)
    lambda_align: float = _f("loss", 0.0)
    # train
    seed: int = _f("train", 7)
    steps: int = _f("train", 2000)
    batch_size: int = _f("train", 4)
    lr: float = _f("train", 1e-3)
    checkpoint_dir: str = _f("train", "checkpoint")
    log_every: int = _f("train", 100)
    # eval
    eval_batch_size: int = _f("eval", 16)
    eval_workers: int = _f("eval", 1)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.train_scenes < 1 or self.eval_scenes < 1:
            raise ConfigError("scene counts must be positive")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality names")
        try:
            self.model_config()
            self.variant()
            self.loss_weights()
            self.scene_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived views ------------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(modalities=self.modalities, num_classes=self.num_classes,
                           channels=self.channels, encoder_depth=self.encoder_depth,
                           mpu_depth=self.mpu_depth, heads=self.heads, windows=self.windows,
                           dec_channels=self.dec_channels)

    def variant(self) -> VariantConfig:
        return VariantConfig(use_mpu=self.use_mpu, use_col=self.use_col, use_ine=self.use_ine,
                             use_kl_align=self.use_kl_align,
                             allow_align_with_mpu=self.allow_align_with_mpu)

    def loss_weights(self) -> LossWeights:
        return LossWeights(col=self.lambda_col, ine=self.lambda_ine, align=self.lambda_align)

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(height=self.height, width=self.width, num_classes=self.num_classes,
                         modalities=self.modalities, min_shapes=self.min_shapes,
                         max_shapes=self.max_shapes, noise=self.noise)

    def visibility(self) -> VisibilityMatrix:
        return VisibilityMatrix.default(self.num_classes, len(self.modalities))

    def model_hash(self) -> str:
        """Digest of everything that determines the parameter registry and forward."""
        keys = [f.name for f in dataclasses.fields(self)
                if f.metadata["section"] in ("model", "variant")] + ["modalities", "num_classes"]
        text = "\n".join(f"{k}={_dump(getattr(self, k))}" for k in sorted(keys))
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ----------------------------------------------------------
    def to_text(self) -> str:
        sections: dict[str, dict[str, str]] = {}
        for f in dataclasses.fields(self):
            sections.setdefault(f.metadata["section"], {})[f.name] = _dump(getattr(self, f.name))
        lines = []
        for name, items in sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {v}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".replace("\n", " ")) from exc
        known = {f.name: f for f in dataclasses.fields(cls)}
        sections = {f.metadata["section"] for f in known.values()}
        values = {}
        for sec in cp.sections():
            if sec not in sections:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, raw in cp[sec].items():
                f = known.get(key)
                if f is None or f.metadata["section"] != sec:
                    raise ConfigError(f"unknown config key {key!r} in [{sec}]")
                values[key] = _load(raw, f.default, key)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text())


def _dump(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _load(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(int(x) for x in items) if isinstance(default[0], int) else tuple(items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None

"""Plain-text run configuration (``key = value`` lines, ``#`` comments)."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .features import ARCHITECTURES, EncoderConfig, FeatureExtractorSpec, LearningConfig
from .mlp import TrainConfig
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


ENCODERS = {"omp1_soft": ("omp1", "soft_threshold_polarity"),
            "kmeans_triangle": ("kmeans", "triangle_kmeans")}


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) != 3:
        raise ValueError("expected one or three integers")
    return tuple(parts)


def _switch(text: str) -> bool:
    if text.lower() in ("on", "true", "yes", "1"):
        return True
    if text.lower() in ("off", "false", "no", "0"):
        return False
    raise ValueError("expected on|off")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {'|'.join(options)}")
        return text
    return parse


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class RunConfig:
    """All run settings; defaults give the multiscale foveated network with dropout."""

    architecture: str = "ms-fv"
    representation: str = "foveated"
    patch_size: tuple[int, int, int] = (5, 5, 5)
    neighborhood: tuple[int, int, int] = (5, 5, 5)
    scales: tuple[int, ...] = (1, 2)
    pooling: str = "max"
    dict_size: int = 1000
    encoder: str = "omp1_soft"
    alpha: float = 0.25
    whitening: bool = False
    feature_dims: int | None = None
    dict_patches: int = 10000
    dict_epochs: int = 10
    hidden_layers: int = 1
    hidden_units: int = 200
    learning_rate: float = 0.02
    batch_size: int = 40
    updates: int = 500_000
    dropout_hidden: float = 0.5
    dropout_input: float = 0.0
    inverse_margin: float = 0.1
    iterations: int = 1
    led: bool = False
    led_window: int = 5
    led_frac: float = 0.5
    led_multiplier: float = 10.0
    augment: bool = True
    subsample_fraction: float = 0.1
    normalizer_sample: int = 100_000
    seed: int = 0
    shard_count: int = 1
    workers: int = 1
    tile: int = 32

    def spec(self) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(
            representation=self.representation, dict_size=self.dict_size, scales=self.scales,
            patch_shape=self.patch_size, neighborhood=self.neighborhood, pooling=self.pooling,
            encoder=EncoderConfig(ENCODERS[self.encoder][1], self.alpha))

    def pipeline(self) -> PipelineConfig:
        learning = LearningConfig(ENCODERS[self.encoder][0], self.dict_patches, self.dict_epochs,
                                  self.whitening)
        train = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                            updates=self.updates, dropout_hidden=self.dropout_hidden,
                            dropout_input=self.dropout_input, inverse_margin=self.inverse_margin,
                            hidden_units=self.hidden_units, hidden_layers=self.hidden_layers,
                            seed=self.seed)
        return PipelineConfig(spec=self.spec(), learning=learning, train=train,
                              subsample_fraction=self.subsample_fraction,
                              shard_count=self.shard_count, workers=self.workers,
                              normalizer_sample=self.normalizer_sample, tile=self.tile,
                              led_window=self.led_window, led_frac=self.led_frac,
                              led_multiplier=self.led_multiplier, seed=self.seed)

    def validate(self) -> "RunConfig":
        """Build every derived object once so precondition failures surface early."""
        checks = {"spec": self.spec, "pipeline": self.pipeline}
        for name, build in checks.items():
            try:
                build()
            except ValueError as e:
                raise ConfigError(f"invalid settings ({name}): {e}") from None
        if self.iterations < 1:
            raise ConfigError("iterations: must be >= 1")
        if self.iterations > 1 and self.dict_size % 2:
            raise ConfigError("dict_size: must be even when iterations > 1")
        if self.led_window < 1 or self.led_window % 2 == 0:
            raise ConfigError("led_window: must be odd and >= 1")
        if not 0 <= self.led_frac < 1:
            raise ConfigError("led_frac: must be in [0, 1)")
        derived = self.spec().dims
        if self.feature_dims is not None and self.feature_dims != derived:
            raise ConfigError(f"feature_dims: {self.feature_dims} does not match the derived "
                              f"dimensionality {derived}")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "feature_dims":
                v = self.spec().dims
            elif isinstance(v, bool):
                v = "on" if v else "off"
            elif isinstance(v, tuple):
                v = ",".join(str(a) for a in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "architecture": _choice(*ARCHITECTURES),
    "representation": _choice("rf", "foveated"),
    "patch_size": _triple,
    "neighborhood": _triple,
    "scales": _ints,
    "pooling": _choice("max", "average"),
    "dict_size": int,
    "encoder": _choice(*ENCODERS),
    "alpha": float,
    "whitening": _switch,
    "feature_dims": int,
    "dict_patches": int,
    "dict_epochs": int,
    "hidden_layers": int,
    "hidden_units": int,
    "learning_rate": float,
    "batch_size": int,
    "updates": int,
    "dropout_hidden": float,
    "dropout_input": float,
    "inverse_margin": float,
    "iterations": int,
    "led": _switch,
    "led_window": int,
    "led_frac": float,
    "led_multiplier": float,
    "augment": _switch,
    "subsample_fraction": float,
    "normalizer_sample": int,
    "seed": int,
    "shard_count": int,
    "workers": int,
    "tile": int,
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse config text.  ``architecture`` (if present) sets the base feature
    settings; explicit keys override it regardless of order."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (t.strip() for t in line.partition("="))
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        if key not in _PARSERS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{n}: bad value for {key!r}: {e}") from None
    return config_from_values(values)


def config_from_values(values: dict) -> RunConfig:
    base = RunConfig()
    if "architecture" in values:
        a = ARCHITECTURES[values["architecture"]]
        base = replace(base, architecture=values["architecture"],
                       representation=a.representation, dict_size=a.dict_size, scales=a.scales,
                       patch_size=a.patch_shape, neighborhood=a.neighborhood, pooling=a.pooling)
    return replace(base, **{k: v for k, v in values.items() if k != "architecture"}).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))

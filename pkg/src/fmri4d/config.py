"""Run configuration: flat dotted keys with defaults, file loading and overrides.

File syntax, one setting per line::

    # comment
    model.growth_rate = 8
    train.lr = 1e-4
    data.shape = 16,16,16,64

Precedence (lowest first): built-in defaults, config file, command-line flags.
Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .data import SynthConfig
from .models import ModelSpec, parse_variant
from .training import TrainConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _variant(text: str) -> str:
    parse_variant(text)
    return text


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    help: str


def _keys() -> list[Key]:
    m, t, s = ModelSpec(), TrainConfig(), SynthConfig()
    return [
        Key("model.variant", "cnn4d", _variant, "cnn3d-tc, cnn3d-ms, convgru-cnn3d or cnn4d"),
        Key("model.init_filters", m.init_filters, int, "filters of the initial convolution"),
        Key("model.growth_rate", m.growth_rate, int, "channels added per dense layer"),
        Key("model.layers_per_block", m.layers_per_block, int, "composite layers per dense block"),
        Key("model.blocks", m.blocks, int, "number of dense blocks"),
        Key("model.compression", m.compression, float, "transition channel compression factor"),
        Key("model.batch_norm", m.batch_norm, _bool, "use batch normalisation"),
        Key("model.gru_hidden", m.gru_hidden, int, "convGRU hidden channels"),
        Key("model.kernel", m.kernel, int, "odd kernel extent per axis"),
        Key("model.init_stride", m.init_stride, int, "stride of the initial convolution"),
        Key("model.seed", m.seed, int, "parameter initialisation seed"),
        Key("model.dtype", "float32", _choice("float32", "float64"), "parameter and activation precision"),
        Key("model.conv_path", "im2col", _choice("im2col", "direct"), "convolution implementation"),
        Key("train.epochs", t.epochs, int, "training epochs"),
        Key("train.batch_size", t.batch_size, int, "crops per optimisation step"),
        Key("train.lr", t.lr, float, "Adam learning rate"),
        Key("train.beta1", t.beta1, float, "Adam beta1"),
        Key("train.beta2", t.beta2, float, "Adam beta2"),
        Key("train.eps", t.eps, float, "Adam epsilon"),
        Key("train.val_interval", t.val_interval, int, "epochs between validations (clamped to epochs)"),
        Key("train.crop_length", t.crop_length, int, "time steps per crop"),
        Key("train.selection_metric", t.selection_metric, _choice("f1", "accuracy"), "best-model criterion"),
        Key("train.seed", t.seed, int, "shuffle and crop seed"),
        Key("data.manifest", "", str, "manifest path (train, eval)"),
        Key("data.stride", t.eval_stride, int, "sliding-window stride for evaluation"),
        Key("data.out_dir", "synthetic", str, "output directory (synth)"),
        Key("data.train_per_class", s.train_per_class, int, "training subjects per class (synth)"),
        Key("data.val_per_class", s.val_per_class, int, "validation subjects per class (synth)"),
        Key("data.test_per_class", s.test_per_class, int, "test subjects per class (synth)"),
        Key("data.shape", s.shape, _shape, "image extents X,Y,Z,T (synth)"),
        Key("data.sampling_period", s.sampling_period, float, "seconds per time step (synth)"),
        Key("data.mode", s.mode, _choice("amplitude", "phase"), "class signal (synth)"),
        Key("data.amplitude", s.amplitude, float, "class signal amplitude (synth)"),
        Key("data.noise_std", s.noise_std, float, "Gaussian noise std (synth)"),
        Key("data.freq_lo", s.freq_lo, float, "lowest signal frequency in Hz (synth)"),
        Key("data.freq_hi", s.freq_hi, float, "highest signal frequency in Hz (synth)"),
        Key("data.region_fraction", s.region_fraction, float, "ellipsoid semi-axis / extent (synth)"),
        Key("data.wavelength", s.wavelength, float, "travelling-wave length in voxels (synth, phase)"),
        Key("data.seed", s.seed, int, "generator seed (synth)"),
        Key("run.out_dir", "run", str, "checkpoint and log directory (train)"),
    ]


KEYS: dict[str, Key] = {k.name: k for k in _keys()}


class ConfigError(ValueError):
    pass


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """Merged settings; read values with ``cfg["train.lr"]``."""

    def __init__(self, values: dict | None = None):
        self._values = {name: key.default for name, key in KEYS.items()}
        self.sources = {name: "default" for name in KEYS}
        for name, value in (values or {}).items():
            self.set(name, value, "api")

    def __getitem__(self, name: str):
        return self._values[name]

    def set(self, name: str, value, source: str = "api") -> None:
        if name not in KEYS:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(value, str):
            try:
                value = KEYS[name].parse(value)
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        self._values[name] = value
        self.sources[name] = source

    def update_text(self, text: str, source: str = "file") -> None:
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source} line {no}: expected key = value")
            try:
                self.set(name.strip(), value.strip(), source)
            except ConfigError as e:
                raise ConfigError(f"{source} line {no}: {e}") from None

    def load(self, path) -> None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        self.update_text(text, str(path))

    def dumps(self) -> str:
        return "".join(f"{name} = {format_value(self._values[name])}\n" for name in KEYS)

    # -- typed views ---------------------------------------------------------

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self["model.dtype"])

    def model_spec(self, extents) -> ModelSpec:
        """ModelSpec for spatial ``extents`` (X, Y, Z) and the configured crop length."""
        return ModelSpec(
            variant=self["model.variant"],
            init_filters=self["model.init_filters"],
            growth_rate=self["model.growth_rate"],
            layers_per_block=self["model.layers_per_block"],
            blocks=self["model.blocks"],
            compression=self["model.compression"],
            batch_norm=self["model.batch_norm"],
            gru_hidden=self["model.gru_hidden"],
            kernel=self["model.kernel"],
            init_stride=self["model.init_stride"],
            input_shape=tuple(extents[:3]) + (self["train.crop_length"],),
            seed=self["model.seed"],
        )

    def train_config(self, clamp_interval: bool = True) -> TrainConfig:
        epochs = self["train.epochs"]
        interval = self["train.val_interval"]
        if clamp_interval and epochs >= 1:
            interval = min(interval, epochs)
        return TrainConfig(
            epochs=epochs, batch_size=self["train.batch_size"], lr=self["train.lr"],
            beta1=self["train.beta1"], beta2=self["train.beta2"], eps=self["train.eps"],
            val_interval=interval, crop_length=self["train.crop_length"], eval_stride=self["data.stride"],
            selection_metric=self["train.selection_metric"], seed=self["train.seed"],
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            train_per_class=self["data.train_per_class"], val_per_class=self["data.val_per_class"],
            test_per_class=self["data.test_per_class"], shape=self["data.shape"],
            sampling_period=self["data.sampling_period"], mode=self["data.mode"],
            amplitude=self["data.amplitude"], noise_std=self["data.noise_std"],
            freq_lo=self["data.freq_lo"], freq_hi=self["data.freq_hi"],
            region_fraction=self["data.region_fraction"], wavelength=self["data.wavelength"],
            seed=self["data.seed"],
        )

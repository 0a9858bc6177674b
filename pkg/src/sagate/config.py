"""Plain-text experiment configs.

One ``key = value`` per line, ``#`` starts a comment. Keys are dotted
(``data.height``, ``model.fusion``, ...); unknown keys are rejected. Lists
are comma separated. Every run writes the fully resolved config next to its
outputs, and tables carry its hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import SceneRecipe
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .model import ModelConfig
from .train import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(conv(t) for t in items)

    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "out_dir": (str, "runs/default"),
    "data.seed": (int, 0),
    "data.n_train": (int, 200),
    "data.n_test": (int, 50),
    "data.height": (int, 64),
    "data.width": (int, 64),
    "data.num_classes": (int, 4),
    "data.visibility": (_list(str), ("rgb", "depth", "both")),
    "data.objects_min": (int, 3),
    "data.objects_max": (int, 5),
    "data.object_size": (_list(float), (0.18, 0.38)),
    "data.confusability": (float, 0.0),
    "data.depth_step": (float, 0.4),
    "data.background_depth": (float, 3.0),
    "data.tilt": (float, 0.4),
    "data.texture": (float, 0.08),
    "data.depth_noise": (float, 0.0),
    "data.rgb_degraded_fraction": (float, 0.0),
    "data.rgb_degraded_confusability": (float, 0.85),
    "data.hha_degraded_fraction": (float, 0.0),
    "data.hha_degraded_std": (float, 60.0),
    "data.complementary": (_bool, True),
    "model.modality": (str, "both"),
    "model.fusion": (str, "proposed"),
    "model.channels": (_list(int), (8, 16, 32, 64)),
    "model.gate_mask": (_list(_bool), (True, True, True, True)),
    "model.stem_channels": (int, 0),
    "model.bmp": (_bool, True),
    "model.shared_mlp": (_bool, True),
    "model.mlp_ratio": (float, 2.0),
    "model.blend_recalibrated": (_bool, False),
    "model.gate_init": (str, "zero"),
    "model.tie_streams": (_bool, False),
    "model.stream_heads": (_bool, False),
    "model.decoder_mid": (int, 16),
    "model.aux": (_bool, True),
    "train.base_lr": (float, 0.02),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.poly_power": (float, 0.9),
    "train.max_iter": (int, 300),
    "train.batch_size": (int, 8),
    "train.aux_weight": (float, 0.2),
    "train.ohem": (_bool, False),
    "train.ohem_keep": (float, 0.25),
    "train.eval_every": (int, 0),
    "train.flip": (_bool, True),
    "train.scales": (_list(float), (1.0,)),
    "train.crop": (int, 0),
    "eval.flip": (_bool, False),
    "eval.batch_size": (int, 16),
    "eval.noise_stds": (_list(float), (10.0, 40.0, 80.0, 120.0)),
    "eval.noise_target": (str, "hha"),
    "eval.noise_seed": (int, 0),
    "ablate.num_seeds": (int, 3),
    "visualize.gate": (int, -1),
    "visualize.samples": (_list(int), (0,)),
}


def parse_text(text: str, path: str | None = None) -> dict[str, Any]:
    """Parse config text into ``{key: typed value}`` (only the keys present)."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, path) from None
    return values


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown key {k!r}")
            merged[k] = v
        self.values = merged
        try:
            self.recipe
            self.model
            self.train
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    # -- construction ------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, path: str | None = None) -> "ExperimentConfig":
        return cls(parse_text(text, path))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.from_text(p.read_text(), str(p))

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with updated keys; pass dotted keys via ``**{"model.fusion": ...}``."""
        vals = dict(self.values)
        vals.update(updates)
        return ExperimentConfig(vals)

    def __getitem__(self, key):
        return self.values[key]

    # -- typed views -----------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def recipe(self) -> SceneRecipe:
        v = self.values
        return SceneRecipe(
            height=v["data.height"],
            width=v["data.width"],
            num_classes=v["data.num_classes"],
            visibility=v["data.visibility"],
            objects_min=v["data.objects_min"],
            objects_max=v["data.objects_max"],
            object_size=v["data.object_size"],
            confusability=v["data.confusability"],
            depth_step=v["data.depth_step"],
            background_depth=v["data.background_depth"],
            tilt=v["data.tilt"],
            texture=v["data.texture"],
            depth_noise=v["data.depth_noise"],
            rgb_degraded_fraction=v["data.rgb_degraded_fraction"],
            rgb_degraded_confusability=v["data.rgb_degraded_confusability"],
            hha_degraded_fraction=v["data.hha_degraded_fraction"],
            hha_degraded_std=v["data.hha_degraded_std"],
            complementary=v["data.complementary"],
            seed=v["data.seed"],
        )

    @property
    def model(self) -> ModelConfig:
        v = self.values
        fusion = FusionConfig(
            kind=v["model.fusion"],
            shared_mlp=v["model.shared_mlp"],
            mlp_ratio=v["model.mlp_ratio"],
            blend_recalibrated=v["model.blend_recalibrated"],
            gate_init=v["model.gate_init"],
        )
        encoder = EncoderConfig(
            channels=v["model.channels"],
            gate_mask=v["model.gate_mask"],
            stem_channels=v["model.stem_channels"],
            fusion=fusion,
            bmp=v["model.bmp"],
            modality=v["model.modality"],
            tie_streams=v["model.tie_streams"],
            stream_heads=v["model.stream_heads"],
        )
        decoder = DecoderConfig(num_classes=v["data.num_classes"], mid_channels=v["model.decoder_mid"], aux_enabled=v["model.aux"])
        return ModelConfig(encoder, decoder)

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            base_lr=v["train.base_lr"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            poly_power=v["train.poly_power"],
            max_iter=v["train.max_iter"],
            batch_size=v["train.batch_size"],
            aux_weight=v["train.aux_weight"],
            ohem_enabled=v["train.ohem"],
            ohem_keep=v["train.ohem_keep"],
            seed=v["seed"],
            eval_every=v["train.eval_every"],
            flip=v["train.flip"],
            scales=v["train.scales"],
            crop=v["train.crop"],
        )

    # -- provenance ----------------------------------------------------------------
    def resolved_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)

    def hash(self) -> str:
        """Short sha256 of the resolved config; ``out_dir`` is excluded so relocated runs match."""
        text = "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA if k != "out_dir")
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "config.resolved.cfg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(f"# config hash {self.hash()}\n" + self.resolved_text())
        return path

"""TOML run configuration with defaults, strict key checking and builders for module configs."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .cbi import TRANSFORM_KINDS
from .gebi import GebiConfig
from .model import TrainConfig
from .stylemix import StdaConfig, StyleTransferConfig
from .synthdata import ARTIFACTS, GeneratorSpec

__all__ = ["ConfigError", "RunConfig", "DEFAULTS"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {
        "n_per_class": 2000,
        "side": 32,
        "seed": 0,
        "radius": [0.22, 0.30],
        "irregularity": [list(r) for r in GeneratorSpec.irregularity],
        "texture": [list(r) for r in GeneratorSpec.texture],
        "frame_shapes": list(GeneratorSpec.frame_shapes),
        "split_fractions": [0.6, 0.1, 0.3],
        "artifacts": {"frame": [0.1, 0.9], "ruler": [0.0, 0.0], "hair": [0.0, 0.0], "circle": [0.0, 0.0]},
    },
    "train": {"epochs": 10, "learning_rate": 0.05, "batch_size": 32, "seed": 0, "lr_decay": 0.9},
    "gebi": {
        "mode": "gebi",
        "image_dims": 10,
        "attribution_dims": 20,
        "knn_k": 10,
        "cluster_k": 4,
        "select_method": "elbow",
        "k_range": [2, 3, 4, 5, 6, 7, 8],
        "explainer": "saliency",
        "target_class": 1,
        "analysis_side": 45,
        "spray_side": 10,
        "equalize_images": True,
        "equalize_maps": True,
        "seed": 0,
        "split": "test",
    },
    "cbi": {"transforms": ["frame", "circle"], "seed": 0, "split": "test"},
    "tda": {"kind": "frame", "ps": [0.0, 0.25, 0.5, 0.75, 1.0], "seeds": [0]},
    "feedback": {"alpha": 0.5, "epochs": 2, "learning_rate": 0.005, "batch_size": 32, "seed": 0, "kind": "frame",
                 "classify_biased": True},
    "stda": {"pairs": 20, "iterations": 30, "step_size": 1e-3, "alpha": 1.0, "beta": 1e-3, "seed": 0},
    "io": {"data_dir": "", "model": ""},
}

# keys whose value is a free-form table validated elsewhere
_TABLES = {("data", "artifacts")}


def _check_type(section, key, default, value):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
    return value


class RunConfig:
    """Fully resolved configuration: defaults overlaid with a TOML document."""

    def __init__(self, data: dict | None = None):
        self.data = copy.deepcopy(DEFAULTS)
        for section, values in (data or {}).items():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]")
            if not isinstance(values, dict):
                raise ConfigError(f"[{section}] must be a table")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"[{section}] unknown key {key!r}")
                if (section, key) in _TABLES:
                    self.data[section][key] = self._artifact_table(value)
                else:
                    self.data[section][key] = _check_type(section, key, DEFAULTS[section][key], value)
        self.validate()

    @staticmethod
    def _artifact_table(value):
        if not isinstance(value, dict):
            raise ConfigError("[data] artifacts: expected a table")
        merged = {k: [0.0, 0.0] for k in ARTIFACTS}
        for kind, probs in value.items():
            if kind not in ARTIFACTS:
                raise ConfigError(f"[data.artifacts] unknown artifact {kind!r}")
            if not isinstance(probs, list) or len(probs) != 2:
                raise ConfigError(f"[data.artifacts] {kind}: expected [p_class0, p_class1]")
            merged[kind] = [float(p) for p in probs]
        return merged

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls(doc)

    def __getitem__(self, section) -> dict:
        return self.data[section]

    def override_seed(self, seed: int) -> None:
        for section in ("data", "train", "gebi", "cbi", "feedback", "stda"):
            self.data[section]["seed"] = seed
        self.data["tda"]["seeds"] = [seed]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.data)

    def write(self, path) -> None:
        Path(path).write_text(self.to_toml())

    # builders -----------------------------------------------------------

    def validate(self) -> None:
        try:
            self.generator_spec()
            self.train_config()
            self.gebi_config()
            self.stda_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for kind in self.data["cbi"]["transforms"]:
            if kind not in TRANSFORM_KINDS:
                raise ConfigError(f"[cbi] transforms: unknown kind {kind!r}")
        for section in ("tda", "feedback"):
            if self.data[section]["kind"] not in TRANSFORM_KINDS:
                raise ConfigError(f"[{section}] kind: unknown transform {self.data[section]['kind']!r}")
        for p in self.data["tda"]["ps"]:
            if not isinstance(p, (int, float)) or not 0 <= p <= 1:
                raise ConfigError("[tda] ps: probabilities must lie in [0, 1]")
        if not 0 <= self.data["feedback"]["alpha"] <= 1:
            raise ConfigError("[feedback] alpha must lie in [0, 1]")
        if self.data["gebi"]["split"] not in ("train", "val", "test") or self.data["cbi"]["split"] not in (
            "train", "val", "test"
        ):
            raise ConfigError("split must be one of train, val, test")

    def generator_spec(self) -> GeneratorSpec:
        d = self.data["data"]
        return GeneratorSpec(
            n_per_class=d["n_per_class"],
            side=d["side"],
            radius=tuple(d["radius"]),
            irregularity=tuple(tuple(r) for r in d["irregularity"]),
            texture=tuple(tuple(r) for r in d["texture"]),
            artifacts={k: tuple(v) for k, v in d["artifacts"].items()},
            frame_shapes=tuple(d["frame_shapes"]),
            split_fractions=tuple(d["split_fractions"]),
            seed=d["seed"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.data["train"])

    def gebi_config(self) -> GebiConfig:
        g = dict(self.data["gebi"])
        g.pop("split")
        g["cluster_k"] = g["cluster_k"] or None
        g["k_range"] = tuple(g["k_range"])
        return GebiConfig(**g)

    def stda_config(self) -> StdaConfig:
        s = self.data["stda"]
        nst = StyleTransferConfig(alpha=s["alpha"], beta=s["beta"], iterations=s["iterations"], step_size=s["step_size"])
        return StdaConfig(nst=nst, seed=s["seed"])

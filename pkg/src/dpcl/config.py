"""Run configuration: one JSON-serializable bundle of every hyperparameter.

Unknown keys are rejected on load so config files cannot silently drift, and
the resolved configuration is echoed to disk by every training entry point.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .scenes import AugConfig, BenchmarkConfig, DomainStyle, SceneSpec, default_target_styles
from .training import TrainConfig
from .tta import TtaConfig
from .utils import ConfigError

OUTPUT_ROOT_ENV = "DPCL_OUTPUT_ROOT"


def _strict_kwargs(cls, d: dict, path: str) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) under '{path}': {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


@dataclass
class RunConfig:
    name: str = "run"
    output_dir: str = "runs"
    data: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "output_dir": self.output_dir,
            "data": {
                "spec": self.data.spec.to_json(),
                "n_train": self.data.n_train,
                "n_val": self.data.n_val,
                "n_target": self.data.n_target,
                "seed": self.data.seed,
                "target_styles": {k: dataclasses.asdict(v) for k, v in self.data.target_styles.items()},
            },
            "train": dataclasses.asdict(self.train),
            "tta": dataclasses.asdict(self.tta),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top_known = {"name", "output_dir", "data", "train", "tta"}
        unknown = set(d) - top_known
        if unknown:
            raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
        cfg = cls()
        cfg.name = d.get("name", cfg.name)
        cfg.output_dir = d.get("output_dir", cfg.output_dir)
        if "data" in d:
            cfg.data = _data_from_dict(d["data"])
        if "train" in d:
            td = dict(d["train"])
            aug = td.pop("aug", None)
            kwargs = _strict_kwargs(TrainConfig, td, "train")
            if aug is not None:
                kwargs["aug"] = AugConfig(**_strict_kwargs(AugConfig, aug, "train.aug"))
            cfg.train = TrainConfig(**kwargs)
        if "tta" in d:
            cfg.tta = TtaConfig(**_strict_kwargs(TtaConfig, d["tta"], "tta"))
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """New config with dotted-path overrides applied (validated strictly)."""
        d = self.to_dict()
        for key, value in overrides.items():
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config path '{key}'")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key '{key}'")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _data_from_dict(d: dict) -> BenchmarkConfig:
    known = {"spec", "n_train", "n_val", "n_target", "seed", "target_styles"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) under 'data': {sorted(unknown)}")
    spec = SceneSpec.from_json(d["spec"]) if "spec" in d else SceneSpec()
    styles = default_target_styles()
    if "target_styles" in d:
        styles = {
            name: DomainStyle(**_strict_kwargs(DomainStyle, sd, f"data.target_styles.{name}"))
            for name, sd in d["target_styles"].items()
        }
    return BenchmarkConfig(
        spec=spec,
        n_train=d.get("n_train", 400),
        n_val=d.get("n_val", 100),
        n_target=d.get("n_target", 100),
        seed=d.get("seed", 0),
        target_styles=styles,
    )


def resolve_output(path) -> Path:
    """Resolve an output path, honoring the DPCL_OUTPUT_ROOT env override."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p

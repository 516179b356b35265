"""Experiment configuration: one JSON document drives every random choice."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .attacks import AttackConfig
from .data import Dataset, Transform, gen_dataset, load_csv
from .defense import DefenseConfig
from .merging import MergeSpec
from .toymodels import ModelSpec, TrainConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# keys that select which runs to do or where to put them, not what a run computes
UNHASHED_KEYS = ("seeds", "output_dir")


def config_hash(raw: dict) -> str:
    body = {k: v for k, v in raw.items() if k not in UNHASHED_KEYS}
    return hashlib.blake2b(canonical_json(body).encode(), digest_size=8).hexdigest()


@dataclass(frozen=True)
class TaskSpec:
    """Either a generator recipe or a CSV path (``csv``) for one task."""

    generator: str = "blobs"
    n: int = 2000
    transform: str = "none"
    layout_seed: int = 0
    seed: int = 0
    noise: float = 0.1
    csv: str | None = None

    def build(self, d: int, C: int, split: str, run_seed: int, task_id: str) -> Dataset:
        if self.csv:
            path = Path(self.csv)
            split_path = path.with_name(f"{path.stem}.{split}{path.suffix}")
            return load_csv(split_path if split_path.exists() else path, C, split, task_id)
        return gen_dataset(self.generator, d, C, self.n, Transform.parse(self.transform),
                           self.seed + run_seed, split=split, task_id=task_id,
                           layout_seed=self.layout_seed, noise=self.noise)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    tasks: dict[str, TaskSpec]
    pretrain: TrainConfig
    finetune_def: TrainConfig
    finetune_fr: TrainConfig
    defense: DefenseConfig
    merges: tuple[MergeSpec, ...]
    attacks: AttackConfig
    seeds: tuple[int, ...]
    output_dir: str = "runs/experiment"
    defense_enabled: bool = True
    ablation: bool = True
    eval_split: str = "test"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        try:
            model = ModelSpec.from_dict(raw["model"])
            tasks = {name: TaskSpec(**raw["tasks"][name]) for name in ("pre", "def", "fr")}
            for name, t in tasks.items():
                if t.csv and not Path(t.csv).exists():
                    raise ConfigError(f"task {name!r}: file {t.csv} does not exist")
            train = raw.get("train", {})
            pretrain = TrainConfig(**train.get("pretrain", {}))
            shared = train.get("finetune", {})
            finetune_def = TrainConfig(**{**shared, **train.get("finetune_def", {})})
            finetune_fr = TrainConfig(**{**shared, **train.get("finetune_fr", {})})
            defense = DefenseConfig.from_dict(raw.get("defense", {}))
            merges = tuple(MergeSpec.from_dict(m) for m in raw.get("merges", [{"method": "ta"}]))
            attacks = AttackConfig.from_dict(raw.get("attacks", {}))
            seeds = tuple(int(s) for s in raw.get("seeds", []))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if not seeds:
            raise ConfigError("config needs a non-empty 'seeds' list")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be unique")
        if raw.get("eval_split", "test") not in ("train", "val", "test"):
            raise ConfigError("eval_split must be train, val or test")
        return cls(model, tasks, pretrain, finetune_def, finetune_fr, defense, merges, attacks, seeds,
                   raw.get("output_dir", "runs/experiment"), bool(raw.get("defense_enabled", True)),
                   bool(raw.get("ablation", True)), raw.get("eval_split", "test"), raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)


def fixture_config_dict() -> dict:
    """The shipped fixture experiment as a plain dict."""
    text = resources.files("mergeproof").joinpath("configs/fixture.json").read_text()
    return json.loads(text)


def fixture_config(**overrides) -> ExperimentConfig:
    raw = fixture_config_dict()
    raw.update(overrides)
    return ExperimentConfig.from_dict(raw)

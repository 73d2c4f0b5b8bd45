"""
Run configuration: one JSON document with `encoder`, `train`, `synthesis`, `data`,
`model` and `seed` sections.

Values resolve in this order, later winning: dataclass defaults, the JSON file, the
environment (MEDIPROBE_THREADS, read from `.env` through python-dotenv), command-line flags.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from loguru import logger

from scripts.encoders import DualEncoder, EncoderConfig
from scripts.errors import ConfigError
from scripts.phantom_data import FamilyId, PhantomFamily
from scripts.prompt_adapter import AdapterMode, PromptAdapterModel, PromptMode
from scripts.seeding import derive_seed
from scripts.synthesis import SynthesisConfig, SynthesisTask
from scripts.trainer import TrainConfig

THREADS_ENV = "MEDIPROBE_THREADS"
LOG_LEVEL_ENV = "MEDIPROBE_LOG_LEVEL"


@dataclass
class DataConfig:
    family: str = FamilyId.BLOB.value
    k: int = 16
    n_test_normal: int = 50
    n_test_anomaly: int = 50
    size: int = 64

    def phantom_family(self) -> PhantomFamily:
        return PhantomFamily.named(self.family)


@dataclass
class ModelConfig:
    prompt_length: int = 8
    tau: float = 0.07
    prompt_mode: str = PromptMode.LEARNABLE.value
    adapter_mode: str = AdapterMode.LINEAR.value


def _section(cls, data: Optional[Dict[str, Any]], name: str):
    data = data or {}
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}' section: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from e


def _synthesis_to_dict(config: SynthesisConfig) -> Dict[str, Any]:
    return {
        "gamma_range": list(config.gamma_range),
        "alpha_range": list(config.alpha_range),
        "sigma_g": config.sigma_g,
        "reference_size": config.reference_size,
        "cutpaste_area_range": list(config.cutpaste_area_range),
        "gauss_area_range": list(config.gauss_area_range),
        "tasks": [t.value for t in config.tasks],
        "task_weights": config.task_weights,
    }


def _synthesis_from_dict(data: Optional[Dict[str, Any]]) -> SynthesisConfig:
    data = dict(data or {})
    for key in ("gamma_range", "alpha_range", "cutpaste_area_range", "gauss_area_range"):
        if key in data:
            data[key] = tuple(data[key])
    return _section(SynthesisConfig, data, "synthesis")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    # seeds the frozen encoder only; independent of `seed`
    encoder_seed: int = 0

    def __post_init__(self):
        self.train.seed = self.seed

    def set_seed(self, seed: int) -> None:
        self.seed = seed
        self.train.seed = seed

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    def validate(self) -> None:
        """
        Raises:
            ConfigError: On any inconsistent section
        """
        self.encoder.validate()
        try:
            self.train.validate()
            PromptMode(self.model.prompt_mode)
            AdapterMode(self.model.adapter_mode)
            self.data.phantom_family()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.data.size != self.encoder.image_size:
            raise ConfigError(f"data.size {self.data.size} must equal encoder.image_size {self.encoder.image_size}")

    def to_dict(self) -> Dict[str, Any]:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "encoder": self.encoder.to_dict(),
            "train": train,
            "synthesis": _synthesis_to_dict(self.synthesis),
            "data": asdict(self.data),
            "model": asdict(self.model),
            "seed": self.seed,
            "encoder_seed": self.encoder_seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = set(data) - {"encoder", "train", "synthesis", "data", "model", "seed", "encoder_seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        train = dict(data.get("train") or {})
        train.pop("seed", None)
        return cls(
            encoder=EncoderConfig.from_dict(data.get("encoder") or {}),
            train=_section(TrainConfig, train, "train"),
            synthesis=_synthesis_from_dict(data.get("synthesis")),
            data=_section(DataConfig, data.get("data"), "data"),
            model=_section(ModelConfig, data.get("model"), "model"),
            seed=int(data.get("seed", 0)),
            encoder_seed=int(data.get("encoder_seed", 0)),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        """
        Raises:
            ConfigError: If the file is missing or not a valid config; the message names the path
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        try:
            return cls.from_dict(data)
        except ConfigError as e:
            raise ConfigError(f"{path}: {e}") from e

    def apply_env(self) -> "RunConfig":
        load_dotenv()
        threads = os.environ.get(THREADS_ENV)
        if threads:
            try:
                self.train.threads = int(threads)
            except ValueError as e:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got '{threads}'") from e
            logger.debug(f"Thread count {threads} taken from {THREADS_ENV}")
        return self

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def build_model(self, encoders: DualEncoder) -> PromptAdapterModel:
        return PromptAdapterModel(
            encoders,
            prompt_length=self.model.prompt_length,
            tau=self.model.tau,
            prompt_mode=self.model.prompt_mode,
            adapter_mode=self.model.adapter_mode,
            init_seed=self.init_seed,
        )

    def with_tasks(self, tasks) -> "RunConfig":
        """Copy of this config restricted to the given synthesis tasks."""
        data = self.to_dict()
        data["synthesis"]["tasks"] = [SynthesisTask(t).value for t in tasks]
        return RunConfig.from_dict(data)


def resolve_config(
    path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> RunConfig:
    """Defaults, then the JSON file, then the environment, then explicit flag values."""
    config = RunConfig.load(path) if path else RunConfig()
    config.apply_env()
    if seed is not None:
        config.set_seed(seed)
    if threads is not None:
        config.train.threads = threads
    config.validate()
    return config

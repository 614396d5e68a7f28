import json
import logging
import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from rich.logging import RichHandler

# Load environment variables from .env file
load_dotenv()

# Path resolver for project root
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))


def project_path(relative: str) -> str:
    """
    Resolves any relative path to its absolute path within the project.

    Example:
        project_path("configs/desk.json") -> /full/path/to/project/configs/desk.json
    """
    return os.path.join(PROJECT_ROOT, relative)


def eval_threads() -> int:
    """Fan-out cap for evaluation and corpus generation (CLEANCODER_THREADS)."""
    raw = os.getenv("CLEANCODER_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"CLEANCODER_THREADS must be an integer, got '{raw}'")


def env_seed() -> int | None:
    raw = os.getenv("CLEANCODER_SEED")
    return int(raw) if raw else None


class ConfigError(ValueError):
    pass


def setup_logging(level: str | None = None) -> None:
    level = (level or os.getenv("CLEANCODER_LOG_LEVEL", "INFO")).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


# --- Experiment configuration -------------------------------------------------

ENCODER_PRESETS = {"medium-mini": 48, "large-mini": 64}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(_Section):
    train: int = Field(800, ge=1)
    val: int = Field(100, ge=1)
    test: int = Field(100, ge=1)
    alphabet: str = Field("abcdefghijkl", min_length=1)
    words_min: int = Field(2, ge=1)
    words_max: int = Field(4, ge=1)
    word_length: int = Field(3, ge=1)
    snr_grid: list[float] = Field(default_factory=lambda: [2.5, 7.5, 12.5, 17.5], min_length=1)
    noise_kinds: list[Literal["white", "babble"]] = Field(
        default_factory=lambda: ["white", "babble"], min_length=1
    )
    speakers_per_split: dict[str, int] = Field(
        default_factory=lambda: {"train": 24, "val": 4, "test": 4}
    )

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.words_min > self.words_max:
            raise ValueError("words_min must not exceed words_max")
        if len(set(self.alphabet)) != len(self.alphabet) or " " in self.alphabet:
            raise ValueError("alphabet symbols must be unique and non-blank")
        for split in ("train", "val", "test"):
            if self.speakers_per_split.get(split, 0) < 1:
                raise ValueError(f"speakers_per_split needs a positive '{split}' entry")
        return self


class EncoderSection(_Section):
    preset: Literal["medium-mini", "large-mini"] | None = None
    d_model: int = Field(64, ge=4)
    n_blocks: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    conv_kernel: int = Field(15, ge=1)
    ffn_expansion: int = Field(4, ge=1)
    dropout: float = Field(0.0, ge=0.0, le=0.0)
    max_rel_distance: int = Field(64, ge=1)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.preset is not None:
            self.d_model = ENCODER_PRESETS[self.preset]
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        return self


class TrainSection(_Section):
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.05, gt=0)
    scheduler: Literal["constant", "noam"] = "noam"
    warmup_steps: int = Field(500, ge=1)
    min_lr: float = Field(1e-6, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.98, gt=0, lt=1)
    eval_every: int = Field(1, ge=1)
    max_frames: int = Field(2000, ge=4)

    @model_validator(mode="after")
    def _check_lr(self):
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        return self


class PretrainSection(TrainSection):
    target_wer: float = Field(0.15, ge=0)


class FrontendSection(TrainSection):
    epochs: int = Field(40, ge=1)
    lr: float = Field(1e-3, gt=0)
    scheduler: Literal["constant", "noam"] = "constant"


class AsrSection(TrainSection):
    train_on: Literal["noisy", "clean"] = "noisy"


class EvalSection(_Section):
    threads: int | None = Field(None, ge=1)  # overrides CLEANCODER_THREADS
    charts: bool = True
    cache_items: int | None = Field(None, ge=1)  # FeatureStore cap during evaluation


class ExperimentConfig(_Section):
    corpus: CorpusSection = Field(default_factory=CorpusSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    frontend: FrontendSection = Field(default_factory=FrontendSection)
    asr: AsrSection = Field(default_factory=AsrSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    seed: int = Field(0, ge=0)


def resolve_config_path(ref: str | Path) -> Path:
    """A config file path, or the bare name of a bundled config under configs/ ("desk", "medium")."""
    path = Path(ref)
    if path.exists() or path.suffix:
        return path
    return Path(project_path(f"configs/{ref}.json"))


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse and validate an experiment config; None gives the desk-scale defaults."""
    if path is None:
        return ExperimentConfig()
    path = resolve_config_path(path)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"config {path} failed schema validation:\n{e}")

import hashlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings

from ivuq.schemas.ivim import DEFAULT_B_VALUES, BValueSchedule
from ivuq.schemas.network import HeadKind


class Settings(BaseSettings):
    # Environment
    debug: bool = False

    # Logging Configuration
    log_dir: str = "logs"
    log_to_file: bool = True
    log_max_size_mb: int = 50  # Maximum size of each log file before rotation
    log_backup_count: int = 5  # Number of backup files to keep
    log_cleanup_max_size_mb: int = 50  # Maximum size of individual log file before deletion
    log_cleanup_enabled: bool = True  # Run cleanup when the CLI starts

    # Worker pools (joblib)
    workers: int = 1
    parallel_backend: str = "loky"

    class Config:
        env_prefix = "IVUQ_"
        env_file = ".env"
        case_sensitive = False
        extra = "ignore"


settings = Settings()


# Keys accepted in the config file, grouped by the section header they appear under.
CONFIG_SECTIONS = {
    "acquisition": ["b_values"],
    "prior": ["d_range", "f_range", "d_star_range"],
    "simulate": [
        "n_train", "snr_range", "phantom_snrs", "phantoms_per_snr", "phantom_size",
    ],
    "model": ["head", "k", "hidden_width", "ensemble_size", "samples_per_member", "k_sweep"],
    "train": ["train_fraction", "learning_rate", "batch_size", "epochs"],
    "baseline": ["b_threshold"],
    "run": ["out_dir", "seed"],
}

# Where outputs go does not change what they contain.
HASH_EXCLUDED_KEYS = {"out_dir"}


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return [p for p in parts if p]
    return value


class ExperimentConfig(BaseModel):
    """Every knob an experiment depends on; serialized next to every output."""

    # [acquisition]
    b_values: List[float] = Field(default_factory=lambda: list(DEFAULT_B_VALUES))

    # [prior]
    d_range: Tuple[float, float] = (0.0, 0.003)
    f_range: Tuple[float, float] = (0.0, 0.4)
    d_star_range: Tuple[float, float] = (0.003, 0.2)

    # [simulate]
    n_train: int = Field(200_000, gt=0)
    snr_range: Tuple[float, float] = (1.0, 200.0)
    phantom_snrs: List[float] = Field(default_factory=lambda: [25.0, 50.0, 100.0])
    phantoms_per_snr: int = Field(200, gt=0)
    phantom_size: int = Field(76, ge=16, le=65535)

    # [model]
    head: HeadKind = HeadKind.MDN
    k: int = Field(10, ge=1)
    hidden_width: int = Field(64, ge=1)
    ensemble_size: int = Field(5, ge=1)
    samples_per_member: int = Field(100, ge=1)
    k_sweep: List[int] = Field(default_factory=lambda: [2, 3, 5, 10, 20])

    # [train]
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0, description="训练集占比")
    learning_rate: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(1000, ge=1)

    # [baseline]
    b_threshold: float = Field(200.0, gt=0.0)

    # [run]
    out_dir: str = "out"
    seed: int = Field(1234, ge=0)

    @field_validator("b_values", "phantom_snrs", "k_sweep", mode="before")
    @classmethod
    def split_lists(cls, v: Any) -> Any:
        return _split_csv(v)

    @field_validator("b_values")
    @classmethod
    def validate_b_values(cls, v: List[float]) -> List[float]:
        try:
            return BValueSchedule(values=v).values
        except ValueError as e:
            raise ValueError(f"invalid b_values {v}: must start at 0 and strictly increase") from e

    @field_validator("d_range", "f_range", "d_star_range", "snr_range", mode="before")
    @classmethod
    def split_ranges(cls, v: Any) -> Any:
        return _split_csv(v)

    @field_validator("d_range", "f_range", "d_star_range", "snr_range")
    @classmethod
    def validate_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError(f"range must satisfy min < max, got {v}")
        return v

    @field_validator("snr_range")
    @classmethod
    def validate_snr_floor(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if v[0] <= 0:
            raise ValueError("snr_range lower bound must be > 0")
        return v

    @model_validator(mode="after")
    def validate_head(self) -> "ExperimentConfig":
        if self.head == HeadKind.GAUSSIAN and self.k != 1:
            self.k = 1
        return self

    def _canonical_json(self) -> bytes:
        return self.model_dump_json(exclude=HASH_EXCLUDED_KEYS).encode("utf-8")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self._canonical_json()).hexdigest()

    @property
    def config_digest(self) -> bytes:
        return hashlib.sha256(self._canonical_json()).digest()

    def to_env_text(self) -> str:
        """Render back to the flat key=value format with section headers."""
        data = self.model_dump(mode="json")
        lines = [f"# config_hash={self.config_hash}"]
        for section, keys in CONFIG_SECTIONS.items():
            lines.append(f"# [{section}]")
            for key in keys:
                if key in HASH_EXCLUDED_KEYS:
                    continue
                value = data[key]
                if isinstance(value, (list, tuple)):
                    value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
                lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(
        cls,
        path: Optional[Path] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> "ExperimentConfig":
        """defaults < config file < CLI overrides"""
        from ivuq.exceptions import InvalidArgumentException

        values: Dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise InvalidArgumentException(f"配置文件不存在: {path}", details={"path": str(path)})
            raw = dotenv_values(path)
            unknown = sorted(set(raw) - set(cls.model_fields))
            if unknown:
                raise InvalidArgumentException(
                    "配置文件包含未知字段",
                    details={"path": str(path), "unknown_keys": unknown},
                )
            values.update({k: v for k, v in raw.items() if v is not None})
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        try:
            return cls.model_validate(values)
        except ValueError as e:
            raise InvalidArgumentException("配置校验失败", details={"errors": str(e)}) from e

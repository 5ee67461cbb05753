import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from app.core.errors import ConfigError


class Variant(str, Enum):
    """Ablation variants; FULL is variant D plus the disinterest filter"""

    A = "A"
    B = "B"
    C = "C"
    D = "D"
    FULL = "full"

    @property
    def uses_positive(self) -> bool:
        return self is not Variant.A

    @property
    def uses_negative(self) -> bool:
        return self is not Variant.B

    @property
    def uses_contrastive(self) -> bool:
        return self in (Variant.D, Variant.FULL)

    @property
    def uses_filter(self) -> bool:
        return self is Variant.FULL


class AttentionMode(str, Enum):
    NODE = "node"
    GLOBAL = "global"


class FilterMode(str, Enum):
    KEEP_BELOW = "keep-below"
    KEEP_ABOVE = "keep-above"


class SplitKind(str, Enum):
    K_FOLD = "k-fold"
    FIXED_FILES = "fixed-files"


class HyperParams(BaseModel):
    """Model and training knobs"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    H: int = Field(64, ge=1, description="embedding size")
    K: int = Field(4, ge=0, description="propagation layers")
    p: float = Field(0.1, ge=0.0, le=1.0, description="edge-removal probability of the distorted graph")
    b: float = Field(2.0, ge=1.0, description="feedback-aware coefficient; 1 only for ablation")
    delta: float = Field(0.5, description="disinterest filter threshold")
    lambda1: float = Field(0.1, ge=0.0)
    lambda2: float = Field(0.05, ge=0.0)
    tau: float = Field(0.8, gt=0.0)
    lr: float = Field(5e-3, ge=0.0)
    batch_size: int = Field(1024, ge=1)
    epochs: int = Field(1000, ge=0)
    neg_samples_per_edge: int = Field(40, ge=1)
    dropout_rate: float = Field(0.5, ge=0.0, lt=1.0)
    seed: int = Field(2023, ge=0)

    attention_mode: AttentionMode = AttentionMode.NODE
    distort_per_epoch: bool = False
    step_per_epoch: bool = False
    infonce_candidates: Optional[int] = Field(None, ge=1)
    early_stopping: bool = False
    patience: int = Field(50, ge=1)
    holdout_fraction: float = Field(0.05, gt=0.0, lt=1.0)
    eval_every: int = Field(1, ge=1)

    @field_validator("delta")
    @classmethod
    def _delta_not_nan(cls, value: float) -> float:
        if value != value:
            raise ValueError("delta must not be NaN")
        return value


class RunConfig(BaseSettings, HyperParams):
    """Everything needed to reproduce a run.

    Sources, highest precedence first: keyword overrides (CLI flags), then the
    key=value file passed as ``_env_file``, then defaults. The process
    environment is not consulted.
    """

    model_config = SettingsConfigDict(
        extra="forbid",
        case_sensitive=False,
        env_file_encoding="utf-8",
        validate_assignment=True,
    )

    data_dir: Optional[Path] = None
    train_edges: Optional[Path] = None
    test_edges: Optional[Path] = None
    user_map: Optional[Path] = None
    item_map: Optional[Path] = None

    split_kind: SplitKind = SplitKind.K_FOLD
    folds: int = Field(5, ge=2)
    fold_index: int = Field(0, ge=0)

    variant: Variant = Variant.FULL
    output_dir: Path = Path("runs/default")
    checkpoint_every: int = Field(0, ge=0, description="0 writes only the final checkpoint")

    filter_mode: FilterMode = FilterMode.KEEP_BELOW
    backfill: bool = True
    backfilled_as_miss: bool = False
    capped_idcg: bool = False
    k_list: List[int] = Field(default_factory=lambda: [5, 10, 15])

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings, dotenv_settings)

    @field_validator("k_list")
    @classmethod
    def _positive_ks(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("k_list must hold at least one K >= 1")
        return sorted(set(value))

    def _in_data_dir(self, explicit: Optional[Path], name: str) -> Optional[Path]:
        if explicit is not None:
            return explicit
        if self.data_dir is not None:
            return self.data_dir / name
        return None

    @property
    def train_path(self) -> Optional[Path]:
        return self._in_data_dir(self.train_edges, "train.tsv")

    @property
    def test_path(self) -> Optional[Path]:
        return self._in_data_dir(self.test_edges, "test.tsv")

    @property
    def user_map_path(self) -> Optional[Path]:
        return self._in_data_dir(self.user_map, "user_ids.tsv")

    @property
    def item_map_path(self) -> Optional[Path]:
        return self._in_data_dir(self.item_map, "item_ids.tsv")

    @property
    def ranking_delta(self) -> float:
        """Threshold actually used at ranking time; ablations A-D rank unfiltered"""
        return self.delta if self.variant.uses_filter else float("inf")

    def hyper_params(self) -> HyperParams:
        return HyperParams(**self.model_dump(include=set(HyperParams.model_fields)))


def load_config(path: Optional[Path] = None, **overrides: Any) -> RunConfig:
    """Resolve a RunConfig from an optional key=value file plus overrides"""
    if path is not None and not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    clean = {key: value for key, value in overrides.items() if value is not None}
    try:
        return RunConfig(_env_file=path, **clean)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(problems) from e


def _render(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_items(config: RunConfig) -> Dict[str, str]:
    return {
        name: _render(value)
        for name, value in config.model_dump().items()
        if value is not None
    }


def dump_config(config: RunConfig, path: Path) -> Path:
    """Write the resolved config as a key=value file load_config reads back"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in config_items(config).items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

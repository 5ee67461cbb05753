import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import SplitKind


@dataclass(frozen=True)
class RatingRecord:
    """One raw interaction after id re-indexing"""

    user: int
    item: int
    value: float
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"rating value must be finite and non-negative, got {self.value}")


class IdMap:
    """Bijection between raw ids (as strings) and dense indices 0..n-1"""

    def __init__(self, raw_ids: Sequence[str] = ()):
        self._raw: List[str] = [str(r) for r in raw_ids]
        self._index: Dict[str, int] = {raw: i for i, raw in enumerate(self._raw)}
        if len(self._index) != len(self._raw):
            raise ValueError("raw ids must be unique")

    def __len__(self) -> int:
        return len(self._raw)

    def __contains__(self, raw_id: object) -> bool:
        return str(raw_id) in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, IdMap) and self._raw == other._raw

    def index(self, raw_id: object) -> int:
        return self._index[str(raw_id)]

    def raw(self, index: int) -> str:
        return self._raw[index]

    def items(self) -> Iterator[Tuple[str, int]]:
        return ((raw, i) for i, raw in enumerate(self._raw))

    @property
    def raw_ids(self) -> List[str]:
        return list(self._raw)


@dataclass
class RatingLog:
    records: List[RatingRecord]
    user_ids: IdMap = field(default_factory=IdMap)
    item_ids: IdMap = field(default_factory=IdMap)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)


class Sign(int, Enum):
    POSITIVE = 1
    NEGATIVE = -1


@dataclass(frozen=True)
class EdgeSet:
    """Signed user-item edges held column-wise; sign is +1 or -1"""

    users: np.ndarray
    items: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "users", np.asarray(self.users, dtype=np.int64))
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=np.int8))
        if not (len(self.users) == len(self.items) == len(self.signs)):
            raise ValueError("edge columns must have equal length")
        if len(self.signs) and not np.isin(self.signs, (1, -1)).all():
            raise ValueError("edge signs must be +1 or -1")

    @classmethod
    def empty(cls) -> "EdgeSet":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_tuples(cls, edges: Sequence[Tuple[int, int, int]]) -> "EdgeSet":
        if not edges:
            return cls.empty()
        users, items, signs = zip(*edges)
        return cls(np.array(users), np.array(items), np.array(signs))

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Tuple[int, int, int]]:
        return zip(self.users.tolist(), self.items.tolist(), self.signs.tolist())

    def take(self, index: np.ndarray) -> "EdgeSet":
        return EdgeSet(self.users[index], self.items[index], self.signs[index])

    def with_sign(self, sign: Sign) -> "EdgeSet":
        return self.take(np.flatnonzero(self.signs == int(sign)))

    @property
    def positives(self) -> "EdgeSet":
        return self.with_sign(Sign.POSITIVE)

    @property
    def negatives(self) -> "EdgeSet":
        return self.with_sign(Sign.NEGATIVE)


class RuleKind(str, Enum):
    STAR_THRESHOLD = "star-threshold"
    WATCH_RATIO_THRESHOLD = "watch-ratio-threshold"


DEFAULT_THRESHOLDS = {
    RuleKind.STAR_THRESHOLD: 3.5,
    RuleKind.WATCH_RATIO_THRESHOLD: 2.0,
}


class BinarizationRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: RuleKind = RuleKind.STAR_THRESHOLD
    threshold: float = Field(default=None, validate_default=False)

    @model_validator(mode="before")
    @classmethod
    def _default_threshold(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("threshold") is None:
            kind = RuleKind(data.get("kind", RuleKind.STAR_THRESHOLD))
            data = {**data, "kind": kind, "threshold": DEFAULT_THRESHOLDS[kind]}
        return data

    @field_validator("threshold")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("binarization threshold must be finite")
        return value


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: SplitKind = SplitKind.K_FOLD
    folds: int = Field(5, ge=2)
    fold_index: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)
    test_path: Optional[Path] = None  # fixed-files only


class FormatSpec(BaseModel):
    """Byte layout of a raw rating file.

    Headerless files take their column names from ``columns``; headered files
    use the names in the first line.
    """

    model_config = ConfigDict(frozen=True)

    delimiter: str = "::"
    header: bool = False
    columns: Optional[Tuple[str, ...]] = ("user", "item", "rating", "timestamp")
    user_column: str = "user"
    item_column: str = "item"
    value_column: str = "rating"
    timestamp_column: Optional[str] = "timestamp"

    @model_validator(mode="after")
    def _columns_cover_fields(self) -> "FormatSpec":
        if not self.header:
            if not self.columns:
                raise ValueError("headerless formats must name their columns")
            needed = {self.user_column, self.item_column, self.value_column}
            missing = needed - set(self.columns)
            if missing:
                raise ValueError(f"format columns missing {sorted(missing)}")
        return self

    @property
    def required_columns(self) -> Tuple[str, ...]:
        return (self.user_column, self.item_column, self.value_column)

    @classmethod
    def movielens(cls) -> "FormatSpec":
        return cls()

    @classmethod
    def watch_ratio_csv(cls) -> "FormatSpec":
        return cls(
            delimiter=",",
            header=True,
            columns=None,
            user_column="user_id",
            item_column="video_id",
            value_column="watch_ratio",
            timestamp_column="timestamp",
        )


FORMAT_PRESETS = {
    "movielens": FormatSpec.movielens,
    "watch-ratio-csv": FormatSpec.watch_ratio_csv,
}

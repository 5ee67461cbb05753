from dataclasses import dataclass, field
from typing import Dict, List

from pydantic import BaseModel, Field, field_validator


@dataclass(frozen=True)
class ScoredItem:
    item: int
    interest: float
    disinterest: float
    backfilled: bool = False


@dataclass
class RankedList:
    user: int
    items: List[ScoredItem] = field(default_factory=list)
    kept: List[int] = field(default_factory=list)  # pre-backfill survivors of the filter, ranked

    def __len__(self) -> int:
        return len(self.items)

    @property
    def item_ids(self) -> List[int]:
        return [entry.item for entry in self.items]

    def top(self, k: int, backfilled_as_miss: bool = False) -> List[int]:
        """Item ids of the first k slots; backfilled slots become -1 when treated as misses"""
        return [
            -1 if (backfilled_as_miss and entry.backfilled) else entry.item
            for entry in self.items[:k]
        ]


class MetricsReport(BaseModel):
    """Ranking metrics per cut-off K, averaged over evaluated users"""

    precision: Dict[int, float] = Field(default_factory=dict)
    recall: Dict[int, float] = Field(default_factory=dict)
    ndcg: Dict[int, float] = Field(default_factory=dict)
    evaluated_users: int = 0

    @field_validator("precision", "recall", "ndcg")
    @classmethod
    def _unit_interval(cls, value: Dict[int, float]) -> Dict[int, float]:
        for k, metric in value.items():
            if not 0.0 <= metric <= 1.0 + 1e-12:
                raise ValueError(f"metric at K={k} outside [0, 1]: {metric}")
        return value

    def flat(self) -> Dict[str, float]:
        """Keys precision@K, recall@K, ndcg@K plus evaluated_users"""
        out: Dict[str, float] = {}
        for k in sorted(self.precision):
            out[f"precision@{k}"] = self.precision[k]
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["evaluated_users"] = self.evaluated_users
        return out

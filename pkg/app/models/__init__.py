from .records import (
    BinarizationRule,
    EdgeSet,
    FormatSpec,
    IdMap,
    RatingLog,
    RatingRecord,
    RuleKind,
    Sign,
    SplitSpec,
)
from .ranking import MetricsReport, RankedList, ScoredItem

__all__ = [
    "BinarizationRule",
    "EdgeSet",
    "FormatSpec",
    "IdMap",
    "MetricsReport",
    "RankedList",
    "RatingLog",
    "RatingRecord",
    "RuleKind",
    "ScoredItem",
    "Sign",
    "SplitSpec",
]

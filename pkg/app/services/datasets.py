"""Raw rating ingestion, binarization into signed edges, and train/test splits."""

import re
import warnings
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.config import SplitKind
from app.core.errors import DatasetFormatError, SplitError
from app.core.logging import get_logger
from app.core.seeding import Stream, stream_generator
from app.models.records import (
    BinarizationRule,
    EdgeSet,
    FormatSpec,
    IdMap,
    RatingLog,
    RatingRecord,
    SplitSpec,
)

logger = get_logger(__name__)

_LINE_IN_MESSAGE = re.compile(r"line (\d+)")


def _read_frame(path: Path, fmt: FormatSpec) -> pd.DataFrame:
    engine = "c" if len(fmt.delimiter) == 1 else "python"
    kwargs = dict(
        sep=fmt.delimiter if engine == "c" else re.escape(fmt.delimiter),
        engine=engine,
        dtype=str,
        keep_default_na=False,
        na_values=[],
        skip_blank_lines=False,
        on_bad_lines="error",
        index_col=False,
    )
    if fmt.header:
        kwargs["header"] = 0
    else:
        kwargs["header"] = None
        kwargs["names"] = list(fmt.columns)
    try:
        with warnings.catch_warnings():
            # extra trailing fields only warn under index_col=False
            warnings.simplefilter("error", pd.errors.ParserWarning)
            return pd.read_csv(path, **kwargs)
    except pd.errors.ParserWarning as e:
        raise DatasetFormatError(
            "malformed line: more fields than expected", path=path, line=_first_wide_line(path, fmt)
        ) from e
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(fmt.columns or fmt.required_columns))
    except pd.errors.ParserError as e:
        match = _LINE_IN_MESSAGE.search(str(e))
        line = int(match.group(1)) if match else None
        raise DatasetFormatError(f"malformed line ({e})", path=path, line=line) from e


def _first_wide_line(path: Path, fmt: FormatSpec) -> Optional[int]:
    expected = None if fmt.header else len(fmt.columns or ())
    with open(path, encoding="utf-8", errors="replace") as lines:
        for number, line in enumerate(lines, start=1):
            fields = len(line.rstrip("\r\n").split(fmt.delimiter))
            if expected is None:
                expected = fields
            elif line.strip() and fields > expected:
                return number
    return None


def _numeric_column(frame: pd.DataFrame, column: str, path: Path, header_lines: int) -> np.ndarray:
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        line = int(frame.index[row]) + 1 + header_lines
        raise DatasetFormatError(
            f"non-numeric {column} value {raw.iloc[row]!r}", path=path, line=line
        )
    return values.to_numpy(dtype=float)


def load_ratings(path: Union[str, Path], format_spec: Optional[FormatSpec] = None) -> RatingLog:
    """Parse a delimited rating file into records with dense user/item ids.

    Ids are numbered by first appearance in the file. Repeated (user, item)
    pairs keep the record with the latest timestamp, or the last occurrence
    when the file has no timestamps; survivors stay in file order.
    """
    path = Path(path)
    fmt = format_spec or FormatSpec.movielens()
    if not path.exists():
        raise DatasetFormatError("file not found", path=path)

    frame = _read_frame(path, fmt)
    header_lines = 1 if fmt.header else 0
    if frame.empty:
        logger.info("datasets.loaded", path=str(path), records=0)
        return RatingLog(records=[])

    missing = [c for c in fmt.required_columns if c not in frame.columns]
    if missing:
        raise DatasetFormatError(f"missing column(s) {missing}; found {list(frame.columns)}", path=path)

    # skip_blank_lines=False keeps the frame index aligned with file lines
    present = frame[list(fmt.required_columns)].replace("", np.nan)
    blank = present.isna().all(axis=1)
    frame = frame.loc[~blank]
    partial = present.loc[~blank].isna().any(axis=1)
    if partial.any():
        line = int(partial[partial].index[0]) + 1 + header_lines
        raise DatasetFormatError(
            f"malformed line: expected fields {list(fmt.required_columns)} separated by {fmt.delimiter!r}",
            path=path,
            line=line,
        )

    values = _numeric_column(frame, fmt.value_column, path, header_lines)
    if (values < 0).any():
        row = int(np.flatnonzero(values < 0)[0])
        raise DatasetFormatError(
            f"negative {fmt.value_column} value {values[row]}",
            path=path,
            line=int(frame.index[row]) + 1 + header_lines,
        )

    timestamps = None
    ts_column = fmt.timestamp_column
    if ts_column and ts_column in frame.columns:
        timestamps = _numeric_column(frame, ts_column, path, header_lines).astype(np.int64)

    user_codes, user_raw = pd.factorize(frame[fmt.user_column].str.strip())
    item_codes, item_raw = pd.factorize(frame[fmt.item_column].str.strip())

    table = pd.DataFrame(
        {
            "user": user_codes,
            "item": item_codes,
            "value": values,
            "order": np.arange(len(frame)),
        }
    )
    sort_keys = ["order"]
    if timestamps is not None:
        table["timestamp"] = timestamps
        sort_keys = ["timestamp", "order"]
    table = (
        table.sort_values(sort_keys, kind="mergesort")
        .drop_duplicates(subset=["user", "item"], keep="last")
        .sort_values("order", kind="mergesort")
    )

    ts_values: Iterable[Optional[int]]
    if timestamps is not None:
        ts_values = table["timestamp"].tolist()
    else:
        ts_values = [None] * len(table)
    records = [
        RatingRecord(user=u, item=i, value=v, timestamp=t)
        for u, i, v, t in zip(table["user"].tolist(), table["item"].tolist(), table["value"].tolist(), ts_values)
    ]
    log = RatingLog(records=records, user_ids=IdMap(list(user_raw)), item_ids=IdMap(list(item_raw)))
    logger.info(
        "datasets.loaded",
        path=str(path),
        lines=len(frame),
        records=len(records),
        duplicates=len(frame) - len(records),
        users=log.n_users,
        items=log.n_items,
    )
    return log


def filter_min_interactions(log: RatingLog, min_count: int) -> RatingLog:
    """Drop users and items with fewer than `min_count` interactions until stable.

    Runs before binarization. Surviving ids are renumbered densely in their
    previous order.
    """
    if min_count <= 1 or not log.records:
        return log
    users = np.array([r.user for r in log.records], dtype=np.int64)
    items = np.array([r.item for r in log.records], dtype=np.int64)
    keep = np.ones(len(users), dtype=bool)
    while True:
        user_counts = np.bincount(users[keep], minlength=log.n_users)
        item_counts = np.bincount(items[keep], minlength=log.n_items)
        still = keep & (user_counts[users] >= min_count) & (item_counts[items] >= min_count)
        if still.sum() == keep.sum():
            break
        keep = still

    kept_users = np.unique(users[keep])
    kept_items = np.unique(items[keep])
    user_remap = np.full(log.n_users, -1, dtype=np.int64)
    user_remap[kept_users] = np.arange(len(kept_users))
    item_remap = np.full(log.n_items, -1, dtype=np.int64)
    item_remap[kept_items] = np.arange(len(kept_items))

    records = [
        RatingRecord(
            user=int(user_remap[r.user]),
            item=int(item_remap[r.item]),
            value=r.value,
            timestamp=r.timestamp,
        )
        for r, k in zip(log.records, keep)
        if k
    ]
    logger.info(
        "datasets.min_interactions_filtered",
        min_count=min_count,
        records_before=len(log.records),
        records_after=len(records),
        users=len(kept_users),
        items=len(kept_items),
    )
    return RatingLog(
        records=records,
        user_ids=IdMap([log.user_ids.raw(int(u)) for u in kept_users]),
        item_ids=IdMap([log.item_ids.raw(int(i)) for i in kept_items]),
    )


def binarize(records: Union[RatingLog, Sequence[RatingRecord]], rule: Optional[BinarizationRule] = None) -> EdgeSet:
    """Positive iff value > threshold (strict), negative otherwise; order preserved"""
    rule = rule or BinarizationRule()
    if isinstance(records, RatingLog):
        records = records.records
    if not records:
        return EdgeSet.empty()
    users = np.fromiter((r.user for r in records), dtype=np.int64, count=len(records))
    items = np.fromiter((r.item for r in records), dtype=np.int64, count=len(records))
    values = np.fromiter((r.value for r in records), dtype=float, count=len(records))
    signs = np.where(values > rule.threshold, 1, -1).astype(np.int8)
    return EdgeSet(users, items, signs)


def _pair_keys(users: np.ndarray, items: np.ndarray, n_items: int) -> np.ndarray:
    return users.astype(np.int64) * np.int64(n_items) + items.astype(np.int64)


def split(edges: EdgeSet, spec: SplitSpec) -> Tuple[EdgeSet, EdgeSet]:
    """Deterministic train/test split; both outputs keep the input order"""
    if spec.kind is SplitKind.FIXED_FILES:
        if spec.test_path is None:
            raise SplitError("fixed-files split needs a test edge file")
        test = read_edges(spec.test_path)
        if not len(test):
            return edges, test
        n_items = int(max(edges.items.max(initial=-1), test.items.max(initial=-1))) + 1
        in_test = np.isin(_pair_keys(edges.users, edges.items, n_items), _pair_keys(test.users, test.items, n_items))
        train = edges.take(np.flatnonzero(~in_test))
        logger.info("datasets.split", kind=spec.kind.value, train=len(train), test=len(test))
        return train, test

    if spec.fold_index >= spec.folds:
        raise SplitError(f"fold_index {spec.fold_index} out of range for {spec.folds} folds")
    rng = stream_generator(spec.seed, Stream.SPLIT)
    order = rng.permutation(len(edges))
    fold_of = np.empty(len(edges), dtype=np.int64)
    for fold, chunk in enumerate(np.array_split(order, spec.folds)):
        fold_of[chunk] = fold
    test_mask = fold_of == spec.fold_index
    train, test = edges.take(np.flatnonzero(~test_mask)), edges.take(np.flatnonzero(test_mask))
    logger.info(
        "datasets.split",
        kind=spec.kind.value,
        folds=spec.folds,
        fold_index=spec.fold_index,
        train=len(train),
        test=len(test),
    )
    return train, test


def holdout(edges: EdgeSet, fraction: float, seed: int) -> Tuple[EdgeSet, EdgeSet]:
    """Carve a validation subset out of the positive edges; negatives stay in training"""
    positive_rows = np.flatnonzero(edges.signs == 1)
    n_held = int(round(len(positive_rows) * fraction))
    rng = stream_generator(seed, Stream.HOLDOUT)
    held_rows = np.sort(rng.choice(positive_rows, size=n_held, replace=False)) if n_held else np.empty(0, dtype=np.int64)
    mask = np.zeros(len(edges), dtype=bool)
    mask[held_rows] = True
    return edges.take(np.flatnonzero(~mask)), edges.take(held_rows)


def write_edges(path: Union[str, Path], edges: EdgeSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"user": edges.users, "item": edges.items, "sign": edges.signs.astype(np.int64)})
    frame.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")
    return path


def read_edges(path: Union[str, Path]) -> EdgeSet:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("edge file not found", path=path)
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=["user", "item", "sign"], dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return EdgeSet.empty()
    except pd.errors.ParserError as e:
        match = _LINE_IN_MESSAGE.search(str(e))
        raise DatasetFormatError(f"malformed edge line ({e})", path=path, line=int(match.group(1)) if match else None) from e
    columns = {}
    for name in ("user", "item", "sign"):
        parsed = pd.to_numeric(frame[name], errors="coerce")
        if parsed.isna().any():
            row = int(np.flatnonzero(parsed.isna().to_numpy())[0])
            raise DatasetFormatError(f"non-integer {name} {frame[name].iloc[row]!r}", path=path, line=row + 1)
        columns[name] = parsed.to_numpy(dtype=np.int64)
    bad_sign = ~np.isin(columns["sign"], (1, -1))
    if bad_sign.any():
        row = int(np.flatnonzero(bad_sign)[0])
        raise DatasetFormatError(f"sign must be 1 or -1, got {columns['sign'][row]}", path=path, line=row + 1)
    return EdgeSet(columns["user"], columns["item"], columns["sign"])


def write_id_map(path: Union[str, Path], id_map: IdMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        for raw, index in id_map.items():
            out.write(f"{raw}\t{index}\n")
    return path


def read_id_map(path: Union[str, Path]) -> IdMap:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("id map not found", path=path)
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=["raw", "index"], dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return IdMap()
    indices = pd.to_numeric(frame["index"], errors="coerce")
    if indices.isna().any() or not np.array_equal(indices.to_numpy(dtype=np.int64), np.arange(len(frame))):
        raise DatasetFormatError("id map indices must be 0..n-1 in order", path=path)
    return IdMap(frame["raw"].tolist())

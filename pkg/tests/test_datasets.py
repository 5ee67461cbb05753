import numpy as np
import pytest

from app.core.config import SplitKind
from app.core.errors import DatasetFormatError, SplitError
from app.models.records import BinarizationRule, EdgeSet, FormatSpec, RatingRecord, RuleKind, SplitSpec
from app.services import datasets


def write(tmp_path, text, name="ratings.dat"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadRatings:
    def test_movielens_line(self, tmp_path):
        log = datasets.load_ratings(write(tmp_path, "1::1193::5::978300760\n"))
        assert len(log) == 1
        record = log.records[0]
        assert record == RatingRecord(user=0, item=0, value=5.0, timestamp=978300760)
        assert log.user_ids.raw(0) == "1"
        assert log.item_ids.raw(0) == "1193"

    def test_empty_file(self, tmp_path):
        log = datasets.load_ratings(write(tmp_path, ""))
        assert log.records == []
        assert log.n_users == 0 and log.n_items == 0

    @pytest.mark.parametrize(
        "text",
        ["1::10::3::10\n1::10::5::20\n", "1::10::5::20\n1::10::3::10\n"],
        ids=["later-last", "later-first"],
    )
    def test_duplicate_keeps_latest_timestamp(self, tmp_path, text):
        log = datasets.load_ratings(write(tmp_path, text))
        assert len(log) == 1
        assert log.records[0].timestamp == 20
        assert log.records[0].value == 5.0

    def test_ids_by_first_appearance(self, tmp_path):
        log = datasets.load_ratings(write(tmp_path, "7::a::1::1\n3::b::2::2\n7::b::4::3\n"))
        assert log.user_ids.raw_ids == ["7", "3"]
        assert log.item_ids.raw_ids == ["a", "b"]
        assert [(r.user, r.item) for r in log.records] == [(0, 0), (1, 1), (0, 1)]

    def test_wrong_delimiter_reports_line(self, tmp_path):
        path = write(tmp_path, "1::2::3::4\n5,6,4,9\n")
        with pytest.raises(DatasetFormatError) as excinfo:
            datasets.load_ratings(path)
        assert excinfo.value.line == 2
        assert str(path) in str(excinfo.value)

    def test_extra_field_reports_line(self, tmp_path):
        path = write(tmp_path, "1::2::5::10\n1::3::4::11::9\n")
        with pytest.raises(DatasetFormatError) as excinfo:
            datasets.load_ratings(path)
        assert excinfo.value.line == 2

    def test_non_numeric_rating(self, tmp_path):
        with pytest.raises(DatasetFormatError) as excinfo:
            datasets.load_ratings(write(tmp_path, "1::2::3::4\n1::3::five::5\n"))
        assert excinfo.value.line == 2

    def test_negative_rating_rejected(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            datasets.load_ratings(write(tmp_path, "1::2::-1::4\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetFormatError):
            datasets.load_ratings(tmp_path / "nope.dat")

    def test_watch_ratio_csv(self, tmp_path):
        path = write(tmp_path, "user_id,video_id,watch_ratio,timestamp\n1,5,2.5,100\n1,6,2.0,101\n", "small.csv")
        log = datasets.load_ratings(path, FormatSpec.watch_ratio_csv())
        edges = datasets.binarize(log, BinarizationRule(kind=RuleKind.WATCH_RATIO_THRESHOLD))
        assert edges.signs.tolist() == [1, -1]


class TestBinarize:
    @pytest.mark.parametrize(
        "value, kind, sign",
        [
            (4.0, RuleKind.STAR_THRESHOLD, 1),
            (3.5, RuleKind.STAR_THRESHOLD, -1),
            (1.0, RuleKind.STAR_THRESHOLD, -1),
            (2.5, RuleKind.WATCH_RATIO_THRESHOLD, 1),
            (2.0, RuleKind.WATCH_RATIO_THRESHOLD, -1),
        ],
    )
    def test_strict_threshold(self, value, kind, sign):
        edges = datasets.binarize([RatingRecord(0, 0, value)], BinarizationRule(kind=kind))
        assert edges.signs.tolist() == [sign]

    def test_default_thresholds(self):
        assert BinarizationRule().threshold == 3.5
        assert BinarizationRule(kind=RuleKind.WATCH_RATIO_THRESHOLD).threshold == 2.0
        assert BinarizationRule(threshold=3.0).threshold == 3.0

    def test_order_preserved(self):
        records = [RatingRecord(2, 1, 5.0), RatingRecord(0, 3, 1.0), RatingRecord(1, 0, 4.0)]
        edges = datasets.binarize(records)
        assert list(edges) == [(2, 1, 1), (0, 3, -1), (1, 0, 1)]

    def test_empty(self):
        assert len(datasets.binarize([])) == 0


def hundred_edges():
    rng = np.random.default_rng(3)
    users = np.repeat(np.arange(10), 10)
    items = np.tile(np.arange(10), 10)
    return EdgeSet(users, items, rng.choice([1, -1], size=100))


class TestSplit:
    def test_five_fold_sizes(self):
        train, test = datasets.split(hundred_edges(), SplitSpec(folds=5, fold_index=0, seed=1))
        assert (len(train), len(test)) == (80, 20)

    def test_two_folds_partition(self):
        edges = hundred_edges()
        _, first = datasets.split(edges, SplitSpec(folds=2, fold_index=0, seed=4))
        _, second = datasets.split(edges, SplitSpec(folds=2, fold_index=1, seed=4))
        pairs_first = {(u, i) for u, i, _ in first}
        pairs_second = {(u, i) for u, i, _ in second}
        assert not pairs_first & pairs_second
        assert pairs_first | pairs_second == {(u, i) for u, i, _ in edges}

    def test_deterministic(self):
        edges = hundred_edges()
        spec = SplitSpec(folds=5, fold_index=3, seed=11)
        a_train, a_test = datasets.split(edges, spec)
        b_train, b_test = datasets.split(edges, spec)
        assert list(a_train) == list(b_train)
        assert list(a_test) == list(b_test)

    def test_fold_out_of_range(self):
        with pytest.raises(SplitError):
            datasets.split(hundred_edges(), SplitSpec(folds=5, fold_index=5))

    def test_fixed_files(self, tmp_path):
        edges = EdgeSet.from_tuples([(0, 0, 1), (0, 1, -1), (1, 1, 1), (1, 2, 1)])
        test_path = datasets.write_edges(tmp_path / "test.tsv", EdgeSet.from_tuples([(1, 1, 1)]))
        train, test = datasets.split(edges, SplitSpec(kind=SplitKind.FIXED_FILES, test_path=test_path))
        assert list(train) == [(0, 0, 1), (0, 1, -1), (1, 2, 1)]
        assert list(test) == [(1, 1, 1)]

    def test_fixed_files_needs_path(self):
        with pytest.raises(SplitError):
            datasets.split(hundred_edges(), SplitSpec(kind=SplitKind.FIXED_FILES))


def test_holdout_only_takes_positives():
    edges = hundred_edges()
    kept, held = datasets.holdout(edges, 0.2, seed=5)
    assert len(kept) + len(held) == len(edges)
    assert (held.signs == 1).all()
    assert len(held) == round((edges.signs == 1).sum() * 0.2)


def test_filter_min_interactions(tmp_path):
    text = "".join(f"u{u}::i{i}::4::{u * 10 + i}\n" for u in range(3) for i in range(3))
    text += "lonely::i0::4::99\n"
    log = datasets.filter_min_interactions(datasets.load_ratings(write(tmp_path, text)), 2)
    assert log.user_ids.raw_ids == ["u0", "u1", "u2"]
    assert log.n_items == 3
    assert len(log) == 9


class TestCanonicalFiles:
    def test_edges_round_trip(self, tmp_path, small_edges):
        path = datasets.write_edges(tmp_path / "edges.tsv", small_edges)
        assert list(datasets.read_edges(path)) == list(small_edges)

    def test_empty_edges_file(self, tmp_path):
        path = datasets.write_edges(tmp_path / "edges.tsv", EdgeSet.empty())
        assert len(datasets.read_edges(path)) == 0

    def test_bad_sign(self, tmp_path):
        path = write(tmp_path, "0\t1\t1\n0\t2\t0\n", "edges.tsv")
        with pytest.raises(DatasetFormatError) as excinfo:
            datasets.read_edges(path)
        assert excinfo.value.line == 2

    def test_id_map(self, tmp_path):
        log = datasets.load_ratings(write(tmp_path, "10::x::1::1\n20::y::1::1\n"))
        path = datasets.write_id_map(tmp_path / "user_ids.tsv", log.user_ids)
        assert datasets.read_id_map(path) == log.user_ids

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcfdr.ingest import (
    EmptyTableWarning,
    RatingsFormatError,
    adjacent_pair_family,
    filter_min_ratings,
    random_mask,
    read_ratings,
    write_ratings,
)


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def hundred_users(tmp_path):
    rng = np.random.default_rng(0)
    lines = []
    for u in range(100):
        for it in rng.choice(40, size=rng.integers(1, 15), replace=False):
            lines.append(f"u{u}\ti{it}\t{rng.integers(0, 6)}\t{rng.integers(10**9)}")
    return write(tmp_path, "ratings.tsv", "\n".join(lines) + "\n")


def scan_nonzero(path):
    """Independent line scan counting rated cells."""
    count = 0
    with open(path) as fh:
        for line in fh:
            fields = line.split()
            if fields and float(fields[2]) != 0:
                count += 1
    return count


class TestReadTsv:
    def test_two_lines(self, tmp_path):
        t = read_ratings(write(tmp_path, "a.tsv", "1\t2\t5\t0\n2\t1\t3\t0\n"))
        assert (t.d1, t.d2, t.n) == (2, 2, 2)
        assert t.user_ids == ("1", "2") and t.item_ids == ("2", "1")
        np.testing.assert_array_equal(t.ratings, [5.0, 3.0])

    def test_zero_is_unrated(self, tmp_path):
        t = read_ratings(write(tmp_path, "a.tsv", "1\t2\t0\n1\t3\t4\n"))
        assert t.n == 1 and t.item_ids == ("3",)

    def test_line_scan_oracle(self, hundred_users):
        t = read_ratings(hundred_users)
        assert t.n == scan_nonzero(hundred_users)

    @pytest.mark.parametrize("text,lineno", [
        ("1\t2\t5\n1\t2\n", 2),
        ("1\t2\tfive\n", 1),
        ("1\t2\t5\n1\t2\t4\n", 2),
        ("1\t2\tnan\n", 1),
        ("1\t2\t5\n3\t4\t5\t99\n", 2),
    ])
    def test_malformed_reports_line(self, tmp_path, text, lineno):
        with pytest.raises(RatingsFormatError, match=f"line {lineno}"):
            read_ratings(write(tmp_path, "bad.tsv", text))

    def test_empty(self, tmp_path):
        with pytest.raises(RatingsFormatError):
            read_ratings(write(tmp_path, "e.tsv", ""))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            read_ratings(write(tmp_path, "a.tsv", "1\t2\t3\n"), format="parquet")


class TestReadWide:
    def test_empty_cell_absent(self, tmp_path):
        t = read_ratings(write(tmp_path, "w.csv", "store,d1,d2\ns1,3.5,\ns2,0,2\n"),
                         format="csv_wide_matrix")
        assert (t.d1, t.d2, t.n) == (2, 2, 2)
        cells = set(zip(t.users.tolist(), t.items.tolist()))
        assert cells == {(0, 0), (1, 1)}

    def test_ragged_row(self, tmp_path):
        with pytest.raises(RatingsFormatError, match="line 3"):
            read_ratings(write(tmp_path, "w.csv", "id,a,b\nx,1,2\ny,1\n"), format="csv_wide_matrix")

    def test_duplicate_row_label(self, tmp_path):
        with pytest.raises(RatingsFormatError):
            read_ratings(write(tmp_path, "w.csv", "id,a\nx,1\nx,2\n"), format="csv_wide_matrix")


class TestRoundTrip:
    def test_tsv(self, tmp_path, hundred_users):
        t = read_ratings(hundred_users)
        write_ratings(t, tmp_path / "out.tsv")
        assert read_ratings(tmp_path / "out.tsv").equals(t)

    def test_wide(self, tmp_path):
        t = read_ratings(write(tmp_path, "w.csv", "id,a,b,c\nx,1,,2.5\ny,,4,\nz,,,\n"),
                         format="csv_wide_matrix")
        write_ratings(t, tmp_path / "o.csv", format="csv_wide_matrix", label="id")
        back = read_ratings(tmp_path / "o.csv", format="csv_wide_matrix")
        assert back.equals(t) and back.d1 == 3

    @settings(max_examples=100, deadline=None)
    @given(st.dictionaries(
        st.tuples(st.integers(0, 8), st.integers(0, 8)),
        st.floats(-5, 5, allow_nan=False).filter(lambda x: x != 0), min_size=1, max_size=30))
    def test_property(self, cells):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as d:
            src = Path(d) / "a.tsv"
            src.write_text("".join(f"u{i}\tv{j}\t{r!r}\n" for (i, j), r in cells.items()))
            t = read_ratings(src)
            write_ratings(t, Path(d) / "b.tsv")
            assert read_ratings(Path(d) / "b.tsv").equals(t)
            # first-appearance order is kept
            first_users = list(dict.fromkeys(f"u{i}" for i, _ in cells))
            assert list(t.user_ids) == first_users


class TestFilter:
    def test_zero_unchanged(self, hundred_users):
        t = read_ratings(hundred_users)
        assert filter_min_ratings(t, 0) is t

    def test_all_removed(self, hundred_users):
        t = read_ratings(hundred_users)
        with pytest.warns(EmptyTableWarning):
            out = filter_min_ratings(t, 10**6)
        assert out.is_empty

    def test_hand_count(self, tmp_path):
        text = "a\tx\t1\na\ty\t2\na\tz\t3\nb\tx\t1\nc\tx\t4\nc\ty\t5\n"
        t = filter_min_ratings(read_ratings(write(tmp_path, "f.tsv", text)), 2)
        assert t.user_ids == ("a", "c")
        assert t.item_ids == ("x", "y", "z")
        assert t.n == 5 and t.users.max() == 1

    def test_negative(self, hundred_users):
        with pytest.raises(ValueError):
            filter_min_ratings(read_ratings(hundred_users), -1)


class TestAdjacentPairs:
    def test_no_pairs(self, tmp_path):
        t = read_ratings(write(tmp_path, "a.tsv", "u\ta\t1\nv\tb\t2\n"))
        hyp, proxy = adjacent_pair_family(t, 10)
        assert hyp.q == 0 and proxy.size == 0

    def test_proxy_label(self, tmp_path):
        t = read_ratings(write(tmp_path, "a.tsv", "u\ta\t5\nu\tb\t3\n"))
        hyp, proxy = adjacent_pair_family(t, 10)
        assert hyp.q == 1 and proxy[0]
        T = hyp.forms[0].to_dense(t.to_observations().shape)
        assert T[0, 0] == 1 and T[0, 1] == -1 and hyp.forms[0].theta == 0.0
        assert hyp.forms[0].side == "greater"

    def test_enumeration_oracle(self, hundred_users):
        t = read_ratings(hundred_users)
        dense = np.full((t.d1, t.d2), np.nan)
        dense[t.users, t.items] = t.ratings
        pairs = [(i, j) for i in range(t.d1) for j in range(t.d2 - 1)
                 if not np.isnan(dense[i, j]) and not np.isnan(dense[i, j + 1])]
        hyp, proxy = adjacent_pair_family(t, 10**6)
        assert hyp.q == len(pairs)
        assert int(proxy.sum()) == sum(dense[i, j] > dense[i, j + 1] for i, j in pairs)
        # row-major order and the max_q cap
        capped, _ = adjacent_pair_family(t, 5)
        got = [(int(f.rows[0]), int(f.cols[0])) for f in capped.forms]
        assert got == pairs[:5]


class TestRandomMask:
    def test_split(self, hundred_users):
        t = read_ratings(hundred_users)
        kept, held = random_mask(t, 0.8, seed=1)
        assert kept.n + held.n == t.n
        assert abs(kept.n - 0.8 * t.n) <= 1
        both = sorted(zip(np.r_[kept.rows, held.rows], np.r_[kept.cols, held.cols]))
        assert both == sorted(zip(t.users, t.items))

    def test_deterministic(self, hundred_users):
        t = read_ratings(hundred_users)
        a, _ = random_mask(t, 0.5, seed=3)
        b, _ = random_mask(t, 0.5, seed=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_bad_fraction(self, hundred_users):
        with pytest.raises(ValueError):
            random_mask(read_ratings(hundred_users), 1.0)

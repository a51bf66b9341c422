"""Reading, filtering and splitting sparse ratings tables."""

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .completion import ObservationSet
from .inference import LinearForm
from .multitest import HypothesisSet

FORMATS = ("tsv_user_item_rating", "csv_wide_matrix")


class RatingsFormatError(ValueError):
    """A ratings file could not be parsed."""


class EmptyTableWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RatingsTable:
    """Observed ratings with dense row (user) and column (item) indices.

    Ids keep their first-appearance order; ``user_ids[k]`` is the id of
    row ``k``. ``timestamps`` holds the optional fourth tsv field verbatim.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: tuple
    item_ids: tuple
    timestamps: tuple | None = None

    @property
    def d1(self):
        return len(self.user_ids)

    @property
    def d2(self):
        return len(self.item_ids)

    @property
    def n(self):
        return int(self.ratings.size)

    @property
    def is_empty(self):
        return self.n == 0

    @property
    def user_index(self):
        return {u: k for k, u in enumerate(self.user_ids)}

    @property
    def item_index(self):
        return {v: k for k, v in enumerate(self.item_ids)}

    def to_observations(self):
        return ObservationSet(self.d1, self.d2, self.users, self.items, self.ratings)

    def equals(self, other):
        same_ts = (self.timestamps is None) == (other.timestamps is None) and (
            self.timestamps is None or tuple(self.timestamps) == tuple(other.timestamps)
        )
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
            and same_ts
        )


def _parse_rating(text, lineno):
    try:
        value = float(text)
    except ValueError:
        raise RatingsFormatError(f"line {lineno}: rating {text!r} is not a number") from None
    if not math.isfinite(value):
        raise RatingsFormatError(f"line {lineno}: rating {text!r} is not finite")
    return value


def _build(entries, user_order=None, item_order=None, with_ts=False):
    """Assemble a table from ``(user, item, rating, ts)`` tuples in file order."""
    users = {u: k for k, u in enumerate(user_order)} if user_order is not None else {}
    items = {v: k for k, v in enumerate(item_order)} if item_order is not None else {}
    rows, cols, vals, stamps = [], [], [], []
    for u, v, r, ts in entries:
        rows.append(users.setdefault(u, len(users)))
        cols.append(items.setdefault(v, len(items)))
        vals.append(r)
        stamps.append(ts)
    return RatingsTable(
        np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=np.float64), tuple(users), tuple(items),
        tuple(stamps) if with_ts else None,
    )


def _read_tsv(fh):
    entries, seen = [], {}
    n_fields = None
    for lineno, line in enumerate(fh, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise RatingsFormatError(
                f"line {lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
        if n_fields is None:
            n_fields = len(parts)
        elif len(parts) != n_fields:
            raise RatingsFormatError(f"line {lineno}: inconsistent number of fields")
        user, item = parts[0].strip(), parts[1].strip()
        if not user or not item:
            raise RatingsFormatError(f"line {lineno}: empty user or item id")
        rating = _parse_rating(parts[2], lineno)
        if rating == 0:  # unrated
            continue
        if (user, item) in seen:
            raise RatingsFormatError(
                f"line {lineno}: duplicate rating for ({user}, {item}), first on line {seen[user, item]}")
        seen[user, item] = lineno
        entries.append((user, item, rating, parts[3] if len(parts) == 4 else None))
    if n_fields is None:
        raise RatingsFormatError("file contains no ratings")
    return _build(entries, with_ts=n_fields == 4)


def _read_wide(fh):
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise RatingsFormatError("file is empty") from None
    if len(header) < 2:
        raise RatingsFormatError("line 1: header needs a label column and at least one item")
    item_ids = [h.strip() for h in header[1:]]
    if len(set(item_ids)) != len(item_ids):
        raise RatingsFormatError("line 1: duplicate column labels")
    entries, user_ids = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or not any(c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise RatingsFormatError(
                f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        user = row[0].strip()
        if not user or user in user_ids:
            raise RatingsFormatError(f"line {lineno}: missing or duplicate row label {user!r}")
        user_ids.append(user)
        for item, cell in zip(item_ids, row[1:]):
            cell = cell.strip()
            if not cell:
                continue
            rating = _parse_rating(cell, lineno)
            if rating != 0:
                entries.append((user, item, rating, None))
    if not user_ids:
        raise RatingsFormatError("file contains no data rows")
    return _build(entries, user_ids, item_ids)


def read_ratings(path, format="tsv_user_item_rating"):
    """Read a ratings file.

    Parameters
    ----------
    path : str or path-like
    format : {"tsv_user_item_rating", "csv_wide_matrix"}
        ``tsv_user_item_rating``: ``user<TAB>item<TAB>rating[<TAB>timestamp]``
        per line. ``csv_wide_matrix``: a header of column labels (the first
        labels the row-id column) and one row per user. Zero or empty
        ratings mean unrated in both formats.
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    with open(path, newline="" if format == "csv_wide_matrix" else None) as fh:
        return _read_tsv(fh) if format == "tsv_user_item_rating" else _read_wide(fh)


def write_ratings(table, path, format="tsv_user_item_rating", label="user"):
    """Write ``table`` so that :func:`read_ratings` returns an equal table."""
    if format == "tsv_user_item_rating":
        with open(path, "w") as fh:
            for k in range(table.n):
                fields = [table.user_ids[table.users[k]], table.item_ids[table.items[k]],
                          repr(float(table.ratings[k]))]
                if table.timestamps is not None:
                    fields.append(table.timestamps[k])
                fh.write("\t".join(fields) + "\n")
    elif format == "csv_wide_matrix":
        grid = [[""] * table.d2 for _ in range(table.d1)]
        for i, j, r in zip(table.users, table.items, table.ratings):
            grid[i][j] = repr(float(r))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([label, *table.item_ids])
            for uid, row in zip(table.user_ids, grid):
                writer.writerow([uid, *row])
    else:
        raise ValueError(f"format must be one of {FORMATS}")


def filter_min_ratings(table, min_count):
    """Drop users with fewer than ``min_count`` ratings and re-index."""
    if min_count < 0:
        raise ValueError("min_count must be non-negative")
    if min_count == 0:
        return table
    counts = np.bincount(table.users, minlength=table.d1)
    keep = counts[table.users] >= min_count
    ts = table.timestamps
    entries = [
        (table.user_ids[table.users[k]], table.item_ids[table.items[k]],
         float(table.ratings[k]), ts[k] if ts is not None else None)
        for k in np.flatnonzero(keep)
    ]
    out = _build(entries, with_ts=ts is not None)
    if out.is_empty:
        warnings.warn(f"no user has at least {min_count} ratings", EmptyTableWarning,
                      stacklevel=2)
    return out


def adjacent_pair_family(table, max_q, side="greater"):
    """Comparisons of horizontally adjacent observed cells.

    Scans cells in row-major index order for pairs ``(i, j), (i, j + 1)``
    that are both observed, keeping the first ``max_q``. The proxy label of
    a pair is ``Y[i, j] > Y[i, j + 1]``.

    Returns
    -------
    hypotheses : HypothesisSet
        Forms ``e_i e_j^T - e_i e_{j+1}^T`` with ``theta = 0``; ``truth``
        holds the proxy labels.
    proxy : ndarray of bool
    """
    if max_q < 0:
        raise ValueError("max_q must be non-negative")
    order = np.lexsort((table.items, table.users))
    i, j, y = table.users[order], table.items[order], table.ratings[order]
    adjacent = np.flatnonzero((i[1:] == i[:-1]) & (j[1:] == j[:-1] + 1))[:max_q]
    forms = [LinearForm([i[k], i[k]], [j[k], j[k] + 1], [1.0, -1.0], 0.0, side)
             for k in adjacent]
    proxy = y[adjacent] > y[adjacent + 1]
    return HypothesisSet(forms, proxy), proxy


def random_mask(table, keep_fraction, seed=0):
    """Split the observed cells into kept and held-out parts without replacement."""
    if not 0 < keep_fraction < 1:
        raise ValueError("keep_fraction must lie in (0, 1)")
    obs = table.to_observations()
    perm = np.random.default_rng(seed).permutation(obs.n)
    k = round(keep_fraction * obs.n)
    return obs.subset(np.sort(perm[:k])), obs.subset(np.sort(perm[k:]))

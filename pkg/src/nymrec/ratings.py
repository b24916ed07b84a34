"""Sparse rating storage, file ingestion, splitting, and thinning.

Ratings live as parallel triplet arrays (user, item, value) with dense
0-based indices. Per-user and per-item views are built lazily from a
stable sort, so iterating one user's ratings preserves the order the
triplets were loaded in.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from ._seeds import substream

# Canonical field separators for the supported ingestion formats.
FORMAT_SEPARATORS = {
    "csv_comma": ",",
    "coloncolon": "::",
    "tab": "\t",
}


class RatingsError(ValueError):
    """Base class for ingestion and consistency failures."""


class ParseError(RatingsError):
    """A data line that cannot be parsed. Carries the 1-based line number."""

    def __init__(self, line_no: int, line: str, reason: str):
        self.line_no = line_no
        self.line = line
        super().__init__(f"line {line_no}: {reason}: {line!r}")


class DuplicateRatingError(RatingsError):
    """The same (user, item) pair was rated more than once."""


class RatingTriplet(NamedTuple):
    user: int
    item: int
    value: float


class SparseRatings:
    """Immutable sparse rating matrix stored as triplets.

    ``n_users`` and ``n_items`` fix the matrix dimensions; users or items
    without any rating are legal (e.g. after splitting).
    """

    def __init__(self, n_users: int, n_items: int, users, items, values):
        def own(arr, dtype):
            out = np.ascontiguousarray(arr, dtype=dtype)
            return out.copy() if out is arr else out  # caller keeps theirs writable

        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = own(users, np.int64)
        self.items = own(items, np.int64)
        self.values = own(values, np.float64)
        if not (self.users.shape == self.items.shape == self.values.shape):
            raise RatingsError("triplet arrays must have identical length")
        if self.users.ndim != 1:
            raise RatingsError("triplet arrays must be 1-dimensional")
        if self.n_users < 0 or self.n_items < 0:
            raise RatingsError("matrix dimensions must be non-negative")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise RatingsError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise RatingsError("item index out of range")
            if not np.isfinite(self.values).all():
                raise RatingsError("rating values must be finite")
        for arr in (self.users, self.items, self.values):
            arr.setflags(write=False)

    @property
    def size(self) -> int:
        return self.users.size

    @property
    def density(self) -> float:
        cells = self.n_users * self.n_items
        return self.size / cells if cells else 0.0

    def __repr__(self):
        return (f"SparseRatings({self.n_users} users x {self.n_items} items, "
                f"{self.size} ratings, density {self.density:.4g})")

    # Lazy CSR-style indexes. Stable sort keeps load order within a row.
    @cached_property
    def _user_index(self):
        order = np.argsort(self.users, kind="stable")
        counts = np.bincount(self.users, minlength=self.n_users)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return order, indptr

    @cached_property
    def _item_index(self):
        order = np.argsort(self.items, kind="stable")
        counts = np.bincount(self.items, minlength=self.n_items)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return order, indptr

    def user_ratings(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        """(items, values) rated by ``user``, in load order."""
        order, indptr = self._user_index
        sel = order[indptr[user]:indptr[user + 1]]
        return self.items[sel], self.values[sel]

    def item_ratings(self, item: int) -> tuple[np.ndarray, np.ndarray]:
        """(users, values) who rated ``item``, in load order."""
        order, indptr = self._item_index
        sel = order[indptr[item]:indptr[item + 1]]
        return self.users[sel], self.values[sel]

    def user_rating_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def item_rating_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def subset(self, mask) -> "SparseRatings":
        """New store with the same dimensions keeping only masked triplets."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.users.shape:
            raise RatingsError("subset mask must match triplet count")
        return SparseRatings(self.n_users, self.n_items,
                             self.users[mask], self.items[mask], self.values[mask])

    def iter_triplets(self) -> Iterator[RatingTriplet]:
        for u, v, r in zip(self.users, self.items, self.values):
            yield RatingTriplet(int(u), int(v), float(r))


def _open_text(source):
    """Accept a path, raw text/bytes, or an open stream; yield text lines."""
    if isinstance(source, Path):
        return source.open("r", encoding="utf-8"), True
    if isinstance(source, str):
        return Path(source).open("r", encoding="utf-8"), True
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8")), True
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8"), False


def load_triplets(source, fmt: str = "csv_comma") -> SparseRatings:
    """Parse a triplet file into a SparseRatings.

    ``source`` may be a path, a text or byte stream, or raw bytes. Each
    data line is ``user<sep>item<sep>rating``; fields past the third
    (e.g. timestamps) are ignored. Ids may be arbitrary strings and are
    re-indexed densely from 0 in first-seen order. Leading lines that do
    not parse as data and do not start with a digit (column headers) are
    skipped; any later malformed line raises ParseError with its line
    number. A repeated (user, item) pair raises DuplicateRatingError.
    """
    try:
        sep = FORMAT_SEPARATORS[fmt]
    except KeyError:
        raise RatingsError(
            f"unknown format {fmt!r}; expected one of {sorted(FORMAT_SEPARATORS)}")

    stream, owned = _open_text(source)
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    u_list: list[int] = []
    i_list: list[int] = []
    r_list: list[float] = []
    header_zone = True
    try:
        for line_no, raw in enumerate(stream, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(sep)
            value = None
            if len(parts) >= 3:
                try:
                    value = float(parts[2])
                except ValueError:
                    value = None
                if value is not None and not math.isfinite(value):
                    value = None
            if value is None:
                if header_zone and not line[0].isdigit():
                    continue
                reason = ("expected user%sitem%srating" % (sep, sep)
                          if len(parts) < 3 else "rating field is not a finite number")
                raise ParseError(line_no, line, reason)
            header_zone = False
            u_list.append(user_ids.setdefault(parts[0], len(user_ids)))
            i_list.append(item_ids.setdefault(parts[1], len(item_ids)))
            r_list.append(value)
    finally:
        if owned:
            stream.close()

    n_users, n_items = len(user_ids), len(item_ids)
    users = np.asarray(u_list, dtype=np.int64)
    items = np.asarray(i_list, dtype=np.int64)
    values = np.asarray(r_list, dtype=np.float64)
    _check_duplicates(users, items, n_items, user_ids, item_ids)
    return SparseRatings(n_users, n_items, users, items, values)


def _check_duplicates(users, items, n_items, user_ids, item_ids):
    if users.size == 0:
        return
    keys = users * n_items + items
    uniq, counts = np.unique(keys, return_counts=True)
    if uniq.size == users.size:
        return
    key = uniq[np.argmax(counts > 1)]
    u, v = int(key) // n_items, int(key) % n_items
    user_names = list(user_ids)
    item_names = list(item_ids)
    raise DuplicateRatingError(
        f"duplicate rating for user {user_names[u]!r}, item {item_names[v]!r}")


def save_ratings(ratings: SparseRatings, path) -> None:
    """Write the canonical interchange CSV: header then dense-id triplets.

    Rows are sorted by (user, item) so output is deterministic. Values are
    written with repr, which round-trips float64 exactly.
    """
    order = np.lexsort((ratings.items, ratings.users))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("user,item,rating\n")
        for k in order:
            fh.write(f"{ratings.users[k]},{ratings.items[k]},{float(ratings.values[k])!r}\n")


def load_ratings(path, n_users: int | None = None, n_items: int | None = None) -> SparseRatings:
    """Read a canonical CSV written by save_ratings.

    Unlike load_triplets this keeps the integer ids as-is, so files that
    share an id space (e.g. a train/heldout pair) stay aligned. Dimensions
    default to max id + 1.
    """
    users, items, values = [], [], []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or (line_no == 1 and line.lower().startswith("user")):
                continue
            parts = line.split(",")
            if len(parts) < 3:
                raise ParseError(line_no, line, "expected user,item,rating")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                values.append(float(parts[2]))
            except ValueError:
                raise ParseError(line_no, line, "expected integer ids and float rating")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if n_users is None:
        n_users = int(users.max()) + 1 if users.size else 0
    if n_items is None:
        n_items = int(items.max()) + 1 if items.size else 0
    return SparseRatings(n_users, n_items, users, items, np.asarray(values))


@dataclass(frozen=True)
class SplitSpec:
    """Per-triplet Bernoulli split fractions; must sum to 1."""

    train_fraction: float
    valid_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.valid_fraction, self.test_fraction)
        if any(f < 0 for f in fracs):
            raise ValueError("split fractions must be non-negative")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)}")


def split(ratings: SparseRatings, spec: SplitSpec):
    """Partition triplets independently into (train, valid, test).

    Every triplet lands in exactly one part; each part keeps the full
    matrix dimensions. Deterministic in spec.seed.
    """
    draws = substream(spec.seed, "split").random(ratings.size)
    train_mask = draws < spec.train_fraction
    valid_mask = ~train_mask & (draws < spec.train_fraction + spec.valid_fraction)
    test_mask = ~(train_mask | valid_mask)
    return ratings.subset(train_mask), ratings.subset(valid_mask), ratings.subset(test_mask)


def remove_entries(ratings: SparseRatings, missing_fraction: float, seed: int = 0,
                   return_removed: bool = False):
    """Keep each triplet independently with probability 1 - missing_fraction.

    With ``return_removed`` the dropped complement is returned as well,
    which is what a fill-in evaluation tests against. fraction 0 returns
    the input contents unchanged.
    """
    if not 0.0 <= missing_fraction < 1.0:
        raise ValueError("missing_fraction must lie in [0, 1)")
    keep = substream(seed, "remove").random(ratings.size) >= missing_fraction
    kept = ratings.subset(keep)
    if return_removed:
        return kept, ratings.subset(~keep)
    return kept

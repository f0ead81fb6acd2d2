"""Rating ingestion, item holdout splits, rater pools, and rating reveals."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

FORMATS = ("csv", "movielens")
_SEPARATORS = {"csv": ",", "movielens": "::"}


class DataError(ValueError):
    pass


class FormatError(DataError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, path, line_number, reason):
        super().__init__(f"{path}:{line_number}: {reason}")
        self.line_number = line_number


class DuplicateRatingError(DataError):
    def __init__(self, user, item):
        super().__init__(f"duplicate rating for (user={user!r}, item={item!r})")
        self.pair = (user, item)


class UnknownItemError(DataError):
    pass


class UnknownUserError(DataError):
    pass


class EmptyPoolError(DataError):
    pass


@dataclass(frozen=True)
class Rating:
    """One observed (user, item, value, timestamp) event."""

    user: str
    item: str
    value: float
    timestamp: int = 0


class RatingDataset:
    """Immutable rating collection with dense 0-based user/item indices.

    Identifiers are arbitrary strings externally; internally each user/item
    gets an index in first-appearance order.  A dataset produced by
    `split_items` shares its parent's index maps, so models, pools, and
    evaluation sets built from the same family all agree on index space.
    Read-only after construction and safe to share across threads.
    """

    def __init__(self, user_ids, item_ids, user_idx, item_idx, values, timestamps, scale):
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)
        self.user_index = {u: j for j, u in enumerate(self.user_ids)}
        self.item_index = {i: j for j, i in enumerate(self.item_ids)}
        self.user_idx = np.asarray(user_idx, dtype=np.int64)
        self.item_idx = np.asarray(item_idx, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        lo, hi = scale
        self.scale = (float(lo), float(hi))
        n = len(self.values)
        if not (len(self.user_idx) == len(self.item_idx) == len(self.timestamps) == n):
            raise DataError("rating array lengths disagree")
        if n:
            if self.user_idx.min() < 0 or self.user_idx.max() >= len(self.user_ids):
                raise DataError("user index out of range")
            if self.item_idx.min() < 0 or self.item_idx.max() >= len(self.item_ids):
                raise DataError("item index out of range")
            vmin, vmax = float(self.values.min()), float(self.values.max())
            if vmin < self.scale[0] or vmax > self.scale[1]:
                raise DataError(
                    f"rating value outside declared scale [{self.scale[0]:g}, {self.scale[1]:g}]"
                )

    @classmethod
    def from_ratings(cls, ratings, scale=(1.0, 5.0)) -> "RatingDataset":
        """Build a dataset from Rating records, indexing in first-appearance order."""
        user_ids, item_ids = [], []
        user_index, item_index = {}, {}
        seen = set()
        u_idx, i_idx, values, timestamps = [], [], [], []
        for r in ratings:
            u = user_index.get(r.user)
            if u is None:
                u = user_index[r.user] = len(user_ids)
                user_ids.append(r.user)
            i = item_index.get(r.item)
            if i is None:
                i = item_index[r.item] = len(item_ids)
                item_ids.append(r.item)
            if (u, i) in seen:
                raise DuplicateRatingError(r.user, r.item)
            seen.add((u, i))
            u_idx.append(u)
            i_idx.append(i)
            values.append(r.value)
            timestamps.append(r.timestamp)
        return cls(user_ids, item_ids, u_idx, i_idx, values, timestamps, scale)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_ratings(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return self.n_ratings

    @property
    def n_rated_items(self) -> int:
        """Items actually appearing in ratings (after a split this can be
        smaller than the index size, which is inherited from the parent)."""
        return int(np.unique(self.item_idx).size)

    @cached_property
    def ratings(self) -> tuple:
        return tuple(
            Rating(
                self.user_ids[u],
                self.item_ids[i],
                float(v),
                int(t),
            )
            for u, i, v, t in zip(self.user_idx, self.item_idx, self.values, self.timestamps)
        )

    @cached_property
    def _rows_by_item(self) -> dict:
        rows: dict[int, list[int]] = {}
        for row, i in enumerate(self.item_idx):
            rows.setdefault(int(i), []).append(row)
        return {i: np.asarray(r, dtype=np.int64) for i, r in rows.items()}

    def item_rows(self, item: str) -> np.ndarray:
        """Row positions of all ratings of `item`, in input order."""
        if item not in self.item_index:
            raise UnknownItemError(f"unknown item {item!r}")
        return self._rows_by_item.get(self.item_index[item], np.empty(0, dtype=np.int64))

    @cached_property
    def user_rating_counts(self) -> np.ndarray:
        return np.bincount(self.user_idx, minlength=self.n_users)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RatingDataset):
            return NotImplemented
        return (
            self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
            and self.scale == other.scale
            and np.array_equal(self.user_idx, other.user_idx)
            and np.array_equal(self.item_idx, other.item_idx)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RaterPool:
    """Candidate raters of one new item.

    `users` are model user indices; `user_ids` the matching external
    identifiers; `vectors` the (k+1, B) matrix of augmented vectors (1, P_v),
    one column per pool user; `variances` optional per-user noise variances.
    """

    item: str
    users: list
    user_ids: list
    vectors: np.ndarray
    variances: np.ndarray | None = None

    def __post_init__(self):
        b = len(self.users)
        if len(self.user_ids) != b:
            raise DataError("users and user_ids lengths disagree")
        if self.vectors.ndim != 2 or self.vectors.shape[1] != b:
            raise DataError(f"vectors must have {b} columns, got shape {self.vectors.shape}")
        if len(set(self.users)) != b:
            raise DataError("pool users must be distinct")
        if self.variances is not None:
            if self.variances.shape != (b,):
                raise DataError("variances length must match pool size")
            if b and float(self.variances.min()) <= 0:
                raise DataError("pool variances must be positive")

    @property
    def size(self) -> int:
        return len(self.users)


def _parse_line(fields, path, line_number, scale):
    if len(fields) not in (3, 4):
        raise FormatError(path, line_number, f"expected 3 or 4 fields, got {len(fields)}")
    user, item = fields[0], fields[1]
    if not user or not item:
        raise FormatError(path, line_number, "empty user or item identifier")
    try:
        value = float(fields[2])
    except ValueError:
        raise FormatError(path, line_number, f"rating value {fields[2]!r} is not numeric") from None
    if value < scale[0] or value > scale[1]:
        raise FormatError(
            path, line_number, f"rating value {value:g} outside declared scale "
            f"[{scale[0]:g}, {scale[1]:g}]"
        )
    timestamp = 0
    if len(fields) == 4 and fields[3] != "":
        try:
            timestamp = int(fields[3])
        except ValueError:
            raise FormatError(path, line_number, f"timestamp {fields[3]!r} is not an integer") from None
    return user, item, value, timestamp


def load_ratings(path, format: str = "csv", scale=(1.0, 5.0)) -> RatingDataset:
    """Load `user,item,value[,timestamp]` (csv) or `user::item::value::timestamp`
    (movielens) files.

    A header line is auto-detected by a non-numeric value field and skipped.
    Duplicate (user, item) pairs, malformed lines, and out-of-scale values are
    rejected with the offending line number.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    sep = _SEPARATORS[format]
    scale = (float(scale[0]), float(scale[1]))
    user_ids, item_ids = [], []
    user_index, item_index = {}, {}
    seen = {}
    u_idx, i_idx, values, timestamps = [], [], [], []
    first_data_line = True
    with open(path, encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(sep)
            if first_data_line:
                first_data_line = False
                try:
                    float(fields[2] if len(fields) > 2 else "")
                except ValueError:
                    continue  # header
            user, item, value, timestamp = _parse_line(fields, path, line_number, scale)
            u = user_index.get(user)
            if u is None:
                u = user_index[user] = len(user_ids)
                user_ids.append(user)
            i = item_index.get(item)
            if i is None:
                i = item_index[item] = len(item_ids)
                item_ids.append(item)
            if (u, i) in seen:
                raise FormatError(
                    path, line_number,
                    f"duplicate rating for (user={user!r}, item={item!r}), "
                    f"first seen on line {seen[(u, i)]}",
                )
            seen[(u, i)] = line_number
            u_idx.append(u)
            i_idx.append(i)
            values.append(value)
            timestamps.append(timestamp)
    return RatingDataset(user_ids, item_ids, u_idx, i_idx, values, timestamps, scale)


def save_ratings(dataset: RatingDataset, path, format: str = "csv") -> None:
    """Write a dataset back out; `load_ratings` of the result round-trips."""
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    sep = _SEPARATORS[format]
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, v, t in zip(dataset.user_idx, dataset.item_idx, dataset.values,
                              dataset.timestamps):
            fh.write(sep.join((dataset.user_ids[u], dataset.item_ids[i],
                               repr(float(v)), str(int(t)))) + "\n")


def split_items(dataset: RatingDataset, heldout_count: int, seed: int):
    """Hold out `heldout_count` uniformly random items as "new items".

    Returns (train, new_items): `train` drops every rating of a held-out item
    but keeps the parent's index maps, so indices stay aligned; `new_items`
    lists the held-out item identifiers in draw order.  Deterministic per seed.
    """
    if heldout_count < 0:
        raise DataError("heldout_count must be nonnegative")
    if heldout_count >= dataset.n_items:
        raise DataError(
            f"cannot hold out {heldout_count} of {dataset.n_items} items"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(dataset.n_items, size=heldout_count, replace=False)
    new_items = [dataset.item_ids[int(j)] for j in chosen]
    keep = ~np.isin(dataset.item_idx, chosen)
    train = RatingDataset(
        dataset.user_ids,
        dataset.item_ids,
        dataset.user_idx[keep],
        dataset.item_idx[keep],
        dataset.values[keep],
        dataset.timestamps[keep],
        dataset.scale,
    )
    return train, new_items


def rater_pool(dataset: RatingDataset, model, item: str, variances=None) -> RaterPool:
    """Pool of candidate raters for `item`: the users who rated it, restricted
    to users the model covers, in dataset order.

    `variances` (per-model-user, see lfm.UserVariances) attaches each pool
    user's noise variance for the weighted selection/estimation paths.
    """
    rows = dataset.item_rows(item)
    if rows.size == 0:
        raise EmptyPoolError(f"item {item!r} has no raters")
    users, user_ids = [], []
    for row in rows:
        uid = dataset.user_ids[int(dataset.user_idx[row])]
        midx = model.user_index.get(uid)
        if midx is None:
            continue  # rater unknown to the model
        users.append(midx)
        user_ids.append(uid)
    if not users:
        raise EmptyPoolError(
            f"no rater of item {item!r} is covered by the model"
        )
    idx = np.asarray(users, dtype=np.int64)
    vectors = np.vstack([np.ones(len(users)), model.user_factors[:, idx]])
    var = None
    if variances is not None:
        var = np.asarray(variances.values, dtype=np.float64)[idx]
    return RaterPool(item=item, users=users, user_ids=user_ids, vectors=vectors,
                     variances=var)


def reveal(pool: RaterPool, subset, heldout: RatingDataset):
    """Partition the pool's ratings of its item into (revealed, remainder).

    `subset` lists the pool users whose ratings are revealed; the remainder
    (the non-selected raters' ratings) is the evaluation set.  Both lists
    keep pool order.
    """
    chosen = set(subset)
    unknown = chosen - set(pool.users)
    if unknown:
        raise UnknownUserError(f"subset users {sorted(unknown)} not in pool")
    by_user = {}
    for row in heldout.item_rows(pool.item):
        by_user[heldout.user_ids[int(heldout.user_idx[row])]] = Rating(
            heldout.user_ids[int(heldout.user_idx[row])],
            pool.item,
            float(heldout.values[row]),
            int(heldout.timestamps[row]),
        )
    revealed, remainder = [], []
    for midx, uid in zip(pool.users, pool.user_ids):
        rating = by_user.get(uid)
        if rating is None:
            raise DataError(
                f"pool user {uid!r} has no rating of item {pool.item!r} in the held-out data"
            )
        (revealed if midx in chosen else remainder).append(rating)
    return revealed, remainder

"""Rating-triple datasets: parsing, statistics, splitting and serialisation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .numkernel import make_rng

DELIMITERS = {"tab": "\t", "::": "::", "comma": ",", "whitespace": None}


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class RatingTriple(NamedTuple):
    user: int
    item: int
    rating: int


@dataclass(frozen=True, eq=False)
class RatingDataset:
    """Columnar bag of ``(user, item, rating)`` triples.

    ``users``, ``items`` and ``ratings`` are parallel int64 arrays. Ids are
    dense indices in ``[0, num_users)`` and ``[0, num_items)``.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    num_users: int
    num_items: int
    scale: tuple[int, int]
    name: str = "dataset"

    def __post_init__(self):
        for col in ("users", "items", "ratings"):
            arr = np.ascontiguousarray(getattr(self, col), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, col, arr)
        object.__setattr__(self, "scale", (int(self.scale[0]), int(self.scale[1])))

    @classmethod
    def from_triples(cls, triples: Iterable, num_users=None, num_items=None,
                     scale=None, name="dataset"):
        rows = np.array([tuple(t) for t in triples], dtype=np.int64).reshape(-1, 3)
        users, items, ratings = rows[:, 0], rows[:, 1], rows[:, 2]
        if num_users is None:
            num_users = int(users.max()) + 1 if len(users) else 0
        if num_items is None:
            num_items = int(items.max()) + 1 if len(items) else 0
        if scale is None:
            if not len(ratings):
                raise DatasetError("cannot infer a scale from an empty triple list")
            scale = (int(ratings.min()), int(ratings.max()))
        return cls(users, items, ratings, int(num_users), int(num_items), scale, name)

    def __len__(self):
        return len(self.ratings)

    def triples(self):
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingTriple(u, i, r)

    def triple_set(self):
        return set(self.triples())

    def subset(self, mask, name=None):
        return RatingDataset(self.users[mask], self.items[mask], self.ratings[mask],
                             self.num_users, self.num_items, self.scale,
                             name if name is not None else self.name)

    def validate(self):
        """Raise :class:`DatasetError` unless every dataset invariant holds."""
        n = len(self.ratings)
        if len(self.users) != n or len(self.items) != n:
            raise DatasetError("column lengths differ")
        lo, hi = self.scale
        if lo > hi:
            raise DatasetError(f"scale {self.scale} is inverted")
        if n == 0:
            return self
        if self.users.min() < 0 or self.users.max() >= self.num_users:
            raise DatasetError(f"user id outside [0, {self.num_users})")
        if self.items.min() < 0 or self.items.max() >= self.num_items:
            raise DatasetError(f"item id outside [0, {self.num_items})")
        if self.ratings.min() < lo or self.ratings.max() > hi:
            raise DatasetError(f"rating outside scale {self.scale}")
        keys = self.users * self.num_items + self.items
        if len(np.unique(keys)) != n:
            raise DatasetError("duplicate (user, item) pair")
        return self

    def equals(self, other) -> bool:
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and self.scale == other.scale and self.triple_set() == other.triple_set())


@dataclass(frozen=True)
class DatasetStats:
    users: int
    items: int
    ratings: int
    scale: tuple[int, int]
    sparsity: float

    @classmethod
    def from_counts(cls, users, items, ratings, scale=(1, 5)):
        return cls(users, items, ratings, tuple(scale), sparsity(users, items, ratings))

    def format(self) -> str:
        lo, hi = self.scale
        return (f"users\t{self.users}\nitems\t{self.items}\nratings\t{self.ratings}\n"
                f"scale\t{lo} to {hi}\nsparsity\t{self.sparsity:.2f}\n")


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DatasetError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def sparsity(users, items, ratings) -> float:
    """Percentage of empty cells in a ``users x items`` rating matrix."""
    if users <= 0 or items <= 0:
        raise DatasetError("sparsity needs positive user and item counts")
    return 100.0 * (1.0 - ratings / (users * items))


def dataset_stats(ds: RatingDataset) -> DatasetStats:
    return DatasetStats(ds.num_users, ds.num_items, len(ds), ds.scale,
                        sparsity(ds.num_users, ds.num_items, len(ds)))


# --------------------------------------------------------------------------
# text formats


def _split_fields(line, delimiter):
    if delimiter is None:
        return line.split()
    return [f.strip() for f in line.split(delimiter)]


def _parse_int(text, what, line_no):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        raise ParseError(line_no, f"unparsable {what} {text!r}") from None
    if not value.is_integer():
        raise ParseError(line_no, f"{what} {text!r} is not an integer score")
    return int(value)


def _dense_ids(raw):
    """Map raw id strings to 0-based indices, ordered numerically when possible."""
    uniq = set(raw)
    try:
        ordered = sorted(uniq, key=int)
    except ValueError:
        ordered = sorted(uniq)
    index = {key: n for n, key in enumerate(ordered)}
    return np.fromiter((index[r] for r in raw), dtype=np.int64, count=len(raw)), len(ordered)


def _literal_ids(raw, what):
    try:
        ids = np.array([int(r) for r in raw], dtype=np.int64)
    except ValueError:
        raise DatasetError(f"{what} ids must be integers to be kept as indices") from None
    if ids.min() < 0:
        raise DatasetError(f"negative {what} id {int(ids.min())}")
    return ids, int(ids.max()) + 1


def parse_ratings(lines: Iterable[str], delimiter="\t", scale=None, name="dataset", keep_ids=False) -> RatingDataset:
    """Parse delimited ``user item rating [timestamp]`` lines.

    ``delimiter`` is a literal separator (``"\\t"``, ``"::"``, ``","``), one
    of the :data:`DELIMITERS` names, or ``None`` for any whitespace. Blank
    lines and lines starting with ``#`` are skipped. A later duplicate of a
    ``(user, item)`` pair replaces the earlier one. With ``keep_ids`` the ids
    must be non-negative integers and are used as indices unchanged.
    """
    delimiter = DELIMITERS.get(delimiter, delimiter)
    latest = {}
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = _split_fields(line, delimiter)
        if len(fields) < 3:
            raise ParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
        user, item = fields[0], fields[1]
        if not user or not item:
            raise ParseError(line_no, "empty id field")
        rating = _parse_int(fields[2], "rating", line_no)
        key = (user, item)
        latest.pop(key, None)
        latest[key] = rating
    if not latest:
        raise DatasetError("no rating lines in input")
    raw_users = [k[0] for k in latest]
    raw_items = [k[1] for k in latest]
    if keep_ids:
        users, n_users = _literal_ids(raw_users, "user")
        items, n_items = _literal_ids(raw_items, "item")
    else:
        users, n_users = _dense_ids(raw_users)
        items, n_items = _dense_ids(raw_items)
    ratings = np.fromiter(latest.values(), dtype=np.int64, count=len(latest))
    if scale is None:
        scale = (int(ratings.min()), int(ratings.max()))
    ds = RatingDataset(users, items, ratings, n_users, n_items, tuple(scale), name)
    return ds.validate()


def load_ratings(path, delimiter="\t", scale=None, name=None, keep_ids=False) -> RatingDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_ratings(fh, delimiter=delimiter, scale=scale,
                             name=name if name is not None else path.stem, keep_ids=keep_ids)


def write_ratings(ds: RatingDataset, sink) -> int:
    """Write one ``user<TAB>item<TAB>rating`` line per triple; returns bytes written.

    ``sink`` is a path or a binary/text stream.
    """
    payload = "".join(f"{u}\t{i}\t{r}\n" for u, i, r in
                      zip(ds.users.tolist(), ds.items.tolist(), ds.ratings.tolist())).encode("utf-8")
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    elif isinstance(sink, io.TextIOBase):
        sink.write(payload.decode("utf-8"))
    else:
        sink.write(payload)
    return len(payload)


# --------------------------------------------------------------------------
# splitting


def split(ds: RatingDataset, spec: SplitSpec):
    """Per-user stratified random split into ``(train, test)``.

    Each user sends ``round(n * test_fraction)`` of their ``n`` ratings to the
    test side, capped at ``n - 1`` so at least one rating stays in train.
    """
    n = len(ds)
    rng = make_rng(spec.seed, "split")
    keys = rng.random(n)
    order = np.lexsort((keys, ds.users))
    sorted_users = ds.users[order]
    counts = np.bincount(ds.users, minlength=ds.num_users)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.arange(n) - starts[sorted_users]
    per_user = counts[sorted_users]
    n_test = np.minimum(np.floor(per_user * spec.test_fraction + 0.5), per_user - 1)
    in_test = np.zeros(n, dtype=bool)
    in_test[order] = rank < n_test
    train = ds.subset(~in_test, name=f"{ds.name}/train")
    test = ds.subset(in_test, name=f"{ds.name}/test")
    return train, test

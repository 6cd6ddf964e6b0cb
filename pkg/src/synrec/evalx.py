"""Top-N evaluation (precision, recall, F1) and the experiment grid runner.

Candidates for a user are that user's own test items. A user takes part in a
``(N, theta)`` cell only if at least one of their test items is rated
``>= theta``; per-user precision and recall are macro-averaged and F1 is taken
from the averaged pair.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import models as M
from .data import RatingDataset, SplitSpec, dataset_stats, split
from .numkernel import derive_seed, make_rng

CSV_FIELDS = ("model", "dataset", "N", "theta", "precision", "recall", "f1", "users")
DEFAULT_N = (2, 4, 6, 8, 10)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalGrid:
    n_values: tuple = DEFAULT_N
    thresholds: tuple | None = None
    seeds: tuple = (0, 1, 2)

    def thresholds_for(self, scale):
        """The configured thresholds, or the two top ratings of ``scale``."""
        if self.thresholds is not None:
            return tuple(self.thresholds)
        return (scale[1] - 1, scale[1])

    def validate(self, scale):
        n = list(self.n_values)
        if not n or any(v < 1 for v in n) or any(b <= a for a, b in zip(n, n[1:])):
            raise EvalError(f"n_values must be positive and strictly increasing: {n}")
        for t in self.thresholds_for(scale):
            if not scale[0] <= t <= scale[1]:
                raise EvalError(f"threshold {t} outside the rating scale {scale}")
        if not self.seeds:
            raise EvalError("grid needs at least one seed")
        return self


@dataclass(frozen=True)
class EvalPoint:
    model: str
    dataset: str
    n: int
    theta: int
    precision: float
    recall: float
    f1: float
    users: int

    def key(self):
        return (_model_order(self.model), self.dataset, self.n, self.theta)


@dataclass
class EvalReport:
    points: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def sorted_points(self):
        return sorted(self.points, key=EvalPoint.key)

    def lookup(self, model, n, theta, dataset=None):
        for p in self.points:
            if p.model == model and p.n == n and p.theta == theta and (dataset is None or p.dataset == dataset):
                return p
        raise KeyError((model, n, theta, dataset))


def _model_order(name):
    try:
        return (M.MODEL_KINDS.index(name), name)
    except ValueError:
        return (len(M.MODEL_KINDS), name)


# --------------------------------------------------------------------------
# per-user ranking and metrics


def _scores(model, users, items):
    if hasattr(model, "score_batch"):
        return model.score_batch(users, items)
    return M.score_batch(model, users, items)


def ranking_order(scores, reliability, items, users=None):
    """Indices that sort candidates by score desc, reliability desc, item id asc.

    With ``users`` given, the order is additionally grouped by user.
    """
    keys = [np.asarray(items)]
    if reliability is not None:
        keys.append(-np.asarray(reliability))
    keys.append(-np.asarray(scores))
    if users is not None:
        keys.append(np.asarray(users))
    return np.lexsort(keys)


def recommend_top_n(model, user, candidates, n):
    """Top ``n`` of ``candidates`` for ``user`` under the model's ranking."""
    if n < 1:
        raise EvalError(f"N must be >= 1, got {n}")
    candidates = np.asarray(list(candidates), dtype=np.int64)
    if len(candidates) == 0:
        return []
    scores, rel = _scores(model, np.full(len(candidates), user, dtype=np.int64), candidates)
    order = ranking_order(scores, rel, candidates)
    return candidates[order[:n]].tolist()


def precision_recall(recommended, relevant, n=None):
    recommended = list(recommended)
    if n is not None and len(recommended) > n:
        raise EvalError(f"{len(recommended)} recommendations exceed N={n}")
    relevant = set(relevant)
    if not relevant:
        raise EvalError("recall is undefined for a user with no relevant items")
    if not recommended:
        return 0.0, 0.0
    hits = sum(1 for item in recommended if item in relevant)
    return hits / len(recommended), hits / len(relevant)


def f1(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class RankedTest:
    """Test items of every user, ranked by one model."""

    users: np.ndarray       # user id per segment
    starts: np.ndarray      # segment offsets into ``ratings``
    lengths: np.ndarray
    ratings: np.ndarray     # test ratings in ranked order, grouped by user
    items: np.ndarray


def rank_test_set(model, test_set: RatingDataset) -> RankedTest:
    users, items, ratings = test_set.users, test_set.items, test_set.ratings
    if len(ratings) == 0:
        raise EvalError("empty test set")
    scores, rel = _scores(model, users, items)
    order = ranking_order(scores, rel, items, users)
    su = users[order]
    seg_users, starts, lengths = np.unique(su, return_index=True, return_counts=True)
    return RankedTest(seg_users, starts, lengths, ratings[order], items[order])


def cell_metrics(ranked: RankedTest, n, theta):
    """Macro precision, recall and the number of evaluated users for one cell."""
    rel = (ranked.ratings >= theta).astype(np.int64)
    csum = np.concatenate(([0], np.cumsum(rel)))
    total_rel = csum[ranked.starts + ranked.lengths] - csum[ranked.starts]
    shown = np.minimum(n, ranked.lengths)
    hits = csum[ranked.starts + shown] - csum[ranked.starts]
    ok = total_rel > 0
    if not ok.any():
        raise EvalError(f"no user has a test item rated >= theta={theta}")
    precision = float(np.mean(hits[ok] / shown[ok]))
    recall = float(np.mean(hits[ok] / total_rel[ok]))
    return precision, recall, int(ok.sum())


def evaluate(model, test_set: RatingDataset, n, theta, model_name=None) -> EvalPoint:
    lo, hi = test_set.scale
    if theta > hi:
        raise EvalError(f"threshold theta={theta} is above the scale maximum {hi}")
    if n < 1:
        raise EvalError(f"N must be >= 1, got {n}")
    ranked = rank_test_set(model, test_set)
    p, r, users = cell_metrics(ranked, n, theta)
    name = model_name or getattr(model, "kind", type(model).__name__)
    return EvalPoint(name, test_set.name, n, theta, p, r, f1(p, r), users)


def evaluate_cells(model, test_set, n_values, thresholds, model_name, dataset_name):
    ranked = rank_test_set(model, test_set)
    out = []
    for theta in thresholds:
        for n in n_values:
            p, r, users = cell_metrics(ranked, n, theta)
            out.append(EvalPoint(model_name, dataset_name, n, theta, p, r, f1(p, r), users))
    return out


# --------------------------------------------------------------------------
# grid runner


def _run_cell(args):
    kind, dataset, grid_seed, split_spec, config, n_values, thresholds = args
    cell_seed = derive_seed(split_spec.seed, grid_seed)
    train_set, test_set = split(dataset, SplitSpec(split_spec.test_fraction, cell_seed))
    rng = make_rng(cell_seed, "train", kind)
    model = M.build(kind, dataset.num_users, dataset.num_items, config, rng, scale=dataset.scale)
    model = M.train(model, train_set, rng)
    points = evaluate_cells(model, test_set, n_values, thresholds, kind, dataset.name)
    return kind, grid_seed, points, model.loss_log


def run_grid(kinds, dataset: RatingDataset, grid: EvalGrid = EvalGrid(), split_spec: SplitSpec = SplitSpec(),
             config: M.NetConfig | None = None, jobs=1) -> EvalReport:
    """Split, train every model kind once per seed, evaluate every (N, theta).

    Points are averaged over seeds; F1 comes from the averaged precision and
    recall. ``jobs > 1`` trains cells in worker processes; the result does not
    depend on scheduling.
    """
    kinds = [M.check_kind(k) for k in kinds]
    grid.validate(dataset.scale)
    thresholds = grid.thresholds_for(dataset.scale)
    n_values = tuple(grid.n_values)
    tasks = [(k, dataset, s, split_spec, config, n_values, thresholds) for k in kinds for s in grid.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    results.sort(key=lambda r: (kinds.index(r[0]), list(grid.seeds).index(r[1])))

    cells = {}
    loss_logs = {}
    for kind, seed, points, log in results:
        loss_logs[f"{kind}/{seed}"] = log
        for p in points:
            cells.setdefault((kind, p.n, p.theta), []).append(p)
    averaged = []
    for (kind, n, theta), pts in cells.items():
        prec = float(np.mean([p.precision for p in pts]))
        rec = float(np.mean([p.recall for p in pts]))
        users = int(round(np.mean([p.users for p in pts])))
        averaged.append(EvalPoint(kind, dataset.name, n, theta, prec, rec, f1(prec, rec), users))
    stats = dataset_stats(dataset)
    provenance = {
        "dataset": dataset.name,
        "stats": asdict(stats),
        "models": kinds,
        "seeds": list(grid.seeds),
        "n_values": list(n_values),
        "thresholds": list(thresholds),
        "test_fraction": split_spec.test_fraction,
        "split_seed": split_spec.seed,
        "config": asdict(config) if config is not None else None,
        "loss_logs": loss_logs,
    }
    return EvalReport(sorted(averaged, key=EvalPoint.key), provenance)


# --------------------------------------------------------------------------
# serialisation


def _row(p: EvalPoint, decimals=6):
    return [p.model, p.dataset, p.n, p.theta, f"{p.precision:.{decimals}f}", f"{p.recall:.{decimals}f}",
            f"{p.f1:.{decimals}f}", p.users]


def emit_report(report: EvalReport, fmt="csv", sink=None) -> bytes:
    """Serialise ``report`` as CSV or JSON lines, sorted by (model, N, theta)."""
    points = report.sorted_points()
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for p in points:
            writer.writerow(_row(p))
        payload = buf.getvalue().encode("utf-8")
    elif fmt in ("jsonl", "json-lines"):
        lines = [json.dumps({"model": p.model, "dataset": p.dataset, "N": p.n, "theta": p.theta,
                             "precision": p.precision, "recall": p.recall, "f1": p.f1, "users": p.users},
                            sort_keys=True) for p in points]
        payload = "".join(line + "\n" for line in lines).encode("utf-8")
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    if sink is not None:
        if isinstance(sink, (str, Path)):
            Path(sink).write_bytes(payload)
        else:
            sink.write(payload)
    return payload


def parse_report(text, fmt="csv") -> EvalReport:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    points = []
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_FIELDS:
            raise EvalError(f"unexpected CSV header {reader.fieldnames}")
        rows = list(reader)
    elif fmt in ("jsonl", "json-lines"):
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    for row in rows:
        points.append(EvalPoint(row["model"], row["dataset"], int(row["N"]), int(row["theta"]),
                                float(row["precision"]), float(row["recall"]), float(row["f1"]),
                                int(row["users"])))
    return EvalReport(points)

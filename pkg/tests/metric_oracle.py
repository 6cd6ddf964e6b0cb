"""Exhaustive reference for top-N precision and recall on tiny instances."""

from itertools import permutations

import numpy as np

from synrec.data import RatingDataset


class TableModel:
    """Scores (and optional reliabilities) looked up from a dict keyed by (user, item)."""

    def __init__(self, scores, reliability=None):
        self.scores = scores
        self.reliability = reliability
        self.kind = "table"

    def score_batch(self, users, items):
        s = np.array([self.scores[(u, i)] for u, i in zip(users.tolist(), items.tolist())], dtype=np.float64)
        if self.reliability is None:
            return s, None
        r = np.array([self.reliability[(u, i)] for u, i in zip(users.tolist(), items.tolist())], dtype=np.float64)
        return s, r


def _precedes(model, user, a, b):
    """Whether item ``a`` may sit directly before item ``b`` in ``user``'s ranking."""
    sa, sb = model.scores[(user, a)], model.scores[(user, b)]
    if sa != sb:
        return sa > sb
    if model.reliability is not None:
        ra, rb = model.reliability[(user, a)], model.reliability[(user, b)]
        if ra != rb:
            return ra > rb
    return a < b


def brute_force_ranking(model, user, items):
    """Scan every permutation and return the one that respects the ranking order."""
    for perm in permutations(items):
        if all(_precedes(model, user, perm[j], perm[j + 1]) for j in range(len(perm) - 1)):
            return list(perm)
    raise AssertionError("no permutation respects the order")


def brute_force_evaluate(model, test_set: RatingDataset, n, theta):
    precisions, recalls = [], []
    for user in sorted(set(test_set.users.tolist())):
        rows = [(i, r) for u, i, r in test_set.triples() if u == user]
        relevant = {i for i, r in rows if r >= theta}
        if not relevant:
            continue
        top = brute_force_ranking(model, user, [i for i, _ in rows])[:n]
        hits = len(set(top) & relevant)
        precisions.append(hits / len(top))
        recalls.append(hits / len(relevant))
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1, len(precisions)


def random_instance(rng, max_users=10, max_items=5, scale=(1, 5), with_reliability=None):
    """Random test set with tie-heavy scores; at least one user is evaluable at theta = scale max - 1."""
    while True:
        n_users = int(rng.integers(1, max_users + 1))
        triples, scores, rel = [], {}, {}
        item_pool = 12
        for u in range(n_users):
            k = int(rng.integers(1, max_items + 1))
            for i in rng.choice(item_pool, size=k, replace=False).tolist():
                triples.append((u, i, int(rng.integers(scale[0], scale[1] + 1))))
                scores[(u, i)] = float(rng.integers(1, 4))
                rel[(u, i)] = float(rng.integers(1, 3)) / 2
        ds = RatingDataset.from_triples(triples, num_users=n_users, num_items=item_pool, scale=scale, name="toy")
        if (ds.ratings >= scale[1] - 1).any():
            use_rel = with_reliability if with_reliability is not None else bool(rng.integers(2))
            return ds, TableModel(scores, rel if use_rel else None)

"""K-best group trajectory selection over a trellis of per-player candidates.

The selection cost is the negative integrated compatibility of the chosen
trajectories against the attention the model predicts from their joint
formation. Because the predicted attention depends on every chosen
trajectory, the cost is not a sum of edge weights. Yen's algorithm runs on a
prefix surrogate instead: extending a prefix by one slice costs
``1 + prefix_cost(new prefix)``, which is nonnegative since every prefix
cost lies in [-1, 1]. Paths found this way are re-scored exactly and
re-sorted.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np

from . import nn
from .attention import AttentionModel, rollout_batch
from .compatibility import cosine_terms
from .errors import EmptySlice, LengthMismatch, TooLarge
from .formation import MODEL_CHANNELS, trajectory_velocities

EXHAUSTIVE_LIMIT = 10**6


@dataclass(frozen=True, eq=False)
class Trellis:
    """Candidate trajectories per player, one slice per player.

    ``context`` trajectories are fixed players that shape the formation but
    are not selected or scored. ``s0`` is the attention at the query time.
    """

    slices: tuple
    player_ids: tuple
    s0: np.ndarray
    context: tuple = ()

    def __post_init__(self):
        slices = tuple(tuple(s) for s in self.slices)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "player_ids", tuple(int(p) for p in self.player_ids))
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "s0", np.asarray(self.s0, dtype=float).reshape(2))
        if not slices:
            raise EmptySlice("trellis has no slices")
        if len(self.player_ids) != len(slices):
            raise ValueError("one player id per slice")
        for pid, s in zip(self.player_ids, slices):
            if not s:
                raise EmptySlice(f"no candidates for player {pid}")
        every = [t for s in slices for t in s] + list(self.context)
        if len({t.dt for t in every}) != 1:
            raise LengthMismatch("candidates differ in time step")

    @classmethod
    def from_candidates(cls, candidates: Dict[int, Sequence], s0, context: Sequence = (), order: Optional[Sequence[int]] = None) -> "Trellis":
        """Slices in ascending player id unless ``order`` is given."""
        ids = sorted(candidates) if order is None else list(order)
        return cls(tuple(tuple(candidates[p]) for p in ids), tuple(ids), s0, tuple(context))

    @property
    def n(self) -> int:
        return len(self.slices)

    @property
    def sizes(self) -> tuple:
        return tuple(len(s) for s in self.slices)

    @property
    def dt(self) -> float:
        return self.slices[0][0].dt

    @property
    def total_paths(self) -> int:
        return math.prod(self.sizes)

    def max_horizon(self) -> int:
        every = [t for s in self.slices for t in s] + list(self.context)
        return min(len(t) for t in every) - 1


class GroupSelection(NamedTuple):
    indices: tuple
    cost: float
    attention: np.ndarray  # (horizon + 1, 2), starting at s0


class Scorer:
    """Memoized prefix costs for one trellis, model and horizon.

    Every evaluation is a batch-of-one rollout, so a given prefix always
    produces the same bits no matter which search asks for it.
    """

    def __init__(self, trellis: Trellis, model: AttentionModel, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        if trellis.max_horizon() < horizon:
            raise LengthMismatch(f"candidates cover {trellis.max_horizon()} steps, horizon is {horizon}")
        self.trellis = trellis
        self.model = model
        self.horizon = horizon
        self.encoder = model.encoder()
        self._cache: dict = {}
        self.evaluations = 0

    def _trajectories(self, prefix):
        return [self.trellis.slices[k][j] for k, j in enumerate(prefix)]

    def attention(self, prefix) -> np.ndarray:
        return self._evaluate(tuple(prefix))[1]

    def prefix_cost(self, prefix) -> float:
        return self._evaluate(tuple(prefix))[0]

    def _evaluate(self, prefix: tuple):
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        if not prefix or len(prefix) > self.trellis.n:
            raise ValueError("prefix must cover 1..n slices")
        T = self.horizon
        chosen = self._trajectories(prefix)
        P_sel = np.stack([t.positions[: T + 1] for t in chosen], axis=1)
        G_sel = np.stack([t.gazes[: T + 1] for t in chosen], axis=1)
        P = P_sel
        if self.trellis.context:
            P = np.concatenate([P_sel, np.stack([t.positions[: T + 1] for t in self.trellis.context], axis=1)], axis=1)
        V = trajectory_velocities(np.swapaxes(P, 0, 1), self.trellis.dt).swapaxes(0, 1)
        parts = [self.encoder.encode_sparse(P[t], V[t]) for t in range(T)]
        x = nn.SparseImages.concat(parts, self.encoder.shape, MODEL_CHANNELS)
        pred = rollout_batch(self.model, self.trellis.s0[None], x, T)[0]
        att = np.vstack([self.trellis.s0[None], pred])
        cost = -float(np.mean(cosine_terms(att, P_sel, G_sel)))
        self.evaluations += 1
        self._cache[prefix] = (cost, att)
        return cost, att

    def selection(self, indices) -> GroupSelection:
        cost, att = self._evaluate(tuple(indices))
        return GroupSelection(tuple(indices), cost, att)


def prefix_cost(trellis: Trellis, model: AttentionModel, prefix, horizon: int) -> float:
    """Negative mean compatibility of the first ``k`` selected players against
    the attention rolled out on their formation alone."""
    return Scorer(trellis, model, horizon).prefix_cost(prefix)


def _increment(scorer: Scorer, prefix: tuple) -> float:
    return 1.0 + scorer.prefix_cost(prefix)


def _cheapest_completion(scorer: Scorer, root: tuple, root_cost: float, banned: frozenset):
    """Uniform-cost search for the cheapest surrogate path extending ``root``.

    ``banned`` holds candidate indices the first extension may not use.
    Ties resolve to the lexicographically smallest index tuple.
    """
    sizes = scorer.trellis.sizes
    n = len(sizes)
    heap = [(root_cost, root)]
    while heap:
        cost, prefix = heapq.heappop(heap)
        if len(prefix) == n:
            return cost, prefix
        k = len(prefix)
        for j in range(sizes[k]):
            if prefix == root and j in banned:
                continue
            nxt = prefix + (j,)
            heapq.heappush(heap, (cost + _increment(scorer, nxt), nxt))
    return None


def surrogate_cost(scorer: Scorer, path) -> float:
    path = tuple(path)
    return sum(_increment(scorer, path[: k + 1]) for k in range(len(path)))


def _sorted(selections):
    return sorted(selections, key=lambda s: (s.cost, s.indices))


def yen_k_best(trellis: Trellis, model: AttentionModel, K: int, horizon: int, scorer: Optional[Scorer] = None) -> list:
    """K best group selections by Yen's algorithm on the prefix surrogate,
    re-ranked by exact cost."""
    if K < 1:
        raise ValueError("K must be at least 1")
    scorer = Scorer(trellis, model, horizon) if scorer is None else scorer
    first = _cheapest_completion(scorer, (), 0.0, frozenset())
    found = [first[1]]
    seen = {first[1]}
    candidates: list = []
    while len(found) < K:
        prev = found[-1]
        for i in range(trellis.n):
            root = prev[:i]
            banned = frozenset(p[i] for p in found if p[:i] == root)
            if len(banned) == trellis.sizes[i]:
                continue
            root_cost = surrogate_cost(scorer, root)
            spur = _cheapest_completion(scorer, root, root_cost, banned)
            if spur is not None and spur[1] not in seen:
                seen.add(spur[1])
                heapq.heappush(candidates, spur)
        if not candidates:
            break
        found.append(heapq.heappop(candidates)[1])
    return _sorted(scorer.selection(p) for p in found)


def exhaustive_select(trellis: Trellis, model: AttentionModel, horizon: int, K: Optional[int] = None, scorer: Optional[Scorer] = None) -> list:
    """Score every combination exactly and keep the ``K`` best (all when None)."""
    if trellis.total_paths > EXHAUSTIVE_LIMIT:
        raise TooLarge(f"{trellis.total_paths} combinations exceed {EXHAUSTIVE_LIMIT}")
    scorer = Scorer(trellis, model, horizon) if scorer is None else scorer
    out = _sorted(scorer.selection(p) for p in itertools.product(*(range(s) for s in trellis.sizes)))
    return out if K is None else out[:K]

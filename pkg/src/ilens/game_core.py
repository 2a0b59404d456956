"""Exact and sampled cooperative-game computations.

Subsets of players are handled internally as Python ``int`` bitmasks (bit
``j`` set means player ``j`` is present), which keeps membership tests and
unions cheap for any number of players. Public functions accept either a
bitmask or any iterable of player indices.

The value function of a :class:`CoalitionGame` receives a boolean membership
vector of length ``n`` and returns a utility vector; all arithmetic here is
float64.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from collections.abc import Callable, Iterable

import numpy as np

from .errors import BadInputError, CapExceededError

SHAPLEY_EXACT_CAP = 16
DECOMPOSITION_CAP = 14
DELTA_IDENTITY_CAP = 12
DEFAULT_CACHE_SIZE = 2**20


def as_mask(S, n: int) -> int:
    """Convert a subset (bitmask or iterable of indices) to a validated bitmask."""
    if isinstance(S, (int, np.integer)) and not isinstance(S, bool):
        mask = int(S)
        if mask < 0 or mask >> n:
            raise BadInputError(f"bitmask {mask:#x} has players outside 0..{n - 1}")
        return mask
    mask = 0
    for j in S:
        j = int(j)
        if not 0 <= j < n:
            raise BadInputError(f"player {j} outside 0..{n - 1}")
        mask |= 1 << j
    return mask


def members(mask: int) -> list[int]:
    out = []
    j = 0
    while mask:
        if mask & 1:
            out.append(j)
        mask >>= 1
        j += 1
    return out


def popcount(mask: int) -> int:
    return int(mask).bit_count()


def submasks(mask: int):
    """Yield every submask of ``mask`` (including 0 and ``mask`` itself)."""
    sub = mask
    while True:
        yield sub
        if sub == 0:
            return
        sub = (sub - 1) & mask


def mask_to_bool(mask: int, n: int) -> np.ndarray:
    nbytes = max(1, (n + 7) // 8)
    raw = np.frombuffer(mask.to_bytes(nbytes, "little"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n].astype(bool)


def bool_to_mask(vec) -> int:
    packed = np.packbits(np.asarray(vec, dtype=bool), bitorder="little")
    return int.from_bytes(packed.tobytes(), "little")


class CoalitionGame:
    """A cooperative game with ``n`` players and a vector-valued utility.

    Args:
      n: number of players.
      value: maps a boolean membership vector of length ``n`` to a utility
        vector (anything ``np.asarray`` accepts; scalars become length 1).
      batch_value: optional vectorised form mapping a (B, n) boolean matrix to
        a (B, d) array. Used when many coalitions are evaluated at once.
      cache_size: LRU budget for memoised subset values.

    Evaluations are memoised by bitmask. The cache is guarded by a lock, so
    the game is safe to share between threads whenever ``value`` is.
    """

    def __init__(
        self,
        n: int,
        value: Callable[[np.ndarray], object] | None = None,
        batch_value: Callable[[np.ndarray], np.ndarray] | None = None,
        cache_size: int = DEFAULT_CACHE_SIZE,
    ):
        if n < 1:
            raise BadInputError(f"a game needs at least one player, got n={n}")
        if value is None and batch_value is None:
            raise BadInputError("need value or batch_value")
        self.n = int(n)
        self._value = value
        self._batch_value = batch_value
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    @property
    def full(self) -> int:
        return (1 << self.n) - 1

    def _compute(self, masks: list[int]) -> list[np.ndarray]:
        if self._batch_value is not None:
            mat = np.stack([mask_to_bool(m, self.n) for m in masks])
            out = np.asarray(self._batch_value(mat), dtype=np.float64)
            return [np.atleast_1d(row).copy() for row in out.reshape(len(masks), -1)]
        return [
            np.atleast_1d(np.asarray(self._value(mask_to_bool(m, self.n)), dtype=np.float64))
            for m in masks
        ]

    def value_of(self, S) -> np.ndarray:
        """Utility of subset ``S`` (a copy; callers may mutate it)."""
        return self.values_of([as_mask(S, self.n)])[0].copy()

    __call__ = value_of

    def values_of(self, masks: Iterable[int]) -> list[np.ndarray]:
        """Utilities of many bitmasks, evaluating cache misses in one batch."""
        masks = list(masks)
        out: list[np.ndarray | None] = [None] * len(masks)
        missing: dict[int, list[int]] = {}
        with self._lock:
            for k, m in enumerate(masks):
                hit = self._cache.get(m)
                if hit is not None:
                    self._cache.move_to_end(m)
                    out[k] = hit
                else:
                    missing.setdefault(m, []).append(k)
        if missing:
            todo = list(missing)
            for m, val in zip(todo, self._compute(todo)):
                val.setflags(write=False)
                for k in missing[m]:
                    out[k] = val
            if self._cache_size > 0:
                with self._lock:
                    for m in todo:
                        self._cache[m] = out[missing[m][0]]
                    while len(self._cache) > self._cache_size:
                        self._cache.popitem(last=False)
        return out

    def table(self) -> np.ndarray:
        """All 2^n subset values as a (2^n, d) array indexed by bitmask."""
        if self.n > 24:
            raise CapExceededError(f"refusing to tabulate 2^{self.n} subsets")
        return np.stack(self.values_of(range(1 << self.n)))

    def singleton_utility(self, i: int) -> np.ndarray:
        """v({i}) = value({i}) - value(empty)."""
        a, b = self.values_of([1 << i, 0])
        return a - b

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


def table_game(table) -> CoalitionGame:
    """A game given by an explicit (2^n, d) or (2^n,) array of subset values."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim == 1:
        table = table[:, None]
    n = int(round(math.log2(table.shape[0])))
    if 1 << n != table.shape[0]:
        raise BadInputError(f"table length {table.shape[0]} is not a power of two")
    weights = 1 << np.arange(n, dtype=np.int64)

    def batch(mat):
        return table[mat.astype(np.int64) @ weights]

    return CoalitionGame(n, batch_value=batch)


def random_game(n: int, d: int = 1, rng=None, low=-1.0, high=1.0) -> CoalitionGame:
    """Game whose 2^n subset values are i.i.d. uniform in [low, high]."""
    rng = np.random.default_rng(rng)
    return table_game(rng.uniform(low, high, size=(1 << n, d)))


def additive_game(weights) -> CoalitionGame:
    """value(L) = sum of the weights of the players in L (no interactions)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    return CoalitionGame(w.shape[0], batch_value=lambda mat: mat.astype(np.float64) @ w)


def conjunction_game(n: int, terms) -> CoalitionGame:
    """value(L) = sum of weights of every conjunction fully contained in L.

    ``terms`` is a list of ``(weight, players)`` pairs; weight may be a scalar
    or a vector.
    """
    weights = []
    needs = []
    for weight, players in terms:
        needs.append(np.asarray(mask_to_bool(as_mask(players, n), n)))
        weights.append(np.atleast_1d(np.asarray(weight, dtype=np.float64)))
    if not terms:
        return CoalitionGame(n, batch_value=lambda mat: np.zeros((mat.shape[0], 1)))
    need = np.stack(needs)  # T, n
    W = np.stack(weights)  # T, d
    sizes = need.sum(axis=1)

    def batch(mat):
        hits = (mat.astype(np.int64) @ need.T.astype(np.int64)) == sizes
        return hits.astype(np.float64) @ W

    return CoalitionGame(n, batch_value=batch)


def parse_conjunction_spec(text: str, n: int | None = None) -> CoalitionGame:
    """Parse ``weight: p1,p2,...`` lines into a :func:`conjunction_game`.

    Blank lines and ``#`` comments are ignored. If ``n`` is omitted it is one
    more than the largest player mentioned.
    """
    terms = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise BadInputError(f"line {lineno}: expected 'weight: p1,p2,...'")
        w, rest = line.split(":", 1)
        try:
            weight = float(w)
            players = [int(p) for p in rest.replace(" ", "").split(",") if p]
        except ValueError as exc:
            raise BadInputError(f"line {lineno}: {exc}") from None
        if any(p < 0 for p in players):
            raise BadInputError(f"line {lineno}: negative player index")
        terms.append((weight, players))
    top = max((max(p) for _, p in terms if p), default=0) + 1
    if n is None:
        n = top
    elif n < top:
        raise BadInputError(f"spec mentions player {top - 1} but n={n}")
    return conjunction_game(n, terms)


def and_game(n: int, required=(0, 1)) -> CoalitionGame:
    """value(L) = 1 iff every player in ``required`` is in L."""
    return conjunction_game(n, [(1.0, list(required))])


# --------------------------------------------------------------------------


def marginal_utility(game: CoalitionGame, i: int, L) -> np.ndarray:
    """Delta f(i, L) = value(L + {i}) - value(L)."""
    if not 0 <= i < game.n:
        raise BadInputError(f"player {i} outside 0..{game.n - 1}")
    L = as_mask(L, game.n)
    if L >> i & 1:
        raise BadInputError(f"player {i} is already in the context")
    with_i, without = game.values_of([L | 1 << i, L])
    return with_i - without


def _shapley_weights(n: int) -> np.ndarray:
    # (n - |L| - 1)! |L]! / n!  for |L| = 0..n-1
    return np.array(
        [math.factorial(n - s - 1) * math.factorial(s) / math.factorial(n) for s in range(n)]
    )


def shapley_exact(game: CoalitionGame, i: int, cap: int = SHAPLEY_EXACT_CAP) -> np.ndarray:
    """Exact Shapley value of player ``i`` by enumerating every context."""
    n = game.n
    if n > cap:
        raise CapExceededError(f"n={n} exceeds the exact Shapley cap {cap}; use shapley_sample")
    if not 0 <= i < n:
        raise BadInputError(f"player {i} outside 0..{n - 1}")
    others = game.full & ~(1 << i)
    ctx = list(submasks(others))
    vals = game.values_of(ctx + [m | 1 << i for m in ctx])
    without = np.stack(vals[: len(ctx)])
    with_i = np.stack(vals[len(ctx):])
    w = _shapley_weights(n)[[popcount(m) for m in ctx]]
    return w @ (with_i - without)


def shapley_sample(
    game: CoalitionGame, i: int, permutations: int, rng_seed: int = 0
) -> np.ndarray:
    """Permutation-sampling estimate of the Shapley value of player ``i``."""
    if permutations < 1:
        raise BadInputError("permutations must be >= 1")
    if not 0 <= i < game.n:
        raise BadInputError(f"player {i} outside 0..{game.n - 1}")
    rng = np.random.default_rng(rng_seed)
    contexts = []
    for _ in range(permutations):
        order = rng.permutation(game.n)
        pos = int(np.flatnonzero(order == i)[0])
        contexts.append(as_mask(order[:pos].tolist(), game.n))
    vals = game.values_of(contexts + [c | 1 << i for c in contexts])
    k = len(contexts)
    return (np.stack(vals[k:]) - np.stack(vals[:k])).mean(axis=0)


class InteractionTable:
    """Interaction values I(S) keyed by bitmask, all with |S| >= 2."""

    def __init__(self, n: int):
        self.n = n
        self.entries: dict[int, np.ndarray] = {}

    def __setitem__(self, S, value):
        mask = as_mask(S, self.n)
        if popcount(mask) < 2:
            raise BadInputError("interaction keys need at least two players")
        self.entries[mask] = value

    def __getitem__(self, S):
        return self.entries[as_mask(S, self.n)]

    def __contains__(self, S):
        return as_mask(S, self.n) in self.entries

    def __len__(self):
        return len(self.entries)

    @property
    def complete(self) -> bool:
        return len(self.entries) == (1 << self.n) - self.n - 1

    def partition(self, threshold: float, ord=np.inf):
        """Split keys into (salient, inessential) by ``norm(I(S)) >= threshold``."""
        salient, inessential = [], []
        for mask, val in self.entries.items():
            (salient if np.linalg.norm(val, ord) >= threshold else inessential).append(mask)
        return salient, inessential


def _require_pattern(game, S) -> int:
    mask = as_mask(S, game.n)
    if popcount(mask) < 2:
        raise BadInputError("an interaction pattern needs |S| >= 2")
    return mask


def interaction_recursive(
    game: CoalitionGame, S, table: InteractionTable | None = None
) -> np.ndarray:
    """I(S) from its recursive definition, memoising sub-patterns in ``table``.

    I(S) = f(S) - f(empty) - sum_{L < S, |L| >= 2} I(L) - sum_{i in S} v({i})
    """
    mask = _require_pattern(game, S)
    if table is None:
        table = InteractionTable(game.n)
    memo = table.entries
    f_empty = game.values_of([0])[0]

    def solve(m):
        hit = memo.get(m)
        if hit is not None:
            return hit
        total = game.values_of([m])[0] - f_empty
        for j in members(m):
            total = total - (game.values_of([1 << j])[0] - f_empty)
        for sub in submasks(m):
            if sub != m and popcount(sub) >= 2:
                total = total - solve(sub)
        memo[m] = total
        return total

    # build bottom-up so the recursion depth stays small
    for sub in sorted(submasks(mask), key=popcount):
        if popcount(sub) >= 2:
            solve(sub)
    return memo[mask].copy()


def interaction_closed_form(game: CoalitionGame, S) -> np.ndarray:
    """I(S) = sum_{L subset of S} (-1)^{|S|-|L|} f(L)."""
    mask = _require_pattern(game, S)
    subs = list(submasks(mask))
    s = popcount(mask)
    signs = np.array([1.0 if (s - popcount(L)) % 2 == 0 else -1.0 for L in subs])
    return signs @ np.stack(game.values_of(subs))


def mobius_transform(values: np.ndarray) -> np.ndarray:
    """Moebius inversion over the subset lattice.

    ``values`` has shape (2^k, d) indexed by bitmask; the result holds
    sum_{L subset of S} (-1)^{|S|-|L|} values[L] for every S, in O(k 2^k).
    """
    out = np.array(values, dtype=np.float64, copy=True)
    size = out.shape[0]
    k = size.bit_length() - 1
    view_shape = out.shape[1:]
    for bit in range(k):
        step = 1 << bit
        blocks = out.reshape(size // (2 * step), 2, step, *view_shape)
        blocks[:, 1] -= blocks[:, 0]
    return out


def interaction_table(game: CoalitionGame, method: str = "mobius") -> InteractionTable:
    """Every I(S), |S| >= 2, for a small game.

    ``method`` is ``"mobius"`` (fast transform), ``"closed_form"`` or
    ``"recursive"``.
    """
    table = InteractionTable(game.n)
    if method == "recursive":
        if game.n >= 2:
            interaction_recursive(game, game.full, table)
        return table
    if method == "closed_form":
        for mask in range(1 << game.n):
            if popcount(mask) >= 2:
                table.entries[mask] = interaction_closed_form(game, mask)
        return table
    if method != "mobius":
        raise BadInputError(f"unknown method {method!r}")
    inter = mobius_transform(game.table())
    for mask in range(1 << game.n):
        if popcount(mask) >= 2:
            table.entries[mask] = inter[mask]
    return table


def efficiency_decomposition_check(game: CoalitionGame, cap: int = DECOMPOSITION_CAP) -> float:
    """Max-norm residual of f(N) - f(empty) - sum_i v({i}) - sum_{|S|>=2} I(S)."""
    n = game.n
    if n > cap:
        raise CapExceededError(f"n={n} exceeds the decomposition cap {cap}")
    F = game.table()
    inter = mobius_transform(F)
    sizes = np.array([popcount(m) for m in range(1 << n)])
    pattern_sum = inter[sizes >= 2].sum(axis=0)
    singles = sum(F[1 << i] - F[0] for i in range(n))
    residual = F[-1] - F[0] - singles - pattern_sum
    return float(np.max(np.abs(residual)))


def delta_identity_check(game: CoalitionGame, i: int, L, cap: int = DELTA_IDENTITY_CAP) -> float:
    """Max-norm residual of Delta f(i, L) - v({i}) - sum_{L' in L, L' != 0} I(L' + {i})."""
    L = as_mask(L, game.n)
    if not 0 <= i < game.n:
        raise BadInputError(f"player {i} outside 0..{game.n - 1}")
    if L >> i & 1:
        raise BadInputError(f"player {i} is already in the context")
    ctx = members(L)
    if len(ctx) > cap:
        raise CapExceededError(f"|L|={len(ctx)} exceeds the cap {cap}")
    # sub-game on players ctx + [i], local bit k <-> ctx[k], top bit <-> i
    local = ctx + [i]
    k = len(local)
    global_masks = []
    for m in range(1 << k):
        g = 0
        for b in range(k):
            if m >> b & 1:
                g |= 1 << local[b]
        global_masks.append(g)
    F = np.stack(game.values_of(global_masks))
    inter = mobius_transform(F)
    top = 1 << (k - 1)
    pattern_sum = inter[top + 1: 2 * top].sum(axis=0) if k > 1 else 0.0
    v_i = F[top] - F[0]
    delta = marginal_utility(game, i, L)
    return float(np.max(np.abs(delta - v_i - pattern_sum)))

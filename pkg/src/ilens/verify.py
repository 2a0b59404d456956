"""Randomised identity and axiom checks over seeded random games."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game_core import (
    CoalitionGame,
    as_mask,
    delta_identity_check,
    efficiency_decomposition_check,
    interaction_closed_form,
    interaction_table,
    popcount,
    random_game,
    shapley_exact,
    submasks,
    table_game,
)

TOLERANCE = 1e-9
FAULTS = ("closed-form",)


@dataclass
class CheckResult:
    name: str
    residual: float
    count: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max residual {self.residual:.3e} over {self.count} cases"


def broken_closed_form(game: CoalitionGame, S) -> np.ndarray:
    """Closed form that forgets the empty-set term; a negative control."""
    mask = as_mask(S, game.n)
    subs = [L for L in submasks(mask) if L]
    s = popcount(mask)
    signs = np.array([1.0 if (s - popcount(L)) % 2 == 0 else -1.0 for L in subs])
    return signs @ np.stack(game.values_of(subs))


def check_closed_vs_recursive(games, closed_form=interaction_closed_form) -> CheckResult:
    worst, count = 0.0, 0
    for game in games:
        table = interaction_table(game, method="recursive")
        for mask, value in table.entries.items():
            worst = max(worst, float(np.max(np.abs(closed_form(game, mask) - value))))
            count += 1
    return CheckResult("closed form vs recursive interaction", worst, count)


def check_decomposition(games) -> CheckResult:
    worst = max(efficiency_decomposition_check(g) for g in games)
    return CheckResult("utility decomposition into interactions", worst, len(games))


def check_delta_identity(games, pairs_per_game: int, rng, max_context: int = 10) -> CheckResult:
    worst, count = 0.0, 0
    for game in games:
        for _ in range(pairs_per_game):
            i = int(rng.integers(game.n))
            size = int(rng.integers(0, min(max_context, game.n - 1) + 1))
            others = [p for p in range(game.n) if p != i]
            ctx = rng.choice(others, size=size, replace=False).tolist()
            worst = max(worst, delta_identity_check(game, i, ctx))
            count += 1
    return CheckResult("marginal utility as a sum of interactions", worst, count)


def _shapley_all(game):
    return np.stack([shapley_exact(game, i) for i in range(game.n)])


def check_efficiency(games) -> CheckResult:
    worst = 0.0
    for g in games:
        total = g.value_of(g.full) - g.value_of(0)
        worst = max(worst, float(np.max(np.abs(_shapley_all(g).sum(axis=0) - total))))
    return CheckResult("Shapley efficiency", worst, len(games))


def with_null_player(game: CoalitionGame) -> CoalitionGame:
    """The game on n + 1 players where the last player never changes the value."""
    F = game.table()
    return table_game(np.concatenate([F, F]))


def check_nullity(games) -> CheckResult:
    worst = 0.0
    for g in games:
        ext = with_null_player(g)
        worst = max(worst, float(np.max(np.abs(shapley_exact(ext, g.n)))))
    return CheckResult("Shapley nullity", worst, len(games))


def symmetrized(game: CoalitionGame, a: int = 0, b: int = 1) -> CoalitionGame:
    """f(S) + f(swap_ab(S)), symmetric in players a and b."""
    F = game.table()
    swapped = np.empty_like(F)
    for m in range(len(F)):
        bit_a, bit_b = m >> a & 1, m >> b & 1
        t = m & ~(1 << a | 1 << b) | bit_a << b | bit_b << a
        swapped[m] = F[t]
    return table_game(F + swapped)


def check_symmetry(games) -> CheckResult:
    worst = 0.0
    for g in games:
        s = symmetrized(g)
        worst = max(worst, float(np.max(np.abs(shapley_exact(s, 0) - shapley_exact(s, 1)))))
    return CheckResult("Shapley symmetry", worst, len(games))


def check_linearity(games, rng) -> CheckResult:
    worst = 0.0
    for g, h in zip(games, games[1:] + games[:1]):
        if g.n != h.n:
            continue
        a, b = rng.uniform(-2.0, 2.0, size=2)
        mix = table_game(a * g.table() + b * h.table())
        diff = _shapley_all(mix) - a * _shapley_all(g) - b * _shapley_all(h)
        worst = max(worst, float(np.max(np.abs(diff))))
    return CheckResult("Shapley linearity", worst, len(games))


def run_suite(n: int = 8, games: int = 50, d: int = 3, seed: int = 0,
              pairs_per_game: int = 10, fault: str | None = None) -> list[CheckResult]:
    """All identity and axiom checks on ``games`` random games of ``n`` players."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    rng = np.random.default_rng(seed)
    pool = [random_game(n, d, rng) for _ in range(games)]
    closed = broken_closed_form if fault == "closed-form" else interaction_closed_form
    return [
        check_closed_vs_recursive(pool, closed),
        check_decomposition(pool),
        check_delta_identity(pool, pairs_per_game, rng),
        check_efficiency(pool),
        check_nullity(pool),
        check_symmetry(pool),
        check_linearity(pool, rng),
    ]


def report(results, header: str = "") -> str:
    lines = [header] if header else []
    lines += [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILED'}: {sum(r.passed for r in results)}/{len(results)} checks")
    return "\n".join(lines) + "\n"

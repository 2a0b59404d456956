"""Coalition sampling, salient/inessential labelling and the sparsity loss."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BadInputError, EmptyStratumError
from .game_core import CoalitionGame, as_mask, members

INESSENTIAL = "inessential"
SALIENT = "salient"
UNLABELED = "unlabeled"

SCALE_FRACTIONS = {
    "default": (0.1, 0.2, 0.3, 0.4, 0.5),
    "small": (0.1, 0.2),
    "large": (0.8, 0.9),
}


def r_set_for(n: int, scale: str = "default") -> tuple[int, ...]:
    """Context sizes ceil(fraction * n) for a named scale preset."""
    if scale not in SCALE_FRACTIONS:
        raise BadInputError(f"unknown scale {scale!r}")
    return tuple(sorted({max(1, math.ceil(f * n - 1e-9)) for f in SCALE_FRACTIONS[scale]}))


@dataclass
class SaliencyConfig:
    r_set: tuple[int, ...] | None = None
    samples_per_r: int = 200
    m1: float = 0.60
    m2: float = 0.15
    alpha: float = 10.0
    allow_large_r: bool = False

    def __post_init__(self):
        if not (0 <= self.m1 <= 1 and 0 <= self.m2 <= 1 and self.m1 + self.m2 <= 1):
            raise BadInputError("need 0 <= m1, m2 and m1 + m2 <= 1")
        if self.alpha <= 0:
            raise BadInputError("alpha must be positive")
        if self.samples_per_r < 1:
            raise BadInputError("samples_per_r must be >= 1")

    def resolved_r_set(self, n: int) -> tuple[int, ...]:
        rs = tuple(self.r_set) if self.r_set else r_set_for(n)
        for r in rs:
            if not 1 <= r < n:
                raise BadInputError(f"context size r={r} must satisfy 1 <= r < n={n}")
            if r > 0.5 * n and not self.allow_large_r:
                raise BadInputError(
                    f"r={r} exceeds 0.5n={0.5 * n}; set allow_large_r to study large contexts"
                )
        return rs


@dataclass
class CoalitionSample:
    """One (i, L) pair; ``L`` is a bitmask over cells and never contains i."""

    index: int
    i: int
    L: int
    r: int
    delta_norm2: float | None = None
    label: str = UNLABELED

    @property
    def context(self) -> list[int]:
        return members(self.L)


def sample_coalitions(n: int, config: SaliencyConfig, rng_seed: int = 0) -> list[CoalitionSample]:
    """For each r, draw i uniformly and L uniformly among size-r subsets of N - {i}."""
    if n < 2:
        raise BadInputError("need at least two cells")
    rng = np.random.default_rng(rng_seed)
    out = []
    for r in config.resolved_r_set(n):
        for _ in range(config.samples_per_r):
            i = int(rng.integers(n))
            picks = rng.choice(n - 1, size=r, replace=False)
            ctx = [int(p) + (p >= i) for p in picks]
            out.append(CoalitionSample(len(out), i, as_mask(ctx, n), r))
    return out


def delta_vectors(game: CoalitionGame, samples) -> np.ndarray:
    """Delta f(i, L) for every sample, stacked to (K, d)."""
    masks = [s.L | 1 << s.i for s in samples] + [s.L for s in samples]
    vals = game.values_of(masks)
    k = len(samples)
    return np.stack(vals[:k]) - np.stack(vals[k:])


def partition_counts(k: int, m1: float, m2: float) -> tuple[int, int]:
    """(inessential, salient) counts for a stratum of k samples."""
    n_ines = math.floor(m1 * k + 1e-9)
    n_sal = math.floor(m2 * k + 1e-9)
    if k >= 2:
        n_ines = max(n_ines, 1)
        n_sal = max(n_sal, 1)
        if n_ines + n_sal > k:
            n_ines = k - n_sal
    return n_ines, n_sal


def label_by_norms(samples, norms, config: SaliencyConfig) -> list[CoalitionSample]:
    """Label each r stratum from precomputed L2 norms (no game evaluation)."""
    labeled = [replace(s, delta_norm2=float(v), label=UNLABELED) for s, v in zip(samples, norms)]
    strata: dict[int, list[CoalitionSample]] = {}
    for s in labeled:
        strata.setdefault(s.r, []).append(s)
    for group in strata.values():
        group.sort(key=lambda s: (s.delta_norm2, s.index))
        n_ines, n_sal = partition_counts(len(group), config.m1, config.m2)
        for s in group[:n_ines]:
            s.label = INESSENTIAL
        for s in group[len(group) - n_sal:]:
            s.label = SALIENT
    return labeled


def rank_and_partition(game: CoalitionGame, samples, config: SaliencyConfig) -> list[CoalitionSample]:
    """Rank by ||Delta f||_2 within each r and label bottom m1 / top m2.

    Ties are broken by the sample's ``index``. Returns new sample objects in
    the input order.
    """
    samples = list(samples)
    if not samples:
        raise BadInputError("no samples to rank")
    norms = np.linalg.norm(delta_vectors(game, samples), axis=1)
    return label_by_norms(samples, norms, config)


def loss_weights(samples, alpha: float) -> np.ndarray:
    """Per-sample weights w such that loss = sum_k w_k * ||Delta f_k||_1.

    Raises EmptyStratumError if some r lacks salient or inessential members.
    """
    by_r: dict[int, dict[str, list[int]]] = {}
    for k, s in enumerate(samples):
        by_r.setdefault(s.r, {INESSENTIAL: [], SALIENT: []})
        if s.label in (INESSENTIAL, SALIENT):
            by_r[s.r][s.label].append(k)
    w = np.zeros(len(samples))
    for r, groups in by_r.items():
        if not groups[INESSENTIAL] or not groups[SALIENT]:
            raise EmptyStratumError(f"context size r={r} has no salient or no inessential samples")
        w[groups[INESSENTIAL]] = 1.0 / len(groups[INESSENTIAL])
        w[groups[SALIENT]] = -alpha / len(groups[SALIENT])
    return w / len(by_r)


def sparsity_loss(game: CoalitionGame, samples, alpha: float) -> float:
    """Mean over r of [mean inessential ||Delta f||_1 - alpha * mean salient ||Delta f||_1]."""
    samples = list(samples)
    w = loss_weights(samples, alpha)
    active = [k for k in range(len(samples)) if w[k] != 0]
    deltas = delta_vectors(game, [samples[k] for k in active])
    return float(w[active] @ np.abs(deltas).sum(axis=1))


def stratum_means(game: CoalitionGame, samples) -> dict[str, float]:
    """Mean ||Delta f||_1 over the inessential and the salient samples."""
    samples = list(samples)
    l1 = np.abs(delta_vectors(game, samples)).sum(axis=1)
    labels = np.array([s.label for s in samples])
    return {lab: float(l1[labels == lab].mean()) for lab in (INESSENTIAL, SALIENT) if (labels == lab).any()}


def write_samples_csv(path, samples):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "i", "L", "norm2", "label"])
        for s in samples:
            norm = "" if s.delta_norm2 is None else repr(float(s.delta_norm2))
            w.writerow([s.r, s.i, ";".join(map(str, s.context)), norm, s.label])


def read_samples_csv(path, n: int) -> list[CoalitionSample]:
    out = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.DictReader(fh)):
            ctx = [int(p) for p in row["L"].split(";") if p]
            norm = float(row["norm2"]) if row["norm2"] else None
            out.append(CoalitionSample(k, int(row["i"]), as_mask(ctx, n), int(row["r"]), norm, row["label"]))
    return out

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ilens import game_core as gc
from ilens import saliency as sal
from ilens.errors import BadInputError, EmptyStratumError


def labeled(i_list, L, r, labels, n):
    return [sal.CoalitionSample(k, i, gc.as_mask(L, n), r, None, lab)
            for k, (i, lab) in enumerate(zip(i_list, labels))]


def test_default_r_set_and_validation():
    assert sal.r_set_for(64) == (7, 13, 20, 26, 32)
    assert sal.r_set_for(10) == (1, 2, 3, 4, 5)
    assert sal.SaliencyConfig().resolved_r_set(64) == (7, 13, 20, 26, 32)
    with pytest.raises(BadInputError):
        sal.SaliencyConfig(r_set=(40,)).resolved_r_set(64)
    assert sal.SaliencyConfig(r_set=(40,), allow_large_r=True).resolved_r_set(64) == (40,)
    with pytest.raises(BadInputError):
        sal.SaliencyConfig(r_set=(64,), allow_large_r=True).resolved_r_set(64)
    with pytest.raises(BadInputError):
        sal.SaliencyConfig(m1=0.9, m2=0.2)
    with pytest.raises(BadInputError):
        sal.SaliencyConfig(alpha=0)


def test_sample_contract_and_determinism():
    cfg = sal.SaliencyConfig(r_set=(2,), samples_per_r=3)
    a = sal.sample_coalitions(4, cfg, rng_seed=5)
    assert len(a) == 3
    for s in a:
        assert len(s.context) == 2 == s.r
        assert s.i not in s.context
    assert a == sal.sample_coalitions(4, cfg, rng_seed=5)
    with pytest.raises(BadInputError):
        sal.sample_coalitions(1, cfg)


def test_target_cell_is_uniform():
    cfg = sal.SaliencyConfig(r_set=(50,), samples_per_r=10_000)
    samples = sal.sample_coalitions(100, cfg, rng_seed=0)
    counts = np.bincount([s.i for s in samples], minlength=100)
    chi2 = ((counts - 100.0) ** 2 / 100.0).sum()
    assert chi2 < stats.chi2.ppf(0.99, df=99)


def test_context_members_are_uniform():
    cfg = sal.SaliencyConfig(r_set=(3,), samples_per_r=6000)
    samples = sal.sample_coalitions(10, cfg, rng_seed=1)
    # for a fixed i the other 9 cells should each appear with probability 3/9
    hits = np.zeros(10)
    total = 0
    for s in samples:
        if s.i == 0:
            hits[s.context] += 1
            total += 1
    expected = total * 3 / 9
    chi2 = ((hits[1:] - expected) ** 2 / expected).sum()
    assert chi2 < stats.chi2.ppf(0.999, df=8)


@pytest.mark.parametrize("k,m1,m2,expected", [
    (10, 0.6, 0.15, (6, 1)),
    (200, 0.6, 0.15, (120, 30)),
    (2, 0.6, 0.15, (1, 1)),
    (3, 0.0, 0.0, (1, 1)),
    (1, 0.6, 0.15, (0, 0)),
])
def test_partition_counts(k, m1, m2, expected):
    assert sal.partition_counts(k, m1, m2) == expected


def test_ten_samples_split_six_one_three():
    game = gc.random_game(8, 3, rng=2)
    cfg = sal.SaliencyConfig(r_set=(3,), samples_per_r=10)
    out = sal.rank_and_partition(game, sal.sample_coalitions(8, cfg, 0), cfg)
    labels = [s.label for s in out]
    assert labels.count(sal.INESSENTIAL) == 6
    assert labels.count(sal.SALIENT) == 1
    assert labels.count(sal.UNLABELED) == 3
    norms = {lab: [s.delta_norm2 for s in out if s.label == lab] for lab in set(labels)}
    assert max(norms[sal.INESSENTIAL]) <= min(norms[sal.UNLABELED]) <= max(norms[sal.UNLABELED])
    assert max(norms[sal.UNLABELED]) <= min(norms[sal.SALIENT])


def test_ties_break_by_index_and_survive_permutation():
    game = gc.additive_game(np.ones(6))
    cfg = sal.SaliencyConfig(r_set=(2,), samples_per_r=10)
    samples = sal.sample_coalitions(6, cfg, 3)
    out = sal.rank_and_partition(game, samples, cfg)
    assert [s.label for s in out[:6]] == [sal.INESSENTIAL] * 6
    assert out[-1].label == sal.SALIENT
    shuffled = sal.rank_and_partition(game, samples[::-1], cfg)
    by_index = {s.index: s.label for s in shuffled}
    assert all(by_index[s.index] == s.label for s in out)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_labels_invariant_to_positive_scaling(c, seed):
    table = np.random.default_rng(seed).uniform(-1, 1, size=(64, 2))
    cfg = sal.SaliencyConfig(r_set=(1, 2, 3), samples_per_r=12)
    samples = sal.sample_coalitions(6, cfg, seed)
    a = sal.rank_and_partition(gc.table_game(table), samples, cfg)
    b = sal.rank_and_partition(gc.table_game(c * table), samples, cfg)
    assert [s.label for s in a] == [s.label for s in b]


def test_loss_hand_example():
    game = gc.additive_game([1.0, 3.0, 10.0, 0.0])
    samples = labeled([0, 1, 2], [3], 1, [sal.INESSENTIAL, sal.INESSENTIAL, sal.SALIENT], 4)
    assert sal.sparsity_loss(game, samples, alpha=2.0) == pytest.approx(-18.0)


def test_loss_averages_strata_and_is_affine_in_alpha():
    game = gc.additive_game([1.0, 3.0, 10.0, 0.0, 5.0])
    s1 = labeled([0, 2], [3], 1, [sal.INESSENTIAL, sal.SALIENT], 5)
    s2 = [sal.CoalitionSample(2 + k, i, gc.as_mask([3, 0 if i != 0 else 2], 5), 2, None, lab)
          for k, (i, lab) in enumerate([(1, sal.INESSENTIAL), (4, sal.SALIENT)])]
    samples = s1 + s2
    # strata: (1 - a * 10) and (3 - a * 5), averaged
    for a in (0.5, 1.0, 2.0):
        assert sal.sparsity_loss(game, samples, a) == pytest.approx(((1 - 10 * a) + (3 - 5 * a)) / 2)
    l1, l2 = sal.sparsity_loss(game, samples, 1.0), sal.sparsity_loss(game, samples, 2.0)
    assert l1 - l2 == pytest.approx((10 + 5) / 2)


def test_alpha_zero_limit_and_empty_stratum():
    game = gc.additive_game([0.0, 0.0, 4.0])
    samples = labeled([0, 1, 2], [], 0, [sal.INESSENTIAL, sal.INESSENTIAL, sal.SALIENT], 3)
    w = sal.loss_weights(samples, 1e-300)
    assert w[2] == pytest.approx(0.0, abs=1e-299)
    assert sal.sparsity_loss(game, samples, 1e-300) == pytest.approx(0.0, abs=1e-290)
    with pytest.raises(EmptyStratumError):
        sal.sparsity_loss(game, samples[:2], 1.0)


def test_ranking_uses_l2_while_loss_uses_l1():
    # Delta for player 0 is (1, 1, 1): L1 = 3, L2 = 1.73
    # Delta for player 1 is (2, 0, 0): L1 = 2, L2 = 2
    game = gc.additive_game(np.array([[1.0, 1.0, 1.0], [2.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    cfg = sal.SaliencyConfig(r_set=(1,), m1=0.5, m2=0.5)
    samples = [sal.CoalitionSample(0, 0, 0b100, 1), sal.CoalitionSample(1, 1, 0b100, 1)]
    out = sal.rank_and_partition(game, samples, cfg)
    assert [s.label for s in out] == [sal.INESSENTIAL, sal.SALIENT]
    assert out[0].delta_norm2 == pytest.approx(np.sqrt(3))
    # L1 loss: 3 - 1 * 2 = 1, whereas L2 would give sqrt(3) - 2 < 0
    assert sal.sparsity_loss(game, out, 1.0) == pytest.approx(1.0)
    assert sal.stratum_means(game, out) == {sal.INESSENTIAL: 3.0, sal.SALIENT: 2.0}


def test_loss_is_lipschitz_in_the_utilities():
    rng = np.random.default_rng(0)
    table = rng.uniform(-1, 1, size=(64, 3))
    cfg = sal.SaliencyConfig(r_set=(2, 3), samples_per_r=10, alpha=3.0)
    samples = sal.rank_and_partition(gc.table_game(table), sal.sample_coalitions(6, cfg, 0), cfg)
    base = sal.sparsity_loss(gc.table_game(table), samples, 3.0)
    for eps in (1e-2, 1e-4, 1e-6):
        bumped = table + eps * rng.uniform(-1, 1, size=table.shape)
        change = abs(sal.sparsity_loss(gc.table_game(bumped), samples, 3.0) - base)
        # each |Delta|_1 moves by at most 2 * d * eps; weights sum to 1 + alpha
        assert change <= 2 * 3 * eps * (1 + 3.0) + 1e-15


def test_csv_roundtrip(tmp_path):
    game = gc.random_game(6, 2, rng=1)
    cfg = sal.SaliencyConfig(r_set=(1, 3), samples_per_r=5)
    out = sal.rank_and_partition(game, sal.sample_coalitions(6, cfg, 4), cfg)
    path = tmp_path / "samples.csv"
    sal.write_samples_csv(path, out)
    assert path.read_text().splitlines()[0] == "r,i,L,norm2,label"
    back = sal.read_samples_csv(path, 6)
    assert [(s.r, s.i, s.L, s.delta_norm2, s.label) for s in back] == \
        [(s.r, s.i, s.L, s.delta_norm2, s.label) for s in out]

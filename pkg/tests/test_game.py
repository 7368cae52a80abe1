import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from twotimescale import game as gm

from conftest import make_game

finite = st.floats(-50, 50, allow_nan=False)


# validate_game

def test_matching_pennies_is_valid(pennies):
    assert gm.validate_game(pennies) == []


def test_substochastic_row_flagged():
    p = np.ones((1, 2, 2, 1))
    p[0, 0, 0, 0] = 0.9
    g = gm.StochasticGame(p, np.zeros((1, 2, 2)), 0.5)
    assert "transition not stochastic" in gm.validate_game(g)


def test_large_reward_flagged():
    r = np.zeros((1, 2, 2))
    r[0, 1, 1] = 1.5
    g = gm.StochasticGame(np.ones((1, 2, 2, 1)), r, 0.5)
    assert gm.validate_game(g) == ["reward out of [-1,1]"]


def test_bad_discount_flagged():
    g = gm.StochasticGame(np.ones((1, 2, 2, 1)), np.zeros((1, 2, 2)), 1.0)
    assert "discount out of [0,1)" in gm.validate_game(g)


def test_player_two_reward_is_negated_transpose(small_game):
    r2 = small_game.reward(2)
    for s, a, b in itertools.product(range(3), range(2), range(3)):
        assert r2[s, b, a] == -small_game.reward1[s, a, b]


# softmax

def test_softmax_examples():
    np.testing.assert_allclose(gm.softmax_tau([0.0, 0.0], 1.0), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(gm.softmax_tau([0.7 * np.log(2), 0.0], 0.7),
                               [2 / 3, 1 / 3], atol=1e-15)
    out = gm.softmax_tau([1000.0, 0.0], 1.0)
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] < 1e-300


def test_softmax_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        gm.softmax_tau([0.0, 1.0], 0.0)


@given(arrays(float, st.integers(1, 6), elements=finite),
       st.floats(0.15, 10), st.floats(-100, 100))
def test_softmax_properties(x, tau, c):
    p = gm.softmax_tau(x, tau)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(gm.softmax_tau(x + c, tau), p, rtol=1e-12, atol=1e-300)


# policies

def test_zero_params_give_uniform(small_game):
    f = gm.FeatureMap.tabular(small_game)
    pol = gm.policy_from_params((np.zeros(6), np.zeros(9)), f, 0.3)
    np.testing.assert_allclose(pol.pi1, 0.5)
    np.testing.assert_allclose(pol.pi2, 1 / 3)


def test_tabular_params_are_logits(small_game):
    f = gm.FeatureMap.tabular(small_game)
    rng = np.random.default_rng(0)
    q1, q2 = rng.normal(size=6), rng.normal(size=9)
    pol = gm.policy_from_params((q1, q2), f, 0.4)
    for s in range(3):
        np.testing.assert_allclose(pol.pi1[s], gm.softmax_tau(q1[2 * s:2 * s + 2], 0.4))
        np.testing.assert_allclose(pol.pi2[s], gm.softmax_tau(q2[3 * s:3 * s + 3], 0.4))


def test_param_scaling_changes_policy(small_game):
    f = gm.FeatureMap.tabular(small_game)
    th = (np.arange(6.0), np.arange(9.0))
    a = gm.policy_from_params(th, f, 1.0)
    b = gm.policy_from_params((2 * th[0], 2 * th[1]), f, 1.0)
    assert not np.allclose(a.pi1, b.pi1)


def test_policy_dimension_mismatch(small_game):
    f = gm.FeatureMap.tabular(small_game)
    with pytest.raises(ValueError):
        gm.policy_from_params((np.zeros(5), np.zeros(9)), f, 1.0)


@given(st.integers(0, 10_000), st.floats(0.05, 2.0), st.floats(0.1, 20.0))
def test_policy_floor_holds_for_bounded_params(seed, tau, radius):
    g = make_game(seed % 7, n_states=2, n_actions=(3, 2))
    rng = np.random.default_rng(seed)
    f = gm.FeatureMap.random(g, (4, 3), rng)
    th = gm.sample_params(f, radius, rng)
    pol = gm.policy_from_params(th, f, tau)
    for i, pi in ((1, pol.pi1), (2, pol.pi2)):
        floor = gm.policy_floor(tau, radius, g.n_actions[i - 1])
        assert pi.min() >= floor * (1 - 1e-9)


# features

def test_feature_row_norm_enforced():
    with pytest.raises(ValueError):
        gm.FeatureMap(2 * np.eye(2), np.eye(2), (2, 2))


def test_rank_deficient_features_rejected():
    phi = np.array([[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        gm.FeatureMap(phi, np.eye(2), (2, 2))


# sampling

def test_deterministic_row_sampling():
    p = np.zeros((2, 1, 1, 2))
    p[:, 0, 0, 1] = 1.0
    g = gm.StochasticGame(p, np.zeros((2, 1, 1)), 0.5)
    rng = np.random.default_rng(0)
    assert all(gm.sample_transition(g, 0, 0, 0, rng)[0] == 1 for _ in range(50))


def test_sampling_reproducible_and_payoffs(small_game):
    a = [gm.sample_transition(small_game, 1, 1, 2, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    _, r1, r2 = a[0]
    assert r1 == small_game.reward1[1, 1, 2] and r2 == -r1


def test_sampling_frequencies_within_three_sigma(small_game):
    rng = np.random.default_rng(11)
    n = 100_000
    counts = np.bincount([gm.sample_transition(small_game, 0, 1, 0, rng)[0]
                          for _ in range(n)], minlength=3)
    p = small_game.transition[0, 1, 0]
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma + 1e-12)


def test_sampling_rejects_bad_index(small_game):
    with pytest.raises(IndexError):
        gm.sample_transition(small_game, 3, 0, 0, np.random.default_rng())


# induced chain

def test_induced_chain_examples(pennies):
    np.testing.assert_array_equal(gm.induced_chain(pennies, gm.uniform_policy(pennies)), [[1.0]])
    g = gm.StochasticGame(np.full((2, 2, 2, 2), 0.5), np.zeros((2, 2, 2)), 0.5)
    np.testing.assert_allclose(gm.induced_chain(g, gm.uniform_policy(g)), 0.5)


def test_induced_chain_brute_force(small_game):
    rng = np.random.default_rng(2)
    pol = gm.JointPolicy(rng.dirichlet(np.ones(2), size=3), rng.dirichlet(np.ones(3), size=3))
    P = np.zeros((3, 3))
    for s, a, b, t in itertools.product(range(3), range(2), range(3), range(3)):
        P[s, t] += pol.pi1[s, a] * pol.pi2[s, b] * small_game.transition[s, a, b, t]
    np.testing.assert_allclose(gm.induced_chain(small_game, pol), P, atol=1e-15)


@given(st.integers(0, 10_000))
def test_induced_chain_rows_stochastic(seed):
    g = make_game(seed, n_states=4, n_actions=(3, 2), branching=2)
    rng = np.random.default_rng(seed)
    pol = gm.JointPolicy(rng.dirichlet(np.ones(3), size=4), rng.dirichlet(np.ones(2), size=4))
    assert np.abs(gm.induced_chain(g, pol).sum(axis=1) - 1).max() <= 1e-12


# stationary distribution and mixing

def test_stationary_examples():
    np.testing.assert_allclose(gm.stationary_distribution([[.5, .5], [.5, .5]]), [.5, .5])
    # mu P = mu for [[.9,.1],[.2,.8]]: 0.1 mu0 = 0.2 mu1.
    P = np.array([[.9, .1], [.2, .8]])
    oracle = np.linalg.solve(np.array([[-0.1, 0.2], [1.0, 1.0]]), [0.0, 1.0])
    np.testing.assert_allclose(gm.stationary_distribution(P), oracle, atol=1e-9)


@pytest.mark.parametrize("P", [np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
def test_stationary_rejects_reducible_or_periodic(P):
    with pytest.raises(gm.ChainError):
        gm.stationary_distribution(P)


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_stationary_residual(seed, n):
    P = np.random.default_rng(seed).dirichlet(np.ones(n), size=n)
    mu = gm.stationary_distribution(P)
    assert np.abs(mu @ P - mu).sum() <= 1e-10


def _mixing_oracle(P, delta):
    w, V = np.linalg.eig(np.asarray(P).T)
    mu = np.real(V[:, np.argmin(np.abs(w - 1))])
    mu /= mu.sum()
    Pk = np.eye(len(mu))
    for k in range(1, 10_000):
        Pk = Pk @ P
        if 0.5 * np.abs(Pk - mu).sum(axis=1).max() <= delta:
            return k


def test_mixing_examples():
    mu = np.array([0.3, 0.7])
    assert gm.mixing_time(np.tile(mu, (2, 1)), 0.01) == 1
    assert gm.mixing_time([[.5, .5], [.5, .5]], 0.1) == 1
    P = np.array([[.9, .1], [.2, .8]])
    assert gm.mixing_time(P, 0.01) == _mixing_oracle(P, 0.01)


@given(st.integers(0, 10_000), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
def test_mixing_monotone_in_delta(seed, d1, d2):
    P = np.random.default_rng(seed).dirichlet(np.ones(3) * 0.5, size=3)
    lo, hi = sorted((d1, d2))
    assert gm.mixing_time(P, hi) <= gm.mixing_time(P, lo)


# excitation

def test_tabular_excitation_is_min_weight(small_game):
    f = gm.FeatureMap.tabular(small_game)
    rng = np.random.default_rng(4)
    pol = gm.JointPolicy(rng.dirichlet(np.ones(2), size=3), rng.dirichlet(np.ones(3), size=3))
    mu = gm.stationary_distribution(gm.induced_chain(small_game, pol))
    lam = gm.feature_excitation(f, pol, mu)
    assert lam[0] == pytest.approx((mu[:, None] * pol.pi1).min(), rel=1e-12)
    assert lam[1] == pytest.approx((mu[:, None] * pol.pi2).min(), rel=1e-12)


def test_uniform_tabular_excitation_quarter():
    g = gm.StochasticGame(np.full((2, 2, 2, 2), 0.5), np.zeros((2, 2, 2)), 0.5)
    d = gm.chain_diagnostics(g, gm.FeatureMap.tabular(g), gm.uniform_policy(g), 0.1)
    np.testing.assert_allclose(d.excitation, [0.25, 0.25])


@given(st.integers(0, 10_000))
def test_excitation_nonnegative(seed):
    g = make_game(seed, n_states=3, n_actions=(2, 2))
    rng = np.random.default_rng(seed)
    f = gm.FeatureMap.random(g, (3, 2), rng)
    lam = gm.excitation_estimate(g, f, 0.5, 2.0, 3, rng)
    assert lam > 0


# generator and io

def test_random_game_deterministic_and_valid():
    a = make_game(7, n_states=2, n_actions=(2, 2), branching=2)
    b = make_game(7, n_states=2, n_actions=(2, 2), branching=2)
    assert gm.validate_game(a) == []
    np.testing.assert_array_equal(a.transition, b.transition)
    np.testing.assert_array_equal(a.reward1, b.reward1)
    assert np.all(a.transition > 0)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_random_game_branching(seed, branching):
    g = make_game(seed, n_states=5, n_actions=(2, 3), branching=branching)
    assert gm.validate_game(g) == []
    assert np.all((g.transition > 0).sum(axis=-1) == branching)


def test_random_game_rejects_infeasible_spec():
    with pytest.raises(ValueError):
        gm.random_game(gm.GameSpec(2, (2, 2), 3, 0.5), np.random.default_rng())


def test_save_load_roundtrip(tmp_path, small_game):
    path = tmp_path / "g.game"
    gm.save_game(small_game, path)
    back = gm.load_game(path)
    np.testing.assert_array_equal(back.transition, small_game.transition)
    np.testing.assert_array_equal(back.reward1, small_game.reward1)
    assert back.gamma == small_game.gamma

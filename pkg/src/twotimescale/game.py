"""Finite two-player zero-sum stochastic games, softmax policies and chains.

Array conventions
-----------------
``transition[s, a1, a2, s']`` and ``reward1[s, a1, a2]``.  Player 2's
reward is never stored; it is ``-reward1`` everywhere.  Per-player views
(:meth:`StochasticGame.reward` and :meth:`StochasticGame.kernel`) put the
player's own action on axis 1 and the opponent's on axis 2.

Feature rows are indexed by ``s * n_actions[i] + a``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_softmax

__all__ = [
    "ChainError",
    "StochasticGame",
    "FeatureMap",
    "JointPolicy",
    "ChainDiagnostics",
    "GameSpec",
    "validate_game",
    "softmax_tau",
    "policy_from_params",
    "uniform_policy",
    "sample_transition",
    "induced_chain",
    "stationary_distribution",
    "mixing_time",
    "feature_excitation",
    "excitation_estimate",
    "chain_diagnostics",
    "policy_floor",
    "random_game",
    "matching_pennies",
    "save_game",
    "load_game",
]

STOCHASTIC_TOL = 1e-12


class ChainError(RuntimeError):
    """Raised when a Markov chain is reducible, periodic or does not converge."""


@dataclass(frozen=True, eq=False)
class StochasticGame:
    """Zero-sum stochastic game ``(S, A1, A2, p, R1, gamma)``.

    Parameters
    ----------
    transition : ndarray, shape (S, A1, A2, S)
        Next-state probabilities.
    reward1 : ndarray, shape (S, A1, A2)
        Player 1 payoff in ``[-1, 1]``.
    gamma : float
        Discount factor in ``[0, 1)``.
    """

    transition: np.ndarray
    reward1: np.ndarray
    gamma: float

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward1, dtype=float)
        if p.ndim != 4 or r.ndim != 3 or p.shape[:3] != r.shape or p.shape[0] != p.shape[3]:
            raise ValueError(
                f"inconsistent shapes: transition {p.shape}, reward1 {r.shape}")
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward1", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1], self.transition.shape[2]

    @property
    def radius(self):
        """Truncation radius ``1 / (1 - gamma)``."""
        return 1.0 / (1.0 - self.gamma)

    def reward(self, player):
        """Reward of ``player`` (1 or 2) arranged as ``(s, own, opponent)``."""
        if player == 1:
            return self.reward1
        if player == 2:
            return -self.reward1.transpose(0, 2, 1)
        raise ValueError(f"player must be 1 or 2, got {player}")

    def kernel(self, player):
        """Transition tensor arranged as ``(s, own, opponent, s')``."""
        if player == 1:
            return self.transition
        if player == 2:
            return self.transition.transpose(0, 2, 1, 3)
        raise ValueError(f"player must be 1 or 2, got {player}")

    def cumulative_transition(self):
        """Row-wise CDF of the transition tensor for inverse-CDF sampling.

        Entries from the last state with positive mass onward are set to
        exactly 1 so rounding can never select a zero-probability state.
        """
        cum = np.cumsum(self.transition, axis=-1)
        S = self.n_states
        last = S - 1 - np.argmax(self.transition[..., ::-1] > 0, axis=-1)
        cols = np.arange(S)
        cum[cols >= last[..., None]] = 1.0
        return np.ascontiguousarray(cum)


class JointPolicy(NamedTuple):
    """Per-state action distributions ``pi1[s, a1]`` and ``pi2[s, a2]``."""

    pi1: np.ndarray
    pi2: np.ndarray

    def player(self, i):
        return self.pi1 if i == 1 else self.pi2

    def opponent(self, i):
        return self.pi2 if i == 1 else self.pi1


class FeatureMap:
    """Per-player feature matrices with unit-bounded rows and full column rank.

    Parameters
    ----------
    phi1, phi2 : ndarray
        Matrices of shape ``(S * A_i, d_i)``; row ``s * A_i + a`` is
        ``phi_i(s, a)``.
    n_actions : tuple of int
        ``(A1, A2)``, used to split rows by state.
    """

    def __init__(self, phi1, phi2, n_actions):
        self.n_actions = (int(n_actions[0]), int(n_actions[1]))
        mats = []
        for i, phi in enumerate((phi1, phi2), start=1):
            phi = np.ascontiguousarray(phi, dtype=float)
            if phi.ndim != 2 or phi.shape[0] % self.n_actions[i - 1]:
                raise ValueError(f"player {i}: bad feature shape {phi.shape}")
            norms = np.linalg.norm(phi, axis=1)
            if norms.max() > 1.0 + 1e-12:
                raise ValueError(
                    f"player {i}: feature row norm {norms.max():.6g} exceeds 1")
            rank = np.linalg.matrix_rank(phi)
            if rank < phi.shape[1]:
                raise ValueError(
                    f"player {i}: features have rank {rank} < {phi.shape[1]}")
            phi.setflags(write=False)
            mats.append(phi)
        self.phi = tuple(mats)
        if mats[0].shape[0] // self.n_actions[0] != mats[1].shape[0] // self.n_actions[1]:
            raise ValueError("players disagree on the number of states")

    @property
    def dims(self):
        return self.phi[0].shape[1], self.phi[1].shape[1]

    @property
    def n_states(self):
        return self.phi[0].shape[0] // self.n_actions[0]

    def matrix(self, player):
        return self.phi[player - 1]

    def block(self, player, s):
        """Rows ``Phi^i_s`` of shape ``(A_i, d_i)``."""
        A = self.n_actions[player - 1]
        return self.phi[player - 1][s * A:(s + 1) * A]

    def q_values(self, player, weights):
        """``Phi^i w`` reshaped to ``(S, A_i)``."""
        A = self.n_actions[player - 1]
        return (self.phi[player - 1] @ weights).reshape(-1, A)

    @classmethod
    def tabular(cls, game):
        S = game.n_states
        A1, A2 = game.n_actions
        return cls(np.eye(S * A1), np.eye(S * A2), game.n_actions)

    @classmethod
    def random(cls, game, dims, rng):
        """Gaussian features rescaled so the largest row has unit norm.

        Redraws until the matrix has full column rank.
        """
        S = game.n_states
        mats = []
        for A, d in zip(game.n_actions, dims):
            if d > S * A:
                raise ValueError(f"dimension {d} exceeds |S||A| = {S * A}")
            while True:
                phi = rng.standard_normal((S * A, d))
                phi /= np.linalg.norm(phi, axis=1).max()
                if np.linalg.matrix_rank(phi) == d:
                    break
            mats.append(phi)
        return cls(mats[0], mats[1], game.n_actions)


class ChainDiagnostics(NamedTuple):
    stationary: np.ndarray
    mixing_time: int
    excitation: tuple


@dataclass(frozen=True)
class GameSpec:
    """Sizes for :func:`random_game`."""

    n_states: int
    n_actions: tuple
    branching: int
    gamma: float


def validate_game(game):
    """List every violated model invariant; an empty list means valid."""
    problems = []
    p, r = game.transition, game.reward1
    if not np.all(np.isfinite(p)) or not np.all(np.isfinite(r)):
        problems.append("non-finite entries")
    if np.any(p < 0):
        problems.append("negative transition probability")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > STOCHASTIC_TOL):
        problems.append("transition not stochastic")
    if np.any(np.abs(r) > 1.0):
        problems.append("reward out of [-1,1]")
    if not 0.0 <= game.gamma < 1.0:
        problems.append("discount out of [0,1)")
    return problems


def softmax_tau(x, tau, axis=-1):
    """Softmax with temperature, ``exp(x / tau) / sum exp(x / tau)``.

    Shift invariant and overflow safe.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return np.exp(log_softmax(np.asarray(x, dtype=float) / tau, axis=axis))


def policy_from_params(theta, features, tau):
    """Softmax policy ``pi^i(s) = softmax_tau(Phi^i_s theta^i)`` for both players."""
    pis = []
    for i, th in enumerate(theta, start=1):
        th = np.asarray(th, dtype=float)
        if th.shape != (features.dims[i - 1],):
            raise ValueError(
                f"player {i}: theta shape {th.shape}, expected ({features.dims[i - 1]},)")
        pis.append(softmax_tau(features.q_values(i, th), tau))
    return JointPolicy(*pis)


def uniform_policy(game):
    S = game.n_states
    A1, A2 = game.n_actions
    return JointPolicy(np.full((S, A1), 1.0 / A1), np.full((S, A2), 1.0 / A2))


def sample_transition(game, state, a1, a2, rng):
    """Draw ``s' ~ p(.|s, a1, a2)``; return ``(s', r1, -r1)``."""
    S = game.n_states
    A1, A2 = game.n_actions
    if not (0 <= state < S and 0 <= a1 < A1 and 0 <= a2 < A2):
        raise IndexError(f"invalid (state, a1, a2) = ({state}, {a1}, {a2})")
    s_next = int(rng.choice(S, p=game.transition[state, a1, a2]))
    r1 = float(game.reward1[state, a1, a2])
    return s_next, r1, -r1


def induced_chain(game, policy):
    """State transition matrix under a joint policy."""
    return np.einsum("sa,sb,sabt->st", policy.pi1, policy.pi2, game.transition)


def _is_primitive(P):
    # Boolean powers up to the Wielandt bound (n-1)^2 + 1 by repeated squaring.
    n = P.shape[0]
    G = (P > 0).astype(np.int64)
    bound = (n - 1) ** 2 + 1
    R = G.copy()
    k = 1
    while k < bound:
        R = np.minimum(R @ R, 1)
        k *= 2
    return bool(R.all())


def stationary_distribution(P, tol=1e-10, max_iter=10**6):
    """Stationary distribution of an irreducible aperiodic chain.

    Power iteration from the uniform distribution until
    ``||mu P - mu||_1 <= tol``.

    Raises
    ------
    ChainError
        If the chain is not primitive or the cap is reached.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if not _is_primitive(P):
        raise ChainError("chain is reducible or periodic")
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = mu @ P
        nxt /= nxt.sum()
        if np.abs(nxt - mu).sum() <= tol:
            return nxt
        mu = nxt
    raise ChainError(f"power iteration did not converge in {max_iter} steps")


def mixing_time(P, delta, max_steps=10**6, stationary=None):
    """Smallest ``k >= 1`` with ``max_s TV(P^k(s, .), mu) <= delta``."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    P = np.asarray(P, dtype=float)
    mu = stationary_distribution(P) if stationary is None else stationary
    Pk = P.copy()
    for k in range(1, max_steps + 1):
        if 0.5 * np.abs(Pk - mu).sum(axis=1).max() <= delta:
            return k
        Pk = Pk @ P
    raise ChainError(f"no mixing within {max_steps} steps")


def feature_excitation(features, policy, stationary):
    """Smallest eigenvalue of ``Phi^T diag(mu(s) pi(a|s)) Phi`` per player."""
    out = []
    for i in (1, 2):
        phi = features.matrix(i)
        weights = (stationary[:, None] * policy.player(i)).ravel()
        G = phi.T @ (weights[:, None] * phi)
        out.append(max(float(np.linalg.eigvalsh(G)[0]), 0.0))
    return tuple(out)


def _sample_ball(d, radius, rng):
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / d)


def sample_params(features, radius, rng):
    """Parameters drawn uniformly from the ``radius`` ball, per player."""
    return tuple(_sample_ball(d, radius, rng) for d in features.dims)


def excitation_estimate(game, features, tau, radius, n_samples, rng):
    """Minimum excitation over the uniform policy and sampled softmax policies.

    This is a Monte Carlo surrogate for the infimum over the policy class;
    parameters are drawn uniformly from the ball of the given radius.
    """
    lam = np.inf
    policies = [uniform_policy(game)]
    for _ in range(n_samples):
        policies.append(policy_from_params(sample_params(features, radius, rng), features, tau))
    for pol in policies:
        mu = stationary_distribution(induced_chain(game, pol))
        lam = min(lam, min(feature_excitation(features, pol, mu)))
    return lam


def chain_diagnostics(game, features, policy, delta):
    """Stationary law, mixing time and excitation for one joint policy."""
    P = induced_chain(game, policy)
    mu = stationary_distribution(P)
    return ChainDiagnostics(mu, mixing_time(P, delta, stationary=mu),
                            feature_excitation(features, policy, mu))


def policy_floor(tau, radius, n_actions):
    """Lower bound on any action probability when ``|logit| <= radius``."""
    # underflows to 0 for large radius / tau
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + (n_actions - 1) * np.exp(2.0 * radius / tau))


def random_game(spec, rng):
    """Garnet-style random game.

    Each ``(s, a1, a2)`` moves to ``spec.branching`` distinct states with
    Dirichlet(1) weights; rewards are uniform on ``[-1, 1]``.
    """
    S = int(spec.n_states)
    A1, A2 = (int(a) for a in spec.n_actions)
    if S < 1 or A1 < 1 or A2 < 1:
        raise ValueError("sizes must be positive")
    if not 1 <= spec.branching <= S:
        raise ValueError(f"branching must lie in [1, {S}], got {spec.branching}")
    if not 0.0 <= spec.gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {spec.gamma}")
    p = np.zeros((S, A1, A2, S))
    for s in range(S):
        for a in range(A1):
            for b in range(A2):
                nxt = rng.choice(S, size=spec.branching, replace=False)
                p[s, a, b, nxt] = rng.dirichlet(np.ones(spec.branching))
    r = rng.uniform(-1.0, 1.0, size=(S, A1, A2))
    return StochasticGame(p, r, spec.gamma)


def matching_pennies(gamma=0.0):
    """Single-state matching pennies; player 1 wins on a match."""
    r = np.array([[[1.0, -1.0], [-1.0, 1.0]]])
    return StochasticGame(np.ones((1, 2, 2, 1)), r, gamma)


def _fmt(values):
    return " ".join("%.17g" % v for v in np.ravel(values))


def save_game(game, path):
    """Write the text game format.

    A ``key = value`` header is followed by ``transition`` and ``reward1``
    blocks in row-major order, one line per ``(s, a1, a2)``.
    """
    S = game.n_states
    A1, A2 = game.n_actions
    lines = ["# zero-sum stochastic game",
             f"n_states = {S}",
             f"n_actions = {A1} {A2}",
             "gamma = %.17g" % game.gamma,
             "transition"]
    lines += [_fmt(row) for row in game.transition.reshape(-1, S)]
    lines.append("reward1")
    lines += [_fmt(row) for row in game.reward1.reshape(-1, A2)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_game(path):
    """Read a file written by :func:`save_game`."""
    header = {}
    blocks = {"transition": [], "reward1": []}
    current = None
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line in blocks:
                current = line
            elif current is None:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            else:
                blocks[current].extend(float(t) for t in line.split())
    try:
        S = int(header["n_states"])
        A1, A2 = (int(t) for t in header["n_actions"].split())
        gamma = float(header["gamma"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: bad header: {exc}") from None
    p = np.array(blocks["transition"])
    r = np.array(blocks["reward1"])
    if p.size != S * A1 * A2 * S or r.size != S * A1 * A2:
        raise ValueError(f"{path}: array sizes do not match the header")
    return StochasticGame(p.reshape(S, A1, A2, S), r.reshape(S, A1, A2), gamma)

"""Two-timescale independent Q-learning with linear function approximation.

Each player keeps fast weights ``w`` (the Q estimate), slow weights
``theta`` (the policy logits), and frozen copies ``w_bar`` and
``theta_bar`` used for bootstrapping.  Per step, at the visited state:

1. ``theta <- theta + beta (w - theta)``;
2. act from ``softmax_tau(Phi_s theta)``;
3. ``delta = r + gamma softmax_tau(Phi_s' theta_bar)^T clip(Phi_s' w_bar)
   - phi(s, a)^T w``;
4. ``w <- Proj_M(w + alpha phi(s, a) delta)``.

After ``K`` steps the frozen copies are overwritten with the current
weights; the trajectory is never reset.

A player object only ever sees its own features, weights, actions and
realized rewards, plus the public state.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .game import JointPolicy, softmax_tau
from .oracles import lyapunov_trackers, minimax_value_iteration, nash_gap

__all__ = [
    "ConfigWarning",
    "RunConfig",
    "PlayerLearner",
    "LearnerState",
    "RunResult",
    "DIAGNOSTIC_COLUMNS",
    "truncate",
    "project_ball",
    "default_radius",
    "policy_step_bound",
    "td_delta",
    "fast_step",
    "slow_step",
    "outer_sync",
    "inner_loop",
    "run",
]

DIAGNOSTIC_COLUMNS = ("t", "k", "L_v", "L_sum", "L_theta", "L_w", "nash_gap",
                      "td_norm_1", "td_norm_2")


class ConfigWarning(UserWarning):
    """A run configuration outside the range covered by the convergence theory."""


def truncate(x, r):
    """Clamp every entry to ``[-r, r]``."""
    if not r > 0:
        raise ValueError(f"truncation radius must be positive, got {r}")
    return np.clip(x, -r, r)


def project_ball(w, M):
    """Euclidean projection onto the ball of radius ``M``."""
    if M < 0:
        raise ValueError(f"radius must be nonnegative, got {M}")
    w = np.asarray(w, dtype=float)
    nrm = np.linalg.norm(w)
    if nrm <= M:
        return w.copy()
    return w * (M / nrm)


def default_radius(lambda_hat, gamma):
    """Smallest radius ``1 / (sqrt(lambda) (1 - gamma))`` allowed by the theory."""
    return 1.0 / (math.sqrt(lambda_hat) * (1.0 - gamma))


def policy_step_bound(A_max, beta, tau, lambda_hat, gamma):
    """Per-step bound ``2 A beta / (tau sqrt(lambda) (1 - gamma))`` on ``|pi' - pi|_1``.

    Valid when ``M = default_radius(lambda_hat, gamma)``.
    """
    return 2.0 * A_max * beta / (tau * math.sqrt(lambda_hat) * (1.0 - gamma))


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters of one learning run.

    Parameters
    ----------
    T, K : int
        Outer and inner iteration counts.
    tau : float
        Softmax temperature.
    alpha, beta : float
        Constant fast and slow stepsizes.
    M : float
        Projection radius for ``w``.
    seed : int
    s0 : int
        Initial state.
    instrumented : bool
        Compute model-based Lyapunov trackers (needs the true game).
    gap_every : int
        Nash gap every this many outer iterations; 0 disables it.
    diag_every : int
        Extra diagnostic rows every this many inner steps; 0 means only at
        ``k = 0`` and ``k = K``.
    lambda_hat : float, optional
        Excitation estimate used only for warnings.
    """

    T: int
    K: int
    tau: float
    alpha: float
    beta: float
    M: float
    seed: int = 0
    s0: int = 0
    instrumented: bool = False
    gap_every: int = 0
    diag_every: int = 0
    lambda_hat: float = None

    def __post_init__(self):
        if self.T < 0 or self.K < 0:
            raise ValueError("T and K must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or not 0 <= self.beta <= 1:
            raise ValueError("need alpha >= 0 and beta in [0, 1]")
        if not self.M > 0:
            raise ValueError("M must be positive")
        if self.gap_every < 0 or self.diag_every < 0:
            raise ValueError("cadences must be nonnegative")

    @property
    def stepsize_ratio(self):
        return self.beta / self.alpha if self.alpha > 0 else math.inf

    def check(self, gamma):
        """Warn about settings outside the theory; return the messages."""
        msgs = []
        if self.tau > 1.0 / (1.0 - gamma):
            msgs.append(f"tau={self.tau} exceeds 1/(1-gamma)={1.0 / (1.0 - gamma):.4g}")
        lam = self.lambda_hat
        if lam is not None and lam > 0:
            floor = default_radius(lam, gamma)
            if self.M < floor:
                msgs.append(f"M={self.M} is below 1/(sqrt(lambda)(1-gamma))={floor:.4g}")
            if self.stepsize_ratio > lam:
                msgs.append(f"beta/alpha={self.stepsize_ratio:.4g} exceeds lambda={lam:.4g}")
        for m in msgs:
            warnings.warn(m, ConfigWarning, stacklevel=2)
        return msgs


class PlayerLearner:
    """One independent learner.

    Parameters
    ----------
    phi : ndarray, shape (S * A, d)
        The player's own feature matrix.
    n_actions : int
    tau, gamma, M : float
    """

    def __init__(self, phi, n_actions, tau, gamma, M):
        self.phi = np.ascontiguousarray(phi, dtype=float)
        self.n_actions = int(n_actions)
        self.tau = float(tau)
        self.gamma = float(gamma)
        self.radius = 1.0 / (1.0 - self.gamma)
        self.M = float(M)
        d = self.phi.shape[1]
        self.w = np.zeros(d)
        self.theta = np.zeros(d)
        self.w_bar = np.zeros(d)
        self.theta_bar = np.zeros(d)

    def rows(self, s):
        return self.phi[s * self.n_actions:(s + 1) * self.n_actions]

    def policy(self, s):
        return softmax_tau(self.rows(s) @ self.theta, self.tau)

    def act(self, s, u):
        """Inverse-CDF draw from the current policy at ``s``."""
        cdf = np.cumsum(self.policy(s))
        return int(min(np.searchsorted(cdf, u, side="right"), self.n_actions - 1))

    def td_delta(self, s, a, reward, s_next):
        nxt = self.rows(s_next)
        pol = softmax_tau(nxt @ self.theta_bar, self.tau)
        boot = pol @ truncate(nxt @ self.w_bar, self.radius)
        return reward + self.gamma * boot - self.phi[s * self.n_actions + a] @ self.w

    def fast_step(self, s, a, delta, alpha):
        self.w = project_ball(self.w + alpha * delta * self.phi[s * self.n_actions + a], self.M)

    def slow_step(self, beta):
        self.theta = self.theta + beta * (self.w - self.theta)

    def outer_sync(self):
        self.w_bar = self.w.copy()
        self.theta_bar = self.theta.copy()

    def value_view(self):
        """``v(s) = softmax(Phi_s theta_bar)^T clip(Phi_s w_bar)`` at every state."""
        q_bar = truncate((self.phi @ self.w_bar).reshape(-1, self.n_actions), self.radius)
        pol = softmax_tau((self.phi @ self.theta_bar).reshape(-1, self.n_actions), self.tau)
        return np.einsum("sa,sa->s", pol, q_bar)


class LearnerState:
    """Both players plus the current state of the shared trajectory."""

    def __init__(self, game, features, tau, M, s0=0):
        if not 0 <= s0 < game.n_states:
            raise ValueError(f"initial state {s0} out of range")
        self.players = tuple(
            PlayerLearner(features.matrix(i), game.n_actions[i - 1], tau, game.gamma, M)
            for i in (1, 2))
        self.state = int(s0)

    def policy(self):
        """Full softmax policy of the current slow weights (diagnostic only)."""
        pis = [softmax_tau((p.phi @ p.theta).reshape(-1, p.n_actions), p.tau)
               for p in self.players]
        return JointPolicy(*pis)

    def value_view(self):
        return tuple(p.value_view() for p in self.players)

    def snapshot(self):
        return {name: tuple(getattr(p, name).copy() for p in self.players)
                for name in ("w", "theta", "w_bar", "theta_bar")}


def td_delta(player, s, a, reward, s_next):
    """TD error of one player from its own transition and reward."""
    return player.td_delta(s, a, reward, s_next)


def fast_step(player, s, a, delta, alpha):
    player.fast_step(s, a, delta, alpha)
    return player.w


def slow_step(player, beta):
    player.slow_step(beta)
    return player.theta


def outer_sync(state):
    for p in state.players:
        p.outer_sync()
    return state


class _Environment:
    """Holds the model; hands each player only its own payoff."""

    def __init__(self, game):
        self.cum_p = game.cumulative_transition()
        self.reward1 = np.ascontiguousarray(game.reward1)

    def step(self, s, a1, a2, u):
        row = self.cum_p[s, a1, a2]
        s_next = int(min(np.searchsorted(row, u, side="right"), len(row) - 1))
        r1 = float(self.reward1[s, a1, a2])
        return s_next, r1, -r1


def _inner_python(state, env, U, alpha, beta, deltas):
    p1, p2 = state.players
    s = state.state
    for k in range(U.shape[0]):
        p1.slow_step(beta)
        p2.slow_step(beta)
        a1 = p1.act(s, U[k, 0])
        a2 = p2.act(s, U[k, 1])
        s_next, r1, r2 = env.step(s, a1, a2, U[k, 2])
        d1 = p1.td_delta(s, a1, r1, s_next)
        d2 = p2.td_delta(s, a2, r2, s_next)
        p1.fast_step(s, a1, d1, alpha)
        p2.fast_step(s, a2, d2, alpha)
        deltas[k] = d1, d2
        s = s_next
    state.state = s


def _inner_compiled(state, env, U, alpha, beta, deltas):
    p1, p2 = state.players
    state.state = int(_kernels.inner_loop_kernel(
        env.cum_p, env.reward1, p1.phi, p2.phi, p1.n_actions, p2.n_actions,
        p1.w, p1.theta, p1.w_bar, p1.theta_bar,
        p2.w, p2.theta, p2.w_bar, p2.theta_bar,
        state.state, U, float(alpha), float(beta), p1.tau, p1.gamma,
        p1.radius, p1.M, deltas))


ENGINES = {"compiled": _inner_compiled, "python": _inner_python}


def inner_loop(state, game, steps, alpha, beta, rng, engine="compiled", env=None):
    """Advance the trajectory by ``steps`` iterations in place.

    Three uniforms are drawn per step, ``rng.random((steps, 3))``, used in
    the order player 1 action, player 2 action, next state.

    Returns
    -------
    ndarray, shape (steps, 2)
        TD errors of both players.
    """
    env = _Environment(game) if env is None else env
    U = rng.random((steps, 3))
    deltas = np.zeros((steps, 2))
    if steps:
        ENGINES[engine](state, env, U, alpha, beta, deltas)
    return deltas


class RunResult:
    """Final policy, diagnostic rows and the learner state of a run."""

    def __init__(self, policy, records, state, v_star=None):
        self.policy = policy
        self.records = records
        self.state = state
        self.v_star = v_star

    def column(self, name):
        return np.array([r[name] for r in self.records])

    def rows_at(self, k):
        return [r for r in self.records if r["k"] == k]


def _row(t, k, trackers=None, gap=math.nan, td=(math.nan, math.nan)):
    L = (math.nan,) * 4 if trackers is None else tuple(trackers)
    return dict(zip(DIAGNOSTIC_COLUMNS, (t, k, *L, gap, *td)))


def _rms(x):
    return float(np.sqrt(np.mean(x ** 2))) if len(x) else math.nan


def run(game, features, cfg, rng=None, engine="compiled", v_star=None, rho0=None):
    """Run ``T`` outer loops of ``K`` inner steps.

    Parameters
    ----------
    game : StochasticGame
        Drives the environment; also used for oracle diagnostics.
    features : FeatureMap
    cfg : RunConfig
    rng : numpy.random.Generator, optional
        Defaults to ``default_rng(cfg.seed)``.
    engine : {"compiled", "python"}
    v_star : pair of ndarray, optional
        Minimax values; computed when instrumented and not given.

    Returns
    -------
    RunResult
        ``policy`` is the softmax of the final slow weights.  Records hold
        one row per diagnostic point with columns ``DIAGNOSTIC_COLUMNS``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    state = LearnerState(game, features, cfg.tau, cfg.M, cfg.s0)
    env = _Environment(game)
    if cfg.instrumented and v_star is None:
        v_star = tuple(minimax_value_iteration(game, i, tol=1e-10).v for i in (1, 2))
    mu = cfg.tau / 64.0

    def trackers():
        if not cfg.instrumented:
            return None
        snap = state.snapshot()
        return lyapunov_trackers(game, features, snap["theta"], snap["w"],
                                 state.value_view(), v_star, cfg.tau, mu)

    def gap_now(t_done):
        if cfg.gap_every and t_done % cfg.gap_every == 0:
            return nash_gap(game, state.policy(), rho0)
        return math.nan

    chunk = cfg.diag_every if cfg.diag_every else max(cfg.K, 1)
    records = [_row(0, 0, trackers(), gap_now(0))]
    for t in range(cfg.T):
        k = 0
        pending = []
        while k < cfg.K:
            n = min(chunk, cfg.K - k)
            pending.append(inner_loop(state, game, n, cfg.alpha, cfg.beta, rng, engine, env))
            k += n
            at_end = k == cfg.K
            if at_end or cfg.instrumented:
                deltas = np.concatenate(pending)
                pending = []
                records.append(_row(t, k, trackers(),
                                    gap_now(t + 1) if at_end else math.nan,
                                    (_rms(deltas[:, 0]), _rms(deltas[:, 1]))))
        outer_sync(state)
        if cfg.instrumented:
            records.append(_row(t + 1, 0, trackers()))
        elif cfg.K == 0:
            records.append(_row(t + 1, 0, None, gap_now(t + 1)))
    return RunResult(state.policy(), records, state, v_star)

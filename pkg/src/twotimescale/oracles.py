"""Model-based ground truth for auditing the learner.

Everything here reads the full game model: minimax value iteration, best
responses, exact policy evaluation, the Nash gap, projected backup targets
and Bellman-completeness residuals.
"""

from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog
from scipy.sparse.linalg import gmres, LinearOperator

from .dynamics import EnvelopeConfig, MatrixGamePair, lyapunov_V, matrix_game_values
from .game import JointPolicy, induced_chain, softmax_tau, stationary_distribution

__all__ = [
    "OracleError",
    "VIResult",
    "Trackers",
    "backup_tensor",
    "minimax_bellman",
    "minimax_value_iteration",
    "policy_evaluation",
    "best_response_value",
    "worst_case_value",
    "nash_gap",
    "marginal_backup",
    "own_policy_backup",
    "target_weights",
    "completeness_residual",
    "lyapunov_trackers",
    "outer_loop_bound",
]

DIRECT_SOLVE_LIMIT = 2000


class OracleError(RuntimeError):
    """Raised when an iterative oracle exceeds its iteration cap."""


class VIResult(NamedTuple):
    v: np.ndarray
    iterations: int
    history: list


class Trackers(NamedTuple):
    L_v: float
    L_sum: float
    L_theta: float
    L_w: float


def _stop_threshold(tol, gamma):
    # |v_{t+1} - v_t| <= tol (1 - gamma) / gamma  implies  |v_{t+1} - v*| <= tol.
    return np.inf if gamma == 0.0 else tol * (1.0 - gamma) / gamma


def backup_tensor(game, v, player):
    """``T^i(v)(s, a_i, a_-i) = R_i + gamma sum_s' p(s'|s, a) v(s')``."""
    v = np.asarray(v, dtype=float)
    return game.reward(player) + game.gamma * (game.kernel(player) @ v)


def minimax_bellman(game, v, player, return_strategies=False):
    """Per-state matrix-game value of :func:`backup_tensor`."""
    values, P, Q, _ = matrix_game_values(backup_tensor(game, v, player))
    if return_strategies:
        return values, P, Q
    return values


def minimax_value_iteration(game, player=1, tol=1e-8, max_iter=100_000,
                            keep_history=False):
    """Iterate ``v <- B^i(v)`` from zero until ``|v - v*|_inf <= tol`` is certified.

    Returns
    -------
    VIResult
        ``history`` holds every iterate (starting with zero) when requested.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    eps = _stop_threshold(tol, game.gamma)
    v = np.zeros(game.n_states)
    history = [v] if keep_history else []
    for it in range(1, max_iter + 1):
        nxt = minimax_bellman(game, v, player)
        if keep_history:
            history.append(nxt)
        done = np.abs(nxt - v).max() <= eps
        v = nxt
        if done:
            return VIResult(v, it, history)
    raise OracleError(f"minimax value iteration did not converge in {max_iter} steps")


def _evaluate(P, r, gamma):
    n = len(r)
    if n <= DIRECT_SOLVE_LIMIT:
        return np.linalg.solve(np.eye(n) - gamma * P, r)
    op = LinearOperator((n, n), matvec=lambda x: x - gamma * (P @ x))
    v, info = gmres(op, r, rtol=1e-12, maxiter=10_000)
    if info != 0:
        raise OracleError("iterative policy evaluation did not converge")
    return v


def policy_evaluation(game, policy, player):
    """Exact ``v_pi^i`` from the linear system ``(I - gamma P_pi) v = r_pi``."""
    r = np.einsum("sa,sb,sab->s", policy.player(player), policy.opponent(player),
                  game.reward(player))
    return _evaluate(induced_chain(game, policy), r, game.gamma)


def best_response_value(game, opponent_policy, player, tol=1e-8, max_iter=100_000):
    """Optimal value of the MDP faced by ``player`` against a fixed opponent.

    Solved by value iteration from zero to sup-norm accuracy ``tol``.
    """
    pi = np.asarray(opponent_policy, dtype=float)
    r = np.einsum("sab,sb->sa", game.reward(player), pi)
    P = np.einsum("sabt,sb->sat", game.kernel(player), pi)
    eps = _stop_threshold(tol, game.gamma)
    v = np.zeros(game.n_states)
    for _ in range(max_iter):
        nxt = (r + game.gamma * (P @ v)).max(axis=1)
        done = np.abs(nxt - v).max() <= eps
        v = nxt
        if done:
            return v
    raise OracleError(f"best-response iteration did not converge in {max_iter} steps")


def worst_case_value(game, own_policy, player, tol=1e-8):
    """``v^i_{pi^i, *}``: value of ``own_policy`` against a best-responding opponent."""
    return -best_response_value(game, own_policy, 3 - player, tol)


def nash_gap(game, policy, rho0=None, tol=1e-8):
    """``sum_i rho0^T (v^i_{*, pi^-i} - v^i_pi)``; ``rho0`` defaults to uniform."""
    S = game.n_states
    rho0 = np.full(S, 1.0 / S) if rho0 is None else np.asarray(rho0, dtype=float)
    if rho0.shape != (S,) or np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > 1e-10:
        raise ValueError("rho0 must be a distribution over states")
    total = 0.0
    for i in (1, 2):
        br = best_response_value(game, policy.opponent(i), i, tol)
        total += rho0 @ (br - policy_evaluation(game, policy, i))
    return float(total)


def marginal_backup(game, v, opponent_policy, player):
    """``H^i(v, pi^-i)(s, a_i)``: the backup averaged over the opponent's action."""
    return np.einsum("sab,sb->sa", backup_tensor(game, v, player),
                     np.asarray(opponent_policy, dtype=float))


def own_policy_backup(game, q, policy, player, radius=None):
    """Backup whose bootstrap uses the player's own policy on truncated ``q``.

    ``[H(q)](s, a) = sum_b pi^-i(b|s) (R_i + gamma E[pi^i(s')^T clip(q(s'))])``.
    """
    radius = game.radius if radius is None else radius
    q = np.clip(np.asarray(q, dtype=float).reshape(game.n_states, -1), -radius, radius)
    boot = np.einsum("sa,sa->s", policy.player(player), q)
    return marginal_backup(game, boot, policy.opponent(player), player)


def _state_action_weights(policy, player, stationary):
    return (stationary[:, None] * policy.player(player)).ravel()


def target_weights(game, features, v, policy, player, stationary=None):
    """Weighted least-squares fit of ``H^i(v, pi^-i)`` onto the feature span.

    The weights are ``mu_pi(s) pi^i(a|s)``, ``mu_pi`` being the stationary
    distribution of the joint policy.  Solved by a Cholesky factorization of
    the normal matrix.
    """
    if stationary is None:
        stationary = stationary_distribution(induced_chain(game, policy))
    phi = features.matrix(player)
    d = _state_action_weights(policy, player, stationary)
    target = marginal_backup(game, v, policy.opponent(player), player).ravel()
    G = phi.T @ (d[:, None] * phi)
    try:
        factor = cho_factor(G)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("normal matrix is singular; excitation is zero") from None
    return cho_solve(factor, phi.T @ (d * target))


def completeness_residual(game, features, policy, w_tilde, player, radius=None):
    """``min_w |Phi w - H(clip(Phi w_tilde))|_inf`` for one ``(pi, w_tilde)``.

    A least-squares fit is tried first; when its residual is not already
    zero the Chebyshev fit is solved as a linear program.
    """
    phi = features.matrix(player)
    y = own_policy_backup(game, phi @ np.asarray(w_tilde, dtype=float),
                          policy, player, radius).ravel()
    w, *_ = np.linalg.lstsq(phi, y, rcond=None)
    res = float(np.abs(phi @ w - y).max())
    if res <= 1e-12:
        return res
    n, d = phi.shape
    c = np.zeros(d + 1)
    c[-1] = 1.0
    ones = np.ones((n, 1))
    A_ub = np.vstack([np.hstack([phi, -ones]), np.hstack([-phi, -ones])])
    b_ub = np.concatenate([y, -y])
    lp = linprog(c, A_ub=A_ub, b_ub=b_ub,
                 bounds=[(None, None)] * d + [(0, None)], method="highs")
    if lp.status != 0:
        return res
    return min(res, float(np.abs(phi @ lp.x[:d] - y).max()))


def lyapunov_trackers(game, features, theta, w, v_t, v_star, tau, mu=None):
    """Outer- and inner-loop Lyapunov quantities for one learner snapshot.

    Parameters
    ----------
    theta, w : pair of ndarray
        Current slow and fast weights per player.
    v_t : pair of ndarray
        The value view implied by the target weights.
    v_star : pair of ndarray
        Minimax values of both players.

    Returns
    -------
    Trackers
        ``L_v = sum_i |v_t^i - v_*^i|_inf``, ``L_sum = |v_t^1 + v_t^2|_inf``,
        ``L_theta = max_s V`` of the state's matrix game ``T^i(v_t^i)(s)``
        at logits ``Phi_s theta``, and ``L_w = sum_i |w^i - wbar^i|^2``
        with ``wbar`` the projected target under the current policy.
    """
    cfg = EnvelopeConfig(tau, mu)
    L_v = sum(float(np.abs(v_t[i] - v_star[i]).max()) for i in (0, 1))
    L_sum = float(np.abs(v_t[0] + v_t[1]).max())
    T1 = backup_tensor(game, v_t[0], 1)
    T2 = backup_tensor(game, v_t[1], 2)
    q1 = features.q_values(1, theta[0])
    q2 = features.q_values(2, theta[1])
    L_theta = max(lyapunov_V(q1[s], q2[s], MatrixGamePair(T1[s], T2[s]), cfg)
                  for s in range(game.n_states))
    policy = JointPolicy(softmax_tau(q1, tau), softmax_tau(q2, tau))
    mu_pi = stationary_distribution(induced_chain(game, policy))
    L_w = 0.0
    for i in (1, 2):
        wbar = target_weights(game, features, v_t[i - 1], policy, i, mu_pi)
        L_w += float(np.sum((w[i - 1] - wbar) ** 2))
    return Trackers(L_v, L_sum, float(L_theta), L_w)


def outer_loop_bound(L_v, L_sum, L_theta, L_w, gamma, tau, mu, A_max):
    """Right-hand side of the one-step outer-loop recursion for ``L_v``.

    ``gamma L_v + 17 A^2 L_theta / (tau (1 - gamma))^2 + 2 L_sum
    + 2 sqrt(L_w) + 12 tau log A + mu``.
    """
    return (gamma * L_v
            + 17.0 * A_max ** 2 / (tau ** 2 * (1.0 - gamma) ** 2) * L_theta
            + 2.0 * L_sum + 2.0 * np.sqrt(max(L_w, 0.0))
            + 12.0 * tau * np.log(A_max) + mu)

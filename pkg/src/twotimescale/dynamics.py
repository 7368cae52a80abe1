"""Per-state matrix-game dynamics and their envelope Lyapunov function.

For a pair of payoff matrices ``X1`` (A1 x A2) and ``X2`` (A2 x A1) the
parameter-space smoothed best-response iteration is

    x^i <- x^i + beta (X_i softmax_tau(x^{-i}) - x^i + E^i).

Its Lyapunov function is ``V = V_1 + V_2`` with

    V_i = max_u {u^T x^i + tau nu(u)} + min_u f_i(u),
    f_i(u) = -u^T x^i - tau nu(u) + ||x^{-i} - X_{-i} u||^2 / (2 mu),

the minimizer being the proximal point ``p_i`` returned by :func:`prox_p`.
``V`` vanishes exactly when every ``x^i = X_i softmax_tau(x^{-i})``.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog
from scipy.special import entr, logsumexp

from . import _kernels
from .game import softmax_tau

__all__ = [
    "ProxError",
    "MatrixGameError",
    "MatrixGamePair",
    "EnvelopeConfig",
    "ProxSolution",
    "DriftReport",
    "entropy",
    "smoothed_max",
    "sbr_policy_step",
    "param_step",
    "regularized_nash_gap",
    "prox_p",
    "envelope_term",
    "lyapunov_V",
    "lyapunov_grad",
    "smoothness_constant",
    "simulate_params",
    "drift_check",
    "matrix_game_value",
]

DRIFT_DECAY = 0.5
DRIFT_NOISE = 520.0
DRIFT_DEFECT = 4.0
DRIFT_SECOND_ORDER = 138.0
MU_RATIO = 64.0
PROX_TARGET = 1e-15


class ProxError(RuntimeError):
    """Raised when the proximal solver misses its tolerance within the cap."""


class MatrixGameError(RuntimeError):
    """Raised when no matrix-game solution meets the certificate tolerance."""


@dataclass(frozen=True, eq=False)
class MatrixGamePair:
    """Payoffs ``X1`` of shape (A1, A2) and ``X2`` of shape (A2, A1)."""

    X1: np.ndarray
    X2: np.ndarray

    def __post_init__(self):
        X1 = np.asarray(self.X1, dtype=float)
        X2 = np.asarray(self.X2, dtype=float)
        if X1.ndim != 2 or X2.shape != X1.T.shape:
            raise ValueError(f"shapes {X1.shape} and {X2.shape} are inconsistent")
        object.__setattr__(self, "X1", X1)
        object.__setattr__(self, "X2", X2)

    @classmethod
    def zero_sum(cls, X1):
        X1 = np.asarray(X1, dtype=float)
        return cls(X1, -X1.T)

    @property
    def zero_sum_defect(self):
        """``max_ij |X1(i, j) + X2(j, i)|``."""
        return float(np.abs(self.X1 + self.X2.T).max())

    def matrix(self, i):
        return self.X1 if i == 1 else self.X2


@dataclass(frozen=True)
class EnvelopeConfig:
    """Temperature, envelope parameter and inner-solver settings.

    ``mu`` defaults to ``tau / 64``.  ``method`` selects the proximal
    solver: ``"newton"`` (dual Newton, default) or ``"mirror"``
    (entropic mirror descent, slow, kept for cross-checking).
    """

    tau: float
    mu: float = None
    inner_tol: float = 1e-9
    inner_cap: int = 200
    method: str = "newton"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.mu is None:
            object.__setattr__(self, "mu", self.tau / MU_RATIO)
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.method not in ("newton", "mirror"):
            raise ValueError(f"unknown prox method {self.method!r}")


class ProxSolution(NamedTuple):
    minimizer: np.ndarray
    objective: float
    kkt_residual: float


class DriftReport(NamedTuple):
    """Per-step rows of the drift audit plus the constant used for ``L_b``."""

    rows: list
    L_b: float

    @property
    def min_slack(self):
        return min((r["slack"] for r in self.rows), default=np.inf)

    def satisfied(self, tol):
        return sum(r["slack"] >= -tol for r in self.rows)


def entropy(u):
    """Shannon entropy ``-sum u log u`` with ``0 log 0 = 0``."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("entropy of a vector with negative entries")
    return float(entr(u).sum())


def smoothed_max(y, tau):
    """``max_u {u^T y + tau nu(u)} = tau log sum exp(y / tau)``."""
    return float(tau * logsumexp(np.asarray(y, dtype=float) / tau))


def sbr_policy_step(pi1, pi2, pair, tau, beta):
    """One simultaneous smoothed best-response step in policy space."""
    br1 = softmax_tau(pair.X1 @ pi2, tau)
    br2 = softmax_tau(pair.X2 @ pi1, tau)
    return pi1 + beta * (br1 - pi1), pi2 + beta * (br2 - pi2)


def param_step(x1, x2, pair, tau, beta, noise=None):
    """One step of the parameter-space iteration, optionally with noise."""
    e1, e2 = (0.0, 0.0) if noise is None else noise
    n1 = x1 + beta * (pair.X1 @ softmax_tau(x2, tau) - x1 + e1)
    n2 = x2 + beta * (pair.X2 @ softmax_tau(x1, tau) - x2 + e2)
    return n1, n2


def _check_simplex(u, name):
    if np.any(u < -1e-12) or abs(u.sum() - 1.0) > 1e-10:
        raise ValueError(f"{name} is not in the simplex")


def regularized_nash_gap(pi1, pi2, pair, tau):
    """Entropy-regularized Nash gap of a policy pair.

    Each player's inner maximum is available in closed form, so the gap is
    ``sum_i smax_tau(X_i pi^{-i}) - pi_i^T X_i pi^{-i} - tau nu(pi_i)``.
    """
    pi1 = np.asarray(pi1, dtype=float)
    pi2 = np.asarray(pi2, dtype=float)
    _check_simplex(pi1, "pi1")
    _check_simplex(pi2, "pi2")
    total = 0.0
    for own, other, X in ((pi1, pi2, pair.X1), (pi2, pi1, pair.X2)):
        pay = X @ other
        total += smoothed_max(pay, tau) - own @ pay - tau * entropy(own)
    return total


def _prox_objective(u, x, y, B, tau, mu):
    r = x - B @ u
    return float(-u @ y - tau * entropy(u) + (r @ r) / (2.0 * mu))


def _prox_mirror(x, y, B, tau, mu, tol, cap):
    # Exponentiated gradient with the fixed step 1 / (tau + ||B||^2 / mu).
    eta = 1.0 / (tau + np.linalg.norm(B, 2) ** 2 / mu)
    logu = np.log(softmax_tau(y, tau))
    for _ in range(cap):
        u = np.exp(logu)
        grad = -y + tau * (logu + 1.0) + B.T @ (B @ u - x) / mu
        fw_gap = float(grad @ u - grad.min())
        if fw_gap <= tol:
            return u, fw_gap
        logu = logu - eta * grad
        logu -= logsumexp(logu)
    return np.exp(logu), fw_gap


def _solve_prox(x, y, B, tau, mu, cfg):
    x = np.ascontiguousarray(x, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if cfg.method == "mirror":
        u, res = _prox_mirror(x, y, B, tau, mu, cfg.inner_tol, 10**5)
        if res > cfg.inner_tol:
            raise ProxError(f"mirror descent stopped at residual {res:.3g}")
        return u, np.log(np.maximum(u, 1e-300)), res
    # Newton runs to its rounding floor; the configured tolerance only gates
    # acceptance.
    u, logu, _, gap, _, _ = _kernels.prox_continuation(
        x, y, B, float(tau), float(mu), PROX_TARGET, int(cfg.inner_cap))
    if not gap <= cfg.inner_tol:
        raise ProxError(f"prox solver stopped at duality gap {gap:.3g}")
    return u, logu, gap


def prox_p(mu, x, y, B, tau, cfg):
    """Proximal point ``argmin_u -u^T y - tau nu(u) + ||x - B u||^2 / (2 mu)``.

    Parameters
    ----------
    mu, tau : float
        Envelope parameter and temperature, both positive.
    x : ndarray, shape (n,)
    y : ndarray, shape (m,)
    B : ndarray, shape (n, m)
    cfg : EnvelopeConfig
        Only the solver settings are read.

    Returns
    -------
    ProxSolution
        ``kkt_residual`` is the duality gap of the dual Newton solver (an
        upper bound on objective suboptimality) or the Frank-Wolfe gap for
        mirror descent.
    """
    if not (mu > 0 and tau > 0):
        raise ValueError("mu and tau must be positive")
    u, _, res = _solve_prox(x, y, B, tau, mu, cfg)
    return ProxSolution(u, _prox_objective(u, np.asarray(x, float), np.asarray(y, float),
                                           np.asarray(B, float), tau, mu), float(res))


def envelope_term(x, y, B, tau, mu, cfg=None):
    """One summand ``V_1(x, y)`` of the Lyapunov function and its prox point.

    Evaluated as ``tau KL(p || softmax_tau(y)) + ||x - B p||^2 / (2 mu)``,
    which equals ``smax_tau(y) + f(p)`` but cannot go negative by
    cancellation.
    """
    cfg = EnvelopeConfig(tau, mu) if cfg is None else cfg
    p, logp, _ = _solve_prox(x, y, B, tau, mu, cfg)
    log_sig = np.log(softmax_tau(y, tau)) if cfg.method == "mirror" else \
        _kernels._log_softmax(np.ascontiguousarray(y, dtype=float), float(tau))
    kl = float(p @ (logp - log_sig))
    r = np.asarray(x, dtype=float) - np.asarray(B, dtype=float) @ p
    return max(tau * kl, 0.0) + float(r @ r) / (2.0 * mu), p


def lyapunov_V(x1, x2, pair, cfg):
    """``V(x1, x2)``; the two summands use ``(x2, x1, X2)`` and ``(x1, x2, X1)``."""
    v1, _ = envelope_term(x2, x1, pair.X2, cfg.tau, cfg.mu, cfg)
    v2, _ = envelope_term(x1, x2, pair.X1, cfg.tau, cfg.mu, cfg)
    return v1 + v2


def smoothness_constant(tau, mu):
    """``L_V = 2 / mu + 2 / tau + 1 / sqrt(mu tau)``."""
    return 2.0 / mu + 2.0 / tau + 1.0 / np.sqrt(mu * tau)


def lyapunov_grad(x1, x2, pair, cfg):
    """Gradient of :func:`lyapunov_V` and the smoothness constant.

    Returns
    -------
    g1, g2 : ndarray
        ``g_i = softmax_tau(x^i) - p_i + (x^i - X_i p_{-i}) / mu`` where
        ``p_i`` is player ``i``'s prox point.
    L_V : float
    """
    tau, mu = cfg.tau, cfg.mu
    _, p1 = envelope_term(x2, x1, pair.X2, tau, mu, cfg)
    _, p2 = envelope_term(x1, x2, pair.X1, tau, mu, cfg)
    g1 = softmax_tau(x1, tau) - p1 + (x1 - pair.X1 @ p2) / mu
    g2 = softmax_tau(x2, tau) - p2 + (x2 - pair.X2 @ p1) / mu
    return g1, g2, smoothness_constant(tau, mu)


def simulate_params(x1, x2, pair, tau, beta, steps, noise=None):
    """Run :func:`param_step` and record the trajectory.

    ``noise`` is an optional callable ``k -> (e1, e2)``.  Returns the list
    of states (length ``steps + 1``) and the list of noise pairs used.
    """
    traj = [(np.asarray(x1, float), np.asarray(x2, float))]
    used = []
    for k in range(steps):
        e = (np.zeros(len(x1)), np.zeros(len(x2))) if noise is None else noise(k)
        used.append(e)
        traj.append(param_step(*traj[-1], pair, tau, beta, e))
    return traj, used


def drift_check(trajectory, pair, cfg, beta, noise):
    """Audit the one-step drift inequality along a recorded trajectory.

    For each step ``k`` the bound is

        (1 - beta/2) V_k + (520 beta / tau)(|E1|^2 + |E2|^2)
        + 4 beta defect + 138 L_b beta^2 / tau,

    with ``defect = max |X1 + X2^T|`` and ``L_b`` the largest recorded
    update direction ``|X_i softmax(x^{-i}) - x^i + E^i|``.  The constants
    hold for ``mu = tau / 64`` only.

    Returns
    -------
    DriftReport
        Rows with keys ``k, V_k, V_k1, bound, slack, noise_x_norm,
        noise_y_norm``; ``slack = bound - V_{k+1}``.
    """
    tau = cfg.tau
    if not np.isclose(cfg.mu, tau / MU_RATIO, rtol=1e-12, atol=0.0):
        raise ValueError("drift constants require mu = tau / 64")
    if noise is None or len(noise) != len(trajectory) - 1:
        raise ValueError("one noise record per step is required")
    L_b = 0.0
    for (x1, x2), (e1, e2) in zip(trajectory[:-1], noise):
        d1 = pair.X1 @ softmax_tau(x2, tau) - x1 + e1
        d2 = pair.X2 @ softmax_tau(x1, tau) - x2 + e2
        L_b = max(L_b, np.linalg.norm(d1), np.linalg.norm(d2))
    defect = pair.zero_sum_defect
    values = [lyapunov_V(x1, x2, pair, cfg) for x1, x2 in trajectory]
    rows = []
    for k, (e1, e2) in enumerate(noise):
        n1 = float(np.linalg.norm(e1))
        n2 = float(np.linalg.norm(e2))
        bound = ((1.0 - DRIFT_DECAY * beta) * values[k]
                 + DRIFT_NOISE * beta / tau * (n1 ** 2 + n2 ** 2)
                 + DRIFT_DEFECT * beta * defect
                 + DRIFT_SECOND_ORDER * L_b * beta ** 2 / tau)
        rows.append({"k": k, "V_k": values[k], "V_k1": values[k + 1],
                     "bound": bound, "slack": bound - values[k + 1],
                     "noise_x_norm": n1, "noise_y_norm": n2})
    return DriftReport(rows, float(L_b))


def _polish(X, p, q):
    # Re-solve the equalizing systems on the supports found by the LP.
    rows = np.flatnonzero(p > 1e-9)
    cols = np.flatnonzero(q > 1e-9)
    if len(rows) != len(cols):
        return p, q
    sp, okp = _kernels._support_strategy(X, rows, cols)
    sq, okq = _kernels._support_strategy(np.ascontiguousarray(X.T), cols, rows)
    if not (okp and okq) or sp[:-1].min() < -1e-12 or sq[:-1].min() < -1e-12:
        return p, q
    p2 = np.zeros_like(p)
    q2 = np.zeros_like(q)
    p2[rows] = np.maximum(sp[:-1], 0.0)
    q2[cols] = np.maximum(sq[:-1], 0.0)
    return p2 / p2.sum(), q2 / q2.sum()


def _lp_game(X):
    # max v s.t. p^T X >= v, sum p = 1, p >= 0; duals give the column strategy.
    m, n = X.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-X.T, np.ones((n, 1))])
    A_eq = np.hstack([np.ones((1, m)), np.zeros((1, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    if res.status != 0:
        raise MatrixGameError(f"linear program failed: {res.message}")
    p = np.maximum(res.x[:m], 0.0)
    q = np.maximum(-res.ineqlin.marginals, 0.0)
    return _polish(X, p / p.sum(), q / q.sum())


ENUMERATION_LIMIT = 6


def matrix_game_value(X, tol=1e-9, return_gap=False):
    """Value and optimal strategies of the zero-sum matrix game ``X``.

    The row player maximizes ``p^T X q``.  Games with at most six actions
    per side are solved exactly by support enumeration; larger ones by
    linear programming followed by a support polish.  The returned pair is
    certified by ``max(X q) - min(p^T X) <= tol``.

    Returns
    -------
    value : float
    p : ndarray
        Maximin strategy of the row player.
    q : ndarray
        Minimax strategy of the column player.
    gap : float, optional
        The certificate, when ``return_gap`` is true.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ValueError("payoff matrix must be a finite 2-D array")
    ok = False
    if max(X.shape) <= ENUMERATION_LIMIT:
        value, p, q, gap, ok = _kernels.solve_matrix_game(X, tol)
    if not ok:
        p, q = _lp_game(X)
        lower = float((p @ X).min())
        upper = float((X @ q).max())
        value, gap = 0.5 * (lower + upper), upper - lower
        if gap > tol:
            raise MatrixGameError(f"certificate gap {gap:.3g} exceeds {tol:.3g}")
    if return_gap:
        return float(value), p, q, float(gap)
    return float(value), p, q


def matrix_game_values(Xs, tol=1e-9):
    """Solve a stack of games ``Xs[s]``; returns ``(values, P, Q, gaps)``."""
    Xs = np.ascontiguousarray(Xs, dtype=float)
    S, m, n = Xs.shape
    if max(m, n) <= ENUMERATION_LIMIT:
        values, P, Q, gaps, ok = _kernels.solve_matrix_games(Xs, tol)
    else:
        values, P, Q = np.zeros(S), np.zeros((S, m)), np.zeros((S, n))
        gaps = np.full(S, np.inf)
        ok = np.zeros(S, dtype=bool)
    for s in np.flatnonzero(~ok):
        values[s], P[s], Q[s], gaps[s] = matrix_game_value(Xs[s], tol, return_gap=True)
    return values, P, Q, gaps

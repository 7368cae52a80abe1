"""Compiled inner loops.

Every function here is plain numpy-subset Python.  When numba is importable
the functions are compiled with ``njit``; otherwise they run as ordinary
Python, which is slow but gives identical results.
"""

import numpy as np

try:
    import numba

    HAVE_NUMBA = True

    def jit(fn):
        return numba.njit(cache=True)(fn)

except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def jit(fn):
        return fn


# ---------------------------------------------------------------------------
# small dense linear algebra
# ---------------------------------------------------------------------------

@jit
def gauss_solve(A, b):
    """Solve ``A x = b`` by partial pivoting; return ``(x, ok)``."""
    n = A.shape[0]
    M = A.copy()
    x = b.copy()
    scale = 0.0
    for i in range(n):
        for j in range(n):
            if abs(M[i, j]) > scale:
                scale = abs(M[i, j])
    if scale == 0.0:
        return x, False
    for c in range(n):
        piv = c
        best = abs(M[c, c])
        for r in range(c + 1, n):
            if abs(M[r, c]) > best:
                best = abs(M[r, c])
                piv = r
        if best <= 1e-13 * scale:
            return x, False
        if piv != c:
            for j in range(n):
                tmp = M[c, j]
                M[c, j] = M[piv, j]
                M[piv, j] = tmp
            tmp = x[c]
            x[c] = x[piv]
            x[piv] = tmp
        for r in range(c + 1, n):
            f = M[r, c] / M[c, c]
            if f != 0.0:
                for j in range(c, n):
                    M[r, j] -= f * M[c, j]
                x[r] -= f * x[c]
    for c in range(n - 1, -1, -1):
        acc = x[c]
        for j in range(c + 1, n):
            acc -= M[c, j] * x[j]
        x[c] = acc / M[c, c]
    return x, True


@jit
def _bits(mask, n):
    k = 0
    for i in range(n):
        if (mask >> i) & 1:
            k += 1
    idx = np.empty(k, dtype=np.int64)
    k = 0
    for i in range(n):
        if (mask >> i) & 1:
            idx[k] = i
            k += 1
    return idx


@jit
def _popcount(mask):
    k = 0
    while mask:
        k += mask & 1
        mask >>= 1
    return k


@jit
def _support_strategy(X, rows, cols):
    """Equalizing strategy on ``rows`` making every column in ``cols`` equal.

    Solves ``sum_i p_i X[i, j] = v`` for ``j`` in ``cols`` and ``sum p = 1``.
    """
    k = rows.shape[0]
    A = np.zeros((k + 1, k + 1))
    b = np.zeros(k + 1)
    for e in range(k):
        j = cols[e]
        for a in range(k):
            A[e, a] = X[rows[a], j]
        A[e, k] = -1.0
    for a in range(k):
        A[k, a] = 1.0
    b[k] = 1.0
    return gauss_solve(A, b)


@jit
def _certify(X, p, q):
    m, n = X.shape
    lower = np.inf
    for j in range(n):
        acc = 0.0
        for i in range(m):
            acc += p[i] * X[i, j]
        if acc < lower:
            lower = acc
    upper = -np.inf
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += X[i, j] * q[j]
        if acc > upper:
            upper = acc
    return lower, upper


@jit
def _clean(u):
    s = 0.0
    for i in range(u.shape[0]):
        if u[i] < 0.0:
            u[i] = 0.0
        s += u[i]
    for i in range(u.shape[0]):
        u[i] /= s


@jit
def solve_matrix_game(X, tol):
    """Exact maximin solution by square-support enumeration.

    Returns ``(value, p, q, gap, ok)`` where ``p`` maximizes the row payoff,
    ``q`` minimizes it, and ``gap = max(Xq) - min(p^T X) >= 0`` certifies
    the pair.
    """
    m, n = X.shape
    p = np.zeros(m)
    q = np.zeros(n)
    kmax = min(m, n)
    for k in range(1, kmax + 1):
        for rmask in range(1, 1 << m):
            if _popcount(rmask) != k:
                continue
            rows = _bits(rmask, m)
            for cmask in range(1, 1 << n):
                if _popcount(cmask) != k:
                    continue
                cols = _bits(cmask, n)
                sol_p, okp = _support_strategy(X, rows, cols)
                if not okp:
                    continue
                feasible = True
                for a in range(k):
                    if sol_p[a] < -1e-12:
                        feasible = False
                if not feasible:
                    continue
                sol_q, okq = _support_strategy(X.T.copy(), cols, rows)
                if not okq:
                    continue
                for a in range(k):
                    if sol_q[a] < -1e-12:
                        feasible = False
                if not feasible:
                    continue
                p[:] = 0.0
                q[:] = 0.0
                for a in range(k):
                    p[rows[a]] = sol_p[a]
                    q[cols[a]] = sol_q[a]
                _clean(p)
                _clean(q)
                lower, upper = _certify(X, p, q)
                if upper - lower <= tol:
                    return 0.5 * (lower + upper), p, q, upper - lower, True
    return 0.0, p, q, np.inf, False


@jit
def solve_matrix_games(Xs, tol):
    """Batch version of :func:`solve_matrix_game` over the leading axis."""
    S, m, n = Xs.shape
    values = np.zeros(S)
    P = np.zeros((S, m))
    Q = np.zeros((S, n))
    gaps = np.zeros(S)
    ok = np.zeros(S, dtype=np.bool_)
    for s in range(S):
        v, p, q, g, good = solve_matrix_game(Xs[s].copy(), tol)
        values[s] = v
        P[s] = p
        Q[s] = q
        gaps[s] = g
        ok[s] = good
    return values, P, Q, gaps, ok


# ---------------------------------------------------------------------------
# proximal point on the simplex
# ---------------------------------------------------------------------------

@jit
def _log_softmax(z, tau):
    zmax = z.max()
    acc = 0.0
    for a in range(z.shape[0]):
        acc += np.exp((z[a] - zmax) / tau)
    return (z - zmax) / tau - np.log(acc)


@jit
def _smoothed_max(z, tau):
    zmax = z.max()
    acc = 0.0
    for a in range(z.shape[0]):
        acc += np.exp((z[a] - zmax) / tau)
    return zmax + tau * np.log(acc)


@jit
def prox_dual_newton(x, y, B, tau, mu, tol, cap, lam0):
    """Minimize ``-u^T y - tau nu(u) + ||x - B u||^2 / (2 mu)`` over the simplex.

    Works on the unconstrained concave dual
    ``D(lam) = lam^T x - mu ||lam||^2 / 2 - smax_tau(y + B^T lam)``
    whose maximizer gives ``u = softmax_tau(y + B^T lam)``.  The duality gap
    equals ``||x - mu lam - B u||^2 / (2 mu)`` exactly, which is the returned
    certificate.

    Returns ``(u, log_u, lam, gap, iterations, ok)``.
    """
    n = x.shape[0]
    lam = lam0.copy()
    z = y + B.T @ lam
    logu = _log_softmax(z, tau)
    u = np.exp(logu)
    g = x - mu * lam - B @ u
    gap = (g @ g) / (2.0 * mu)
    dval = lam @ x - 0.5 * mu * (lam @ lam) - _smoothed_max(z, tau)
    it = 0
    while gap > tol and it < cap:
        it += 1
        Bu = B @ u
        H = mu * np.eye(n) + (B * u) @ B.T / tau - np.outer(Bu, Bu) / tau
        d, ok = gauss_solve(H, g)
        if not ok:
            break
        slope = g @ d
        t = 1.0
        if slope > 1e-14 * (1.0 + abs(dval)):
            while t > 1e-12:
                lam_new = lam + t * d
                z_new = y + B.T @ lam_new
                dnew = (lam_new @ x - 0.5 * mu * (lam_new @ lam_new)
                        - _smoothed_max(z_new, tau))
                if dnew >= dval + 1e-4 * t * slope:
                    break
                t *= 0.5
        lam = lam + t * d
        z = y + B.T @ lam
        logu = _log_softmax(z, tau)
        u = np.exp(logu)
        g = x - mu * lam - B @ u
        new_gap = (g @ g) / (2.0 * mu)
        dval = lam @ x - 0.5 * mu * (lam @ lam) - _smoothed_max(z, tau)
        if t <= 1e-12 and new_gap >= gap:
            gap = new_gap
            break
        if t == 1.0 and gap < 1e-9 and new_gap > 0.25 * gap:
            # Quadratic convergence has stopped: rounding floor reached.
            gap = min(gap, new_gap)
            break
        gap = new_gap
    return u, logu, lam, gap, it, gap <= tol


@jit
def prox_continuation(x, y, B, tau, mu, tol, cap):
    """Dual Newton along a decreasing temperature path ending at ``tau``.

    Near-hard softmax makes the dual almost piecewise quadratic and plain
    damped Newton zigzags; warm starts from larger temperatures avoid it.
    """
    scale = 0.0
    for a in range(y.shape[0]):
        scale = max(scale, abs(y[a]))
    scale = max(scale, np.sqrt((B * B).sum()) * (np.sqrt(x @ x) + 1.0))
    t = max(tau, scale)
    lam = np.zeros(x.shape[0])
    total = 0
    while t > tau:
        u, logu, lam, gap, it, ok = prox_dual_newton(x, y, B, t, mu, 1e-8, cap, lam)
        total += it
        t = max(tau, t * 0.5)
    u, logu, lam, gap, it, ok = prox_dual_newton(x, y, B, tau, mu, tol, cap, lam)
    return u, logu, lam, gap, total + it, ok


# ---------------------------------------------------------------------------
# learner inner loop
# ---------------------------------------------------------------------------

@jit
def _policy_at(phi, n_act, s, theta, tau):
    logits = phi[s * n_act:(s + 1) * n_act] @ theta
    return np.exp(_log_softmax(logits, tau))


@jit
def _draw(prob, u):
    c = 0.0
    for a in range(prob.shape[0] - 1):
        c += prob[a]
        if u < c:
            return a
    return prob.shape[0] - 1


@jit
def _slow_step(theta, w, beta):
    for j in range(theta.shape[0]):
        theta[j] += beta * (w[j] - theta[j])


@jit
def _td_delta(phi, n_act, s, a, reward, s_next, w, w_bar, theta_bar,
              tau, gamma, radius):
    nxt = phi[s_next * n_act:(s_next + 1) * n_act]
    pol = np.exp(_log_softmax(nxt @ theta_bar, tau))
    q = nxt @ w_bar
    boot = 0.0
    for b in range(n_act):
        qb = min(max(q[b], -radius), radius)
        boot += pol[b] * qb
    return reward + gamma * boot - phi[s * n_act + a] @ w


@jit
def _fast_step(phi, n_act, s, a, w, alpha, delta, M):
    row = phi[s * n_act + a]
    for j in range(w.shape[0]):
        w[j] += alpha * delta * row[j]
    nrm = np.sqrt(w @ w)
    if nrm > M:
        for j in range(w.shape[0]):
            w[j] *= M / nrm


@jit
def inner_loop_kernel(cum_p, reward1, phi1, phi2, n1, n2,
                      w1, th1, wb1, tb1, w2, th2, wb2, tb2,
                      state, U, alpha, beta, tau, gamma, radius, M, deltas):
    """Run ``U.shape[0]`` steps in place; return the final state.

    ``deltas[k]`` receives the two TD errors of step ``k``.  Each player
    helper sees only its own features, parameters and realized reward.
    """
    s = state
    n_states = cum_p.shape[3]
    for k in range(U.shape[0]):
        _slow_step(th1, w1, beta)
        _slow_step(th2, w2, beta)
        a1 = _draw(_policy_at(phi1, n1, s, th1, tau), U[k, 0])
        a2 = _draw(_policy_at(phi2, n2, s, th2, tau), U[k, 1])
        s_next = n_states - 1
        for j in range(n_states):
            if U[k, 2] < cum_p[s, a1, a2, j]:
                s_next = j
                break
        r1 = reward1[s, a1, a2]
        d1 = _td_delta(phi1, n1, s, a1, r1, s_next, w1, wb1, tb1,
                       tau, gamma, radius)
        d2 = _td_delta(phi2, n2, s, a2, -r1, s_next, w2, wb2, tb2,
                       tau, gamma, radius)
        _fast_step(phi1, n1, s, a1, w1, alpha, d1, M)
        _fast_step(phi2, n2, s, a2, w2, alpha, d2, M)
        deltas[k, 0] = d1
        deltas[k, 1] = d2
        s = s_next
    return s

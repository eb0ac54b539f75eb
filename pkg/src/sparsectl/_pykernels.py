"""Reference (numpy/scipy) implementation of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_ckernels`` module.  Status codes returned by the sweeps:
0 ok, 1 Newton did not converge, 2 blow-up, 3 singular step matrix.
"""
import numpy as np
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded, solve_banded

OK, NEWTON_FAIL, BLOWUP, SINGULAR = 0, 1, 2, 3


def tridiag_solve(sub, diag, sup, rhs):
    """Solve with a tridiagonal matrix; ``sub[0]`` and ``sup[-1]`` are ignored."""
    n = diag.shape[0]
    if n == 1:
        return rhs / diag
    ab = np.empty((3, n))
    ab[0, 0] = 0.0
    ab[0, 1:] = sup[:-1]
    ab[1] = diag
    ab[2, :-1] = sub[1:]
    ab[2, -1] = 0.0
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def spd_tridiag_solve(sub, diag, rhs):
    """Symmetric tridiagonal solve; returns ``(x, was_positive_definite)``.

    Falls back to pivoted LU when the Cholesky factorization fails.
    """
    n = diag.shape[0]
    if n == 1:
        return rhs / diag, bool(diag[0] > 0)
    ab = np.empty((2, n))
    ab[0, 0] = 0.0
    ab[0, 1:] = sub[1:]
    ab[1] = diag
    try:
        c = cholesky_banded(ab, lower=False, check_finite=False)
        return cho_solve_banded((c, False), rhs, check_finite=False), True
    except LinAlgError:
        return tridiag_solve(sub, diag, np.concatenate([sub[1:], [0.0]]), rhs), False


def _poly(c, z):
    v = np.zeros_like(z)
    d = np.zeros_like(z)
    for j in range(c.shape[0] - 1, -1, -1):
        d = d * z + v
        v = v * z + c[j]
    return v, d


def _apply(sub, diag, sup, z):
    out = diag * z
    out[1:] += sub[1:] * z[:-1]
    out[:-1] += sup[:-1] * z[1:]
    return out


def forward_poly_sweep(y0, sub, diag0, sup, mass, coefs, load, dt, tol, max_iter, max_backtrack, blowup):
    """Implicit Euler with per-step damped Newton, polynomial reaction.

    ``diag0`` is the diagonal of ``M/dt + K + M_a``; ``coefs`` has shape
    ``(1 or N+1, degree+1, n)``; ``load`` has shape ``(N, n)`` and holds
    ``M (g + E u)`` at the right end of each step.  Returns
    ``(Y, iterations, status, failed_step)``.
    """
    N, n = load.shape
    Y = np.zeros((N + 1, n))
    Y[0] = y0
    iters = np.zeros(N, dtype=np.int64)
    tconst = coefs.shape[0] == 1
    for k in range(1, N + 1):
        c = coefs[0] if tconst else coefs[k]
        b = mass / dt * Y[k - 1] + load[k - 1]
        scale = 1.0 + np.max(np.abs(b / mass))
        z = Y[k - 1].copy()
        p, dp = _poly(c, z)
        G = _apply(sub, diag0, sup, z) + mass * p - b
        res = np.max(np.abs(G / mass))
        it = 0
        while res > tol * scale:
            if it >= max_iter:
                return Y, iters, NEWTON_FAIL, k
            delta = tridiag_solve(sub, diag0 + mass * dp, sup, -G)
            if not np.all(np.isfinite(delta)):
                return Y, iters, SINGULAR, k
            alpha = 1.0
            for _ in range(max_backtrack + 1):
                zn = z + alpha * delta
                pn, dpn = _poly(c, zn)
                Gn = _apply(sub, diag0, sup, zn) + mass * pn - b
                resn = np.max(np.abs(Gn / mass))
                if resn < res or not np.isfinite(res):
                    break
                alpha *= 0.5
            z, p, dp, G, res = zn, pn, dpn, Gn, resn
            it += 1
            if not np.isfinite(res) or np.max(np.abs(z)) > blowup:
                Y[k] = z
                return Y, iters, BLOWUP, k
        Y[k] = z
        iters[k - 1] = it
    return Y, iters, OK, 0


def adjoint_sweep(sub, diag0, mass, dfdy, rhs, dt):
    """Backward sweep ``(diag0 + M f'_k) phi_k - K_off phi = M/dt phi_{k+1} + rhs_k``.

    ``phi_N = 0``; returns ``(Phi, indefinite_steps)``.
    """
    N, n = rhs.shape
    Phi = np.zeros((N + 1, n))
    bad = 0
    for k in range(N - 1, -1, -1):
        x, ok = spd_tridiag_solve(sub, diag0 + mass * dfdy[k], mass / dt * Phi[k + 1] + rhs[k])
        bad += not ok
        Phi[k] = x
    return Phi, bad


def _row_norms(V, w):
    return np.sqrt(np.sum(w * V * V, axis=1))


def prox_ball_batch(V, w, thresh, gamma):
    """Row-wise prox of ``thresh ||u||_w + I(||u||_w <= gamma)``."""
    r = _row_norms(V, w)
    mag = np.minimum(np.maximum(r - thresh, 0.0), gamma)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(r > thresh, mag / r, 0.0)
    return V * s[:, None]


def _box_fixed_point(v, w, c, alpha, beta, tol, max_iter):
    r = np.sqrt(np.sum(w * v * v))
    u = np.clip(v * (r - c) / r, alpha, beta)
    for _ in range(max_iter):
        nu = np.sqrt(np.sum(w * u * u))
        if nu == 0.0:
            return u, False
        un = 0.5 * u + 0.5 * np.clip(v - c * u / nu, alpha, beta)
        d = np.sqrt(np.sum(w * (un - u) ** 2))
        u = un
        if d <= tol * max(1.0, nu):
            return u, True
    return u, False


def _box_dykstra(v, w, c, alpha, beta, tol, max_sweeps):
    x = v.copy()
    p = np.zeros_like(v)
    q = np.zeros_like(v)
    for _ in range(max_sweeps):
        z = x + p
        r = np.sqrt(np.sum(w * z * z))
        y = z * (max(r - c, 0.0) / r) if r > 0 else np.zeros_like(z)
        p = z - y
        xn = np.clip(y + q, alpha, beta)
        q = y + q - xn
        d = np.sqrt(np.sum(w * (xn - x) ** 2))
        x = xn
        if d <= tol * max(1.0, np.sqrt(np.sum(w * x * x))):
            return x, True
    return x, False


def prox_box_batch(V, w, thresh, alpha, beta, tol, max_iter, max_sweeps):
    """Row-wise prox of ``thresh ||u||_w + I(alpha <= u <= beta)``.

    Returns ``(U, flags)``: flag 0 = zero rule or fixed point converged,
    1 = Dykstra fallback used, 2 = fallback did not converge either.
    """
    S = V.shape[0]
    U = np.zeros_like(V)
    flags = np.zeros(S, dtype=np.int64)
    r = _row_norms(V, w)
    for s in range(S):
        if r[s] <= thresh[s]:
            continue
        u, ok = _box_fixed_point(V[s], w, thresh[s], alpha, beta, tol, max_iter)
        if not ok:
            u, ok = _box_dykstra(V[s], w, thresh[s], alpha, beta, tol, max_sweeps)
            flags[s] = 1 if ok else 2
        U[s] = u
    return U, flags

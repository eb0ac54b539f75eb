# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels`` (same signatures, same results)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

DEF OK = 0
DEF NEWTON_FAIL = 1
DEF BLOWUP = 2
DEF SINGULAR = 3


cdef int _thomas(const double[:] sub, const double[:] diag, const double[:] sup,
                 const double[:] rhs, double[:] x, double* work) noexcept nogil:
    """Plain Thomas elimination; returns 1 on a zero pivot."""
    cdef Py_ssize_t n = diag.shape[0], i
    cdef double m, piv
    piv = diag[0]
    if piv == 0.0:
        return 1
    work[0] = sup[0] / piv
    x[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - sub[i] * work[i - 1]
        if piv == 0.0:
            return 1
        work[i] = sup[i] / piv
        x[i] = (rhs[i] - sub[i] * x[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        x[i] -= work[i] * x[i + 1]
    return 0


cdef int _spd_thomas(const double[:] sub, const double[:] diag, const double[:] rhs,
                     double[:] x, double* work) noexcept nogil:
    """LDL^T of a symmetric tridiagonal matrix; returns 1 if a pivot is not positive."""
    cdef Py_ssize_t n = diag.shape[0], i
    cdef double piv
    piv = diag[0]
    if not piv > 0.0:
        return 1
    work[0] = sub[1] / piv if n > 1 else 0.0
    x[0] = rhs[0] / piv
    for i in range(1, n):
        piv = diag[i] - sub[i] * work[i - 1]
        if not piv > 0.0:
            return 1
        work[i] = (sub[i + 1] / piv) if i + 1 < n else 0.0
        x[i] = (rhs[i] - sub[i] * x[i - 1]) / piv
    for i in range(n - 2, -1, -1):
        x[i] -= work[i] * x[i + 1]
    return 0


cdef int _gtsv(const double[:] sub, const double[:] diag, const double[:] sup,
               const double[:] rhs, double[:] x) noexcept nogil:
    """Tridiagonal Gaussian elimination with partial pivoting (LAPACK gtsv scheme)."""
    cdef Py_ssize_t n = diag.shape[0], i
    cdef double *dl = <double*> malloc(n * sizeof(double))
    cdef double *d = <double*> malloc(n * sizeof(double))
    cdef double *du = <double*> malloc(n * sizeof(double))
    cdef double *du2 = <double*> malloc(n * sizeof(double))
    cdef double *b = <double*> malloc(n * sizeof(double))
    cdef double fact, temp
    cdef int status = 0
    for i in range(n):
        d[i] = diag[i]
        b[i] = rhs[i]
        dl[i] = sub[i + 1] if i + 1 < n else 0.0
        du[i] = sup[i]
        du2[i] = 0.0
    for i in range(n - 1):
        if fabs(d[i]) >= fabs(dl[i]):
            if d[i] == 0.0:
                status = 1
                break
            fact = dl[i] / d[i]
            d[i + 1] -= fact * du[i]
            b[i + 1] -= fact * b[i]
            dl[i] = 0.0
        else:
            fact = d[i] / dl[i]
            d[i] = dl[i]
            temp = d[i + 1]
            d[i + 1] = du[i] - fact * temp
            if i + 1 < n - 1:
                dl[i] = du[i + 1]
                du[i + 1] = -fact * dl[i]
            du[i] = temp
            temp = b[i]
            b[i] = b[i + 1]
            b[i + 1] = temp - fact * b[i + 1]
    if status == 0 and d[n - 1] == 0.0:
        status = 1
    if status == 0:
        x[n - 1] = b[n - 1] / d[n - 1]
        if n > 1:
            x[n - 2] = (b[n - 2] - du[n - 2] * x[n - 1]) / d[n - 2]
        for i in range(n - 3, -1, -1):
            x[i] = (b[i] - du[i] * x[i + 1] - dl[i] * x[i + 2]) / d[i]
    free(dl); free(d); free(du); free(du2); free(b)
    return status


def tridiag_solve(double[:] sub, double[:] diag, double[:] sup, double[:] rhs):
    cdef Py_ssize_t n = diag.shape[0]
    out = np.empty(n)
    cdef double[:] x = out
    if _gtsv(sub, diag, sup, rhs, x) != 0:
        out[:] = np.nan
    return out


def spd_tridiag_solve(double[:] sub, double[:] diag, double[:] rhs):
    cdef Py_ssize_t n = diag.shape[0]
    out = np.empty(n)
    cdef double[:] x = out
    cdef double *work = <double*> malloc(n * sizeof(double))
    cdef int bad = _spd_thomas(sub, diag, rhs, x, work)
    free(work)
    if bad:
        sup = np.concatenate([np.asarray(sub)[1:], [0.0]])
        return tridiag_solve(sub, diag, sup, rhs), False
    return out, True


cdef inline void _poly_eval(const double[:, :] c, Py_ssize_t i, double z, double* v, double* dv) noexcept nogil:
    cdef Py_ssize_t j
    cdef double acc = 0.0, dacc = 0.0
    for j in range(c.shape[0] - 1, -1, -1):
        dacc = dacc * z + acc
        acc = acc * z + c[j, i]
    v[0] = acc
    dv[0] = dacc


cdef double _residual(const double[:] sub, const double[:] diag0, const double[:] sup,
                      const double[:] mass, const double[:, :] c, const double[:] b,
                      const double[:] z, double[:] G, double[:] J) noexcept nogil:
    cdef Py_ssize_t n = z.shape[0], i
    cdef double v, dv, r, res = 0.0
    for i in range(n):
        _poly_eval(c, i, z[i], &v, &dv)
        r = diag0[i] * z[i] + mass[i] * v - b[i]
        if i > 0:
            r += sub[i] * z[i - 1]
        if i < n - 1:
            r += sup[i] * z[i + 1]
        G[i] = r
        J[i] = diag0[i] + mass[i] * dv
        r = fabs(r / mass[i])
        if not isfinite(r):
            return r
        if r > res:
            res = r
    return res


def forward_poly_sweep(double[:] y0, double[:] sub, double[:] diag0, double[:] sup, double[:] mass,
                       double[:, :, :] coefs, double[:, :] load, double dt, double tol,
                       int max_iter, int max_backtrack, double blowup):
    cdef Py_ssize_t N = load.shape[0], n = load.shape[1], k, i
    Y_arr = np.zeros((N + 1, n))
    it_arr = np.zeros(N, dtype=np.int64)
    cdef double[:, :] Y = Y_arr
    cdef long long[:] iters = it_arr
    cdef double[:] b = np.empty(n), z = np.empty(n), zn = np.empty(n)
    cdef double[:] G = np.empty(n), J = np.empty(n), Gn = np.empty(n), Jn = np.empty(n)
    cdef double[:] delta = np.empty(n), negG = np.empty(n)
    cdef double[:, :] c
    cdef double scale, res, resn, alpha, zmax
    cdef int it, bt, tconst = coefs.shape[0] == 1
    for i in range(n):
        Y[0, i] = y0[i]
    with nogil:
        for k in range(1, N + 1):
            c = coefs[0] if tconst else coefs[k]
            scale = 0.0
            for i in range(n):
                b[i] = mass[i] / dt * Y[k - 1, i] + load[k - 1, i]
                if fabs(b[i] / mass[i]) > scale:
                    scale = fabs(b[i] / mass[i])
                z[i] = Y[k - 1, i]
            scale += 1.0
            res = _residual(sub, diag0, sup, mass, c, b, z, G, J)
            it = 0
            while res > tol * scale:
                if it >= max_iter:
                    with gil:
                        return Y_arr, it_arr, NEWTON_FAIL, k
                for i in range(n):
                    negG[i] = -G[i]
                if _gtsv(sub, J, sup, negG, delta) != 0:
                    with gil:
                        return Y_arr, it_arr, SINGULAR, k
                alpha = 1.0
                for bt in range(max_backtrack + 1):
                    for i in range(n):
                        zn[i] = z[i] + alpha * delta[i]
                    resn = _residual(sub, diag0, sup, mass, c, b, zn, Gn, Jn)
                    if resn < res or not isfinite(res):
                        break
                    alpha *= 0.5
                zmax = 0.0
                for i in range(n):
                    z[i] = zn[i]
                    G[i] = Gn[i]
                    J[i] = Jn[i]
                    if fabs(z[i]) > zmax:
                        zmax = fabs(z[i])
                res = resn
                it += 1
                if not isfinite(res) or zmax > blowup:
                    for i in range(n):
                        Y[k, i] = z[i]
                    with gil:
                        return Y_arr, it_arr, BLOWUP, k
            for i in range(n):
                Y[k, i] = z[i]
            iters[k - 1] = it
    return Y_arr, it_arr, OK, 0


def adjoint_sweep(double[:] sub, double[:] diag0, double[:] mass, double[:, :] dfdy,
                  double[:, :] rhs, double dt):
    cdef Py_ssize_t N = rhs.shape[0], n = rhs.shape[1], k, i
    Phi_arr = np.zeros((N + 1, n))
    cdef double[:, :] Phi = Phi_arr
    cdef double[:] d = np.empty(n), r = np.empty(n), x = np.empty(n), sup = np.empty(n)
    cdef double *work = <double*> malloc(n * sizeof(double))
    cdef int bad = 0
    for i in range(n):
        sup[i] = sub[i + 1] if i + 1 < n else 0.0
    with nogil:
        for k in range(N - 1, -1, -1):
            for i in range(n):
                d[i] = diag0[i] + mass[i] * dfdy[k, i]
                r[i] = mass[i] / dt * Phi[k + 1, i] + rhs[k, i]
            if _spd_thomas(sub, d, r, x, work) != 0:
                bad += 1
                _gtsv(sub, d, sup, r, x)
            for i in range(n):
                Phi[k, i] = x[i]
    free(work)
    return Phi_arr, bad


cdef double _wnorm(const double[:] v, const double[:] w) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(v.shape[0]):
        s += w[i] * v[i] * v[i]
    return sqrt(s)


cdef inline double _clip(double x, double lo, double hi) noexcept nogil:
    return lo if x < lo else (hi if x > hi else x)


def prox_ball_batch(double[:, :] V, double[:] w, double[:] thresh, double gamma):
    cdef Py_ssize_t S = V.shape[0], p = V.shape[1], s, i
    U_arr = np.zeros((S, p))
    cdef double[:, :] U = U_arr
    cdef double r, mag
    with nogil:
        for s in range(S):
            r = _wnorm(V[s], w)
            if r <= thresh[s]:
                continue
            mag = r - thresh[s]
            if mag > gamma:
                mag = gamma
            for i in range(p):
                U[s, i] = V[s, i] * (mag / r)
    return U_arr


cdef int _box_fixed_point(const double[:] v, const double[:] w, double c, double lo, double hi,
                          double tol, int max_iter, double[:] u, double[:] un) noexcept nogil:
    cdef Py_ssize_t p = v.shape[0], i
    cdef double r = _wnorm(v, w), nu, d, x
    cdef int it
    for i in range(p):
        u[i] = _clip(v[i] * (r - c) / r, lo, hi)
    for it in range(max_iter):
        nu = _wnorm(u, w)
        if nu == 0.0:
            return 0
        d = 0.0
        for i in range(p):
            x = 0.5 * u[i] + 0.5 * _clip(v[i] - c * u[i] / nu, lo, hi)
            d += w[i] * (x - u[i]) * (x - u[i])
            un[i] = x
        for i in range(p):
            u[i] = un[i]
        if sqrt(d) <= tol * (nu if nu > 1.0 else 1.0):
            return 1
    return 0


cdef int _box_dykstra(const double[:] v, const double[:] w, double c, double lo, double hi,
                      double tol, int max_sweeps, double[:] x, double[:] p_, double[:] q,
                      double[:] y, double[:] z) noexcept nogil:
    cdef Py_ssize_t n = v.shape[0], i
    cdef double r, s, d, xn, nx
    cdef int it
    for i in range(n):
        x[i] = v[i]
        p_[i] = 0.0
        q[i] = 0.0
    for it in range(max_sweeps):
        for i in range(n):
            z[i] = x[i] + p_[i]
        r = _wnorm(z, w)
        s = (r - c) / r if r > c else 0.0
        for i in range(n):
            y[i] = z[i] * s
            p_[i] = z[i] - y[i]
        d = 0.0
        for i in range(n):
            xn = _clip(y[i] + q[i], lo, hi)
            q[i] = y[i] + q[i] - xn
            d += w[i] * (xn - x[i]) * (xn - x[i])
            x[i] = xn
        nx = _wnorm(x, w)
        if sqrt(d) <= tol * (nx if nx > 1.0 else 1.0):
            return 1
    return 0


def prox_box_batch(double[:, :] V, double[:] w, double[:] thresh, double alpha, double beta,
                   double tol, int max_iter, int max_sweeps):
    cdef Py_ssize_t S = V.shape[0], p = V.shape[1], s, i
    U_arr = np.zeros((S, p))
    fl_arr = np.zeros(S, dtype=np.int64)
    cdef double[:, :] U = U_arr
    cdef long long[:] flags = fl_arr
    cdef double[:] a = np.empty(p), b = np.empty(p), c = np.empty(p), d = np.empty(p), e = np.empty(p)
    cdef double r
    with nogil:
        for s in range(S):
            r = _wnorm(V[s], w)
            if r <= thresh[s]:
                continue
            if _box_fixed_point(V[s], w, thresh[s], alpha, beta, tol, max_iter, U[s], a):
                continue
            if _box_dykstra(V[s], w, thresh[s], alpha, beta, tol, max_sweeps, U[s], a, b, c, d):
                flags[s] = 1
            else:
                flags[s] = 2
    return U_arr, fl_arr

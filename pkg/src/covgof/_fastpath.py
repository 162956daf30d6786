"""Numba kernels for the per-replicate hot path.

The bootstrap engines refit the random intercept/slope null model and a
GCV-selected penalized mean spline inside every replicate; these kernels
keep that cost in the tens of microseconds.

The null likelihood is evaluated from per-subject sufficient statistics.
With Z_i the (J_i, 2) design [1, t_ij], only ZᵀZ, Zᵀr, rᵀr and J_i enter
the marginal likelihood, so one row of ``S`` per subject suffices:

    S[i] = [J, sum t, sum t², sum r, sum t·r, sum r²]

The error variance is profiled out: with D = sigma² · L Lᵀ (L the
log-Cholesky factor being optimized), the optimal sigma² has a closed
form, leaving a 3-parameter problem solved by BFGS with backtracking.
"""

import numpy as np
from numba import njit

LOG2PI = 1.8378770664093453


@njit(cache=True)
def uni_nll_grad(phi, S, n_obs, floor):
    """Profiled negative log-likelihood and gradient.

    phi = (a, c, d) with L = [[e^a, 0], [c, e^d]] the Cholesky factor of
    D / sigma².  Returns (f, grad[3], sigma2_hat).
    """
    N = S.shape[0]
    g = np.empty(3)
    # overflow guard: far outside any plausible region, report +inf so the
    # line search backtracks (exp(60)^2 is still comfortably finite)
    if (not np.isfinite(phi[0]) or not np.isfinite(phi[1])
            or not np.isfinite(phi[2]) or abs(phi[0]) > 60.0
            or abs(phi[2]) > 60.0 or abs(phi[1]) > 1e25):
        g[:] = 0.0
        return np.inf, g, floor
    la = np.exp(phi[0])
    c = phi[1]
    ld = np.exp(phi[2])

    logdet_sum = 0.0
    Q = 0.0
    s1_11 = 0.0; s1_21 = 0.0; s1_22 = 0.0
    s2_11 = 0.0; s2_21 = 0.0; s2_22 = 0.0

    for i in range(N):
        J = S[i, 0]; St = S[i, 1]; Stt = S[i, 2]
        Sr = S[i, 3]; Str = S[i, 4]; Srr = S[i, 5]

        # M = I + Lᵀ (ZᵀZ) L, 2x2 symmetric, eigenvalues >= 1
        M11 = 1.0 + la * la * J + 2.0 * la * c * St + c * c * Stt
        M12 = ld * (la * St + c * Stt)
        M22 = 1.0 + ld * ld * Stt
        det = M11 * M22 - M12 * M12
        if not (det > 0.0) or not np.isfinite(det):
            g[:] = 0.0
            return np.inf, g, floor
        P11 = M22 / det
        P12 = -M12 / det
        P22 = M11 / det

        v1 = la * Sr + c * Str
        v2 = ld * Str
        w1 = P11 * v1 + P12 * v2
        w2 = P12 * v1 + P22 * v2

        logdet_sum += np.log(det)
        Q += Srr - (v1 * w1 + v2 * w2)

        # B = (ZᵀZ) L
        B11 = J * la + St * c
        B12 = St * ld
        B21 = St * la + Stt * c
        B22 = Stt * ld

        # d(logdet)/dL needs the lower triangle of B P
        s1_11 += B11 * P11 + B12 * P12
        s1_21 += B21 * P11 + B22 * P12
        s1_22 += B21 * P12 + B22 * P22

        # d(quad)/dL needs u wᵀ - (B w) wᵀ
        Bw1 = B11 * w1 + B12 * w2
        Bw2 = B21 * w1 + B22 * w2
        s2_11 += Sr * w1 - Bw1 * w1
        s2_21 += Str * w1 - Bw2 * w1
        s2_22 += Str * w2 - Bw2 * w2

    n = n_obs
    sigma2 = Q / n
    if sigma2 >= floor:
        f = 0.5 * (logdet_sum + n * np.log(sigma2) + n + n * LOG2PI)
        scale = n / Q
    else:
        f = 0.5 * (logdet_sum + n * np.log(floor) + Q / floor + n * LOG2PI)
        scale = 1.0 / floor
        sigma2 = floor
    x11 = s1_11 - scale * s2_11
    x21 = s1_21 - scale * s2_21
    x22 = s1_22 - scale * s2_22
    # objective and gradient are per subject, like the multivariate fit
    g[0] = la * x11 / N
    g[1] = x21 / N
    g[2] = ld * x22 / N
    f /= N
    if not np.isfinite(f):
        f = np.inf
        g[:] = 0.0
    return f, g, sigma2


@njit(cache=True)
def _bfgs3(x0, S, n_obs, floor, gtol, maxiter):
    """BFGS with Armijo backtracking for the 3-parameter profile problem.

    Returns (x, f, sigma2, converged, grad_inf_norm).
    """
    x = x0.copy()
    f, g, sig2 = uni_nll_grad(x, S, n_obs, floor)
    H = np.eye(3)
    converged = False
    for _ in range(maxiter):
        gnorm = max(abs(g[0]), abs(g[1]), abs(g[2]))
        if gnorm < gtol:
            converged = True
            break
        p = -H @ g
        gp = g[0] * p[0] + g[1] * p[1] + g[2] * p[2]
        if gp >= 0.0:  # not a descent direction: reset
            H = np.eye(3)
            p = -g
            gp = -(g[0] ** 2 + g[1] ** 2 + g[2] ** 2)
        step = 1.0
        ok = False
        fn = f
        gn = g
        sn = sig2
        for _ls in range(40):
            xn = x + step * p
            fn, gn, sn = uni_nll_grad(xn, S, n_obs, floor)
            if np.isfinite(fn) and fn <= f + 1e-4 * step * gp:
                ok = True
                break
            step *= 0.5
        if not ok:
            break
        s = step * p
        y = gn - g
        sy = s[0] * y[0] + s[1] * y[1] + s[2] * y[2]
        ss = np.sqrt(s[0] ** 2 + s[1] ** 2 + s[2] ** 2)
        yy = np.sqrt(y[0] ** 2 + y[1] ** 2 + y[2] ** 2)
        if sy > 1e-10 * ss * yy:
            rho = 1.0 / sy
            Hy = H @ y
            yHy = y[0] * Hy[0] + y[1] * Hy[1] + y[2] * Hy[2]
            for a_ in range(3):
                for b_ in range(3):
                    H[a_, b_] += (
                        (1.0 + rho * yHy) * rho * s[a_] * s[b_]
                        - rho * (s[a_] * Hy[b_] + Hy[a_] * s[b_])
                    )
        x = x + s
        f = fn
        g = gn
        sig2 = sn
    gnorm = max(abs(g[0]), abs(g[1]), abs(g[2]))
    if gnorm < gtol:
        converged = True
    return x, f, sig2, converged, gnorm


@njit(cache=True)
def uni_fit(S, n_obs, starts, floor, gtol, maxiter):
    """Multi-start BFGS fit. Best converged start wins; if none converged,
    the best overall is returned with ``converged`` False.

    Returns (phi[3], nll, sigma2, converged, grad_inf_norm).
    """
    best_x = starts[0].copy()
    best_f = np.inf
    best_sig = floor
    best_conv = False
    best_gn = np.inf
    for s_idx in range(starts.shape[0]):
        x, f, sig2, conv, gn = _bfgs3(
            starts[s_idx], S, n_obs, floor, gtol, maxiter
        )
        better = (conv and not best_conv) or (
            (conv == best_conv) and f < best_f
        )
        if better:
            best_x = x
            best_f = f
            best_sig = sig2
            best_conv = conv
            best_gn = gn
    return best_x, best_f, best_sig, best_conv, best_gn


@njit(cache=True)
def chol_lower(A, L):
    """Lower Cholesky of A into L. Returns False if not positive definite."""
    n = A.shape[0]
    for j in range(n):
        d = A[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if d <= 0.0:
            return False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    return True


@njit(cache=True)
def chol_solve_inplace(L, b):
    """Solve (L Lᵀ) x = b in place of b (b 1-D)."""
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * b[k]
        b[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * b[k]
        b[i] = s / L[i, i]


@njit(cache=True)
def gcv_factorize(BtB, P, lams):
    """Cholesky factors of BᵀB + lam_j P and their effective dfs.

    Returns (L_stack, edf, ok) over the lambda grid; edf_j is
    tr((BᵀB + lam_j P)^{-1} BᵀB).
    """
    m = lams.size
    H = BtB.shape[0]
    Ls = np.zeros((m, H, H))
    edf = np.zeros(m)
    ok = np.zeros(m, dtype=np.bool_)
    col = np.empty(H)
    for j in range(m):
        K = BtB + lams[j] * P
        if not chol_lower(K, Ls[j]):
            continue
        ok[j] = True
        tr = 0.0
        for i in range(H):
            for r in range(H):
                col[r] = BtB[r, i]
            chol_solve_inplace(Ls[j], col)
            tr += col[i]
        edf[j] = tr
    return Ls, edf, ok


@njit(cache=True)
def gcv_select(Ls, edf, ok, BtB, Bty, yty, n_obs):
    """Pick the GCV-best lambda index and return its coefficients.

    Returns (coef, index, edf_best); index is -1 when no lambda yields a
    positive-definite system.
    """
    m = edf.size
    H = Bty.size
    best = -1
    best_gcv = np.inf
    best_c = np.zeros(H)
    c = np.empty(H)
    for j in range(m):
        if not ok[j]:
            continue
        denom = n_obs - edf[j]
        if denom <= 0.0:
            continue
        for r in range(H):
            c[r] = Bty[r]
        chol_solve_inplace(Ls[j], c)
        fit = 0.0
        quad = 0.0
        for r in range(H):
            fit += c[r] * Bty[r]
            s = 0.0
            for q in range(H):
                s += BtB[r, q] * c[q]
            quad += c[r] * s
        rss = yty - 2.0 * fit + quad
        if rss < 0.0:
            rss = 0.0
        gcv = n_obs * rss / (denom * denom)
        if gcv < best_gcv:
            best_gcv = gcv
            best = j
            best_c[:] = c
    return best_c, best, edf[best] if best >= 0 else 0.0

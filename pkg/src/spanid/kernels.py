"""Time-stepping sweeps and their discrete adjoints.

All kernels work on the first-order state ``X = [u; v]`` of size ``2n`` with
``n = nr + nb`` (rail modes first, then bridge DOFs). Time-dependent inputs
are sampled on a half-step grid: entry ``2*s`` is ``t_s`` and ``2*s + 1`` is
``t_s + h/2``. A sweep over ``nsteps`` steps starting at global step ``g0``
reads entries ``2*g0 .. 2*(g0 + nsteps)``.

Adjoint sweeps return the state adjoint at the sweep start and the outer
product sums ``P_u, P_v, P_a`` (each ``nb x nb``) from which the caller forms
the sensitivities with respect to the bridge stiffness, damping and mass
blocks. Forward sweeps store a checkpoint every ``every`` steps; the adjoint
recomputes one segment at a time.

Compiled with numba unless ``SPANID_DISABLE_NUMBA`` is set (see ``_accel``).
"""

import numpy as np

from ._accel import maybe_njit

# two-stage Radau IIA
RADAU_A = np.array([[5.0 / 12.0, -1.0 / 12.0], [3.0 / 4.0, 1.0 / 4.0]])
RADAU_B = np.array([3.0 / 4.0, 1.0 / 4.0])
RADAU_C = np.array([1.0 / 3.0, 1.0])
RADAU_A2 = RADAU_A @ RADAU_A
RADAU_BA = RADAU_B @ RADAU_A


@maybe_njit
def _rhs(X, Sr, B, rinv, pr, n, nr, out):
    out[:n] = X[n:]
    fr = pr - Sr @ X
    out[n:n + nr] = rinv @ fr
    out[n + nr:] = -(B @ X)


@maybe_njit
def _rk4_step(X, Sr, B, Rinv, Pr, i, h, n, nr, k1, k2, k3, k4, Y):
    _rhs(X, Sr, B, Rinv[i], Pr[i], n, nr, k1)
    Y[:] = X + (0.5 * h) * k1
    _rhs(Y, Sr, B, Rinv[i + 1], Pr[i + 1], n, nr, k2)
    Y[:] = X + (0.5 * h) * k2
    _rhs(Y, Sr, B, Rinv[i + 1], Pr[i + 1], n, nr, k3)
    Y[:] = X + h * k3
    _rhs(Y, Sr, B, Rinv[i + 2], Pr[i + 2], n, nr, k4)


@maybe_njit
def rk4_forward(X0, Sr, B, Rinv, Pr, h, g0, nsteps, obs, every):
    """Classical RK-4 on ``X' = [v; M(t)^-1 (p(t) - K u - C v)]``.

    ``Sr`` holds the rail rows ``[K_r | C_r]`` (nr x 2n), ``B`` the bridge rows
    premultiplied by the bridge mass inverse (nb x 2n), ``Rinv``/``Pr`` the
    rail-block mass inverses and rail forces on the half-step grid.
    Returns the final state, the observed state entries after every step
    (``nsteps x len(obs)``) and the checkpoints.
    """
    n2 = X0.shape[0]
    n = n2 // 2
    nr = Sr.shape[0]
    nobs = obs.shape[0]
    out = np.empty((nsteps, nobs))
    ck = np.empty((nsteps // every + 1, n2))
    X = X0.copy()
    k1 = np.empty(n2)
    k2 = np.empty(n2)
    k3 = np.empty(n2)
    k4 = np.empty(n2)
    Y = np.empty(n2)
    for j in range(nsteps):
        if j % every == 0:
            ck[j // every] = X
        _rk4_step(X, Sr, B, Rinv, Pr, 2 * (g0 + j), h, n, nr, k1, k2, k3, k4, Y)
        X += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for o in range(nobs):
            out[j, o] = X[obs[o]]
    return X, out, ck


@maybe_njit
def _rhs_transpose(kb, SrT, BT, rinv, n, nr, out):
    # out = J^T kb with J the Jacobian of _rhs
    out[:n] = 0.0
    out[n:] = kb[:n]
    mu = rinv @ kb[n:n + nr]
    out -= SrT @ mu
    out -= BT @ kb[n + nr:]


@maybe_njit
def rk4_backward(ck, seeds, lam_end, Sr, B, Rinv, Pr, h, g0, nsteps, obs, every, want_cm):
    """Reverse sweep matching :func:`rk4_forward`.

    ``seeds[j]`` is dL/d(observed entries of X after step j). Returns
    ``(dL/dX0, P_u, P_v, P_a)`` where ``P_* = sum over stages of
    kbar_B (x) (u_B | v_B | a_B)``; the bridge-block sensitivities are
    ``-W_B P_u`` (stiffness), ``-W_B P_v`` (damping), ``-W_B P_a`` (mass).
    ``P_v``/``P_a`` are only accumulated when ``want_cm`` is true.
    """
    n2 = ck.shape[1]
    n = n2 // 2
    nr = Sr.shape[0]
    nb = n - nr
    nobs = obs.shape[0]
    SrT = np.ascontiguousarray(Sr.T)
    BT = np.ascontiguousarray(B.T)
    lam = lam_end.copy()
    Pu = np.zeros((nb, nb))
    Pv = np.zeros((nb, nb))
    Pa = np.zeros((nb, nb))
    Xs = np.empty((every + 1, n2))
    Ks = np.empty((every, 4, n2))
    Y = np.empty(n2)
    kb1 = np.empty(n2)
    kb2 = np.empty(n2)
    kb3 = np.empty(n2)
    kb4 = np.empty(n2)
    Yb = np.empty(n2)
    bufK = np.empty((4 * every, nb))
    bufU = np.empty((4 * every, nb))
    bufV = np.empty((4 * every, nb))
    bufA = np.empty((4 * every, nb))
    nseg = (nsteps + every - 1) // every
    for s in range(nseg - 1, -1, -1):
        j0 = s * every
        j1 = min(nsteps, j0 + every)
        Xs[0] = ck[s]
        for j in range(j0, j1):
            q = j - j0
            _rk4_step(Xs[q], Sr, B, Rinv, Pr, 2 * (g0 + j), h, n, nr,
                      Ks[q, 0], Ks[q, 1], Ks[q, 2], Ks[q, 3], Y)
            Xs[q + 1] = Xs[q] + (h / 6.0) * (Ks[q, 0] + 2.0 * Ks[q, 1] + 2.0 * Ks[q, 2] + Ks[q, 3])
        cnt = 0
        for j in range(j1 - 1, j0 - 1, -1):
            q = j - j0
            i = 2 * (g0 + j)
            for o in range(nobs):
                lam[obs[o]] += seeds[j, o]
            X = Xs[q]
            kb4[:] = (h / 6.0) * lam
            kb3[:] = (h / 3.0) * lam
            kb2[:] = (h / 3.0) * lam
            kb1[:] = (h / 6.0) * lam
            Xbar = lam.copy()
            # stage 4: Y4 = X + h k3
            _rhs_transpose(kb4, SrT, BT, Rinv[i + 2], n, nr, Yb)
            Xbar += Yb
            kb3 += h * Yb
            Y[:] = X + h * Ks[q, 2]
            bufK[cnt] = kb4[n + nr:]
            bufU[cnt] = Y[nr:n]
            if want_cm:
                bufV[cnt] = Y[n + nr:]
                bufA[cnt] = Ks[q, 3, n + nr:]
            cnt += 1
            # stage 3: Y3 = X + h/2 k2
            _rhs_transpose(kb3, SrT, BT, Rinv[i + 1], n, nr, Yb)
            Xbar += Yb
            kb2 += (0.5 * h) * Yb
            Y[:] = X + (0.5 * h) * Ks[q, 1]
            bufK[cnt] = kb3[n + nr:]
            bufU[cnt] = Y[nr:n]
            if want_cm:
                bufV[cnt] = Y[n + nr:]
                bufA[cnt] = Ks[q, 2, n + nr:]
            cnt += 1
            # stage 2: Y2 = X + h/2 k1
            _rhs_transpose(kb2, SrT, BT, Rinv[i + 1], n, nr, Yb)
            Xbar += Yb
            kb1 += (0.5 * h) * Yb
            Y[:] = X + (0.5 * h) * Ks[q, 0]
            bufK[cnt] = kb2[n + nr:]
            bufU[cnt] = Y[nr:n]
            if want_cm:
                bufV[cnt] = Y[n + nr:]
                bufA[cnt] = Ks[q, 1, n + nr:]
            cnt += 1
            # stage 1: Y1 = X
            _rhs_transpose(kb1, SrT, BT, Rinv[i], n, nr, Yb)
            Xbar += Yb
            bufK[cnt] = kb1[n + nr:]
            bufU[cnt] = X[nr:n]
            if want_cm:
                bufV[cnt] = X[n + nr:]
                bufA[cnt] = Ks[q, 0, n + nr:]
            cnt += 1
            lam = Xbar
        KT = np.ascontiguousarray(bufK[:cnt].T)
        Pu += KT @ np.ascontiguousarray(bufU[:cnt])
        if want_cm:
            Pv += KT @ np.ascontiguousarray(bufV[:cnt])
            Pa += KT @ np.ascontiguousarray(bufA[:cnt])
    return lam, Pu, Pv, Pa


@maybe_njit
def _radau_solve(r, Sinv, Z, G, D, n, nr, out):
    # (S0 + E blkdiag(D, D) E^T)^-1 r via the push-through identity;
    # E selects the rail rows of both stage blocks.
    out[:] = Sinv @ r
    if np.any(D != 0.0):
        m = 2 * nr
        D2 = np.zeros((m, m))
        D2[:nr, :nr] = D
        D2[nr:, nr:] = D
        yE = np.empty(m)
        yE[:nr] = out[:nr]
        yE[nr:] = out[n:n + nr]
        mat = np.eye(m) + D2 @ G
        w = np.linalg.solve(mat, D2 @ yE)
        out -= Z @ w


@maybe_njit
def _radau_stages(X, K, C, Sinv, Z, G, D, pr, h, n, nr, c1, c2, x):
    u = X[:n]
    v = X[n:]
    Kv = K @ v
    base = -(K @ u) - C @ v
    base[:nr] += pr
    r = np.empty(2 * n)
    r[:n] = base - (h * c1) * Kv
    r[n:] = base - (h * c2) * Kv
    _radau_solve(r, Sinv, Z, G, D, n, nr, x)


@maybe_njit
def radau_forward(X0, K, C, Sinv, Z, G, dM, Pr, h, g0, nsteps, obs, every, coef):
    """Two-stage Radau IIA with force and mass frozen at the step start.

    Solves the stage accelerations from
    ``(I (x) M_n + h A (x) C + h^2 A^2 (x) K) a = 1 (x) (p_n - C v) - K (u + h c v)``.
    ``Sinv`` is the inverse of that matrix without the moving axle mass;
    ``Z = Sinv E`` and ``G = E^T Sinv E`` carry the rail-row update used for
    ``dM`` (the per-step rail mass increment). ``coef`` packs
    ``[c1, c2, b1, b2, (bA)_1, (bA)_2]``.
    """
    n2 = X0.shape[0]
    n = n2 // 2
    nr = dM.shape[1]
    nobs = obs.shape[0]
    c1, c2, b1, b2, ba1, ba2 = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    out = np.empty((nsteps, nobs))
    ck = np.empty((nsteps // every + 1, n2))
    X = X0.copy()
    x = np.empty(2 * n)
    for j in range(nsteps):
        if j % every == 0:
            ck[j // every] = X
        i = 2 * (g0 + j)
        _radau_stages(X, K, C, Sinv, Z, G, dM[i], Pr[i], h, n, nr, c1, c2, x)
        a1 = x[:n]
        a2 = x[n:]
        X[:n] += h * X[n:] + (h * h) * (ba1 * a1 + ba2 * a2)
        X[n:] += h * (b1 * a1 + b2 * a2)
        for o in range(nobs):
            out[j, o] = X[obs[o]]
    return X, out, ck


@maybe_njit
def radau_backward(ck, seeds, lam_end, K, C, Sinv, Z, G, SinvT, ZT, GT, dM, Pr, h, g0,
                   nsteps, obs, every, coef, A, A2, want_cm):
    """Reverse sweep matching :func:`radau_forward`.

    Returns ``(dL/dX0, P_u, P_v, P_a)`` with ``P_* = sum over steps and stages
    of rho_B (x) (U_B | V_B | a_B)`` where ``rho`` solves the transposed stage
    system and ``U``, ``V`` are the stage displacement and velocity. The
    bridge-block sensitivities are ``-P_u`` (stiffness), ``-P_v`` (damping),
    ``-P_a`` (mass).
    """
    n2 = ck.shape[1]
    n = n2 // 2
    nr = dM.shape[1]
    nb = n - nr
    nobs = obs.shape[0]
    c1, c2, b1, b2, ba1, ba2 = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    lam = lam_end.copy()
    Pu = np.zeros((nb, nb))
    Pv = np.zeros((nb, nb))
    Pa = np.zeros((nb, nb))
    Xs = np.empty((every + 1, n2))
    As = np.empty((every, 2 * n))
    x = np.empty(2 * n)
    abar = np.empty(2 * n)
    rho = np.empty(2 * n)
    bufR = np.empty((2 * every, nb))
    bufU = np.empty((2 * every, nb))
    bufV = np.empty((2 * every, nb))
    bufA = np.empty((2 * every, nb))
    nseg = (nsteps + every - 1) // every
    for s in range(nseg - 1, -1, -1):
        j0 = s * every
        j1 = min(nsteps, j0 + every)
        Xs[0] = ck[s]
        for j in range(j0, j1):
            q = j - j0
            i = 2 * (g0 + j)
            _radau_stages(Xs[q], K, C, Sinv, Z, G, dM[i], Pr[i], h, n, nr, c1, c2, x)
            As[q] = x
            Xs[q + 1, :n] = Xs[q, :n] + h * Xs[q, n:] + (h * h) * (ba1 * x[:n] + ba2 * x[n:])
            Xs[q + 1, n:] = Xs[q, n:] + h * (b1 * x[:n] + b2 * x[n:])
        cnt = 0
        for j in range(j1 - 1, j0 - 1, -1):
            q = j - j0
            i = 2 * (g0 + j)
            for o in range(nobs):
                lam[obs[o]] += seeds[j, o]
            u = Xs[q, :n]
            v = Xs[q, n:]
            a1 = As[q, :n]
            a2 = As[q, n:]
            ub = lam[:n]
            vb = lam[n:]
            abar[:n] = (h * h * ba1) * ub + (h * b1) * vb
            abar[n:] = (h * h * ba2) * ub + (h * b2) * vb
            _radau_solve(abar, SinvT, ZT, GT, dM[i], n, nr, rho)
            r1 = rho[:n]
            r2 = rho[n:]
            rs = r1 + r2
            newlam = np.empty(n2)
            newlam[:n] = ub - K @ rs
            newlam[n:] = vb + h * ub - C @ rs - h * (K @ (c1 * r1 + c2 * r2))
            # stage displacement/velocity for the parameter sensitivities
            bufR[cnt] = r1[nr:]
            bufU[cnt] = (u + (h * c1) * v + (h * h) * (A2[0, 0] * a1 + A2[0, 1] * a2))[nr:]
            if want_cm:
                bufV[cnt] = (v + h * (A[0, 0] * a1 + A[0, 1] * a2))[nr:]
                bufA[cnt] = a1[nr:]
            cnt += 1
            bufR[cnt] = r2[nr:]
            bufU[cnt] = (u + (h * c2) * v + (h * h) * (A2[1, 0] * a1 + A2[1, 1] * a2))[nr:]
            if want_cm:
                bufV[cnt] = (v + h * (A[1, 0] * a1 + A[1, 1] * a2))[nr:]
                bufA[cnt] = a2[nr:]
            cnt += 1
            lam = newlam
        RT = np.ascontiguousarray(bufR[:cnt].T)
        Pu += RT @ np.ascontiguousarray(bufU[:cnt])
        if want_cm:
            Pv += RT @ np.ascontiguousarray(bufV[:cnt])
            Pa += RT @ np.ascontiguousarray(bufA[:cnt])
    return lam, Pu, Pv, Pa

"""Per-element constitutive model built on two matrix projections.

Each tetrahedron stores a pair of nonnegative coefficients (gamma_s, gamma_v).
Its elastic energy penalizes the Frobenius distance of the deformation
gradient F to the rotation group (shape term) and to the volume-preserving
matrices with unit determinant (volume term):

    E = gamma_s * vol * |F - R(F)|^2 + gamma_v * vol * |F - V(F)|^2

R(F) is the polar rotation.  V(F) is the closest unit-determinant matrix,
found by adjusting the singular values of F under a product constraint.
Both projections and their derivatives with respect to F live here; the
derivatives feed the equilibrium Jacobians used during material fitting.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

# floor applied to the singular values of the volume projection
SV_FLOOR = 0.01
# smallest admissible material coefficient during fitting
GAMMA_FLOOR = 1e-3

_NEWTON_ITERS = 20
_NEWTON_TOL = 1e-12


# ---------------------------------------------------------------------------
# rotation utilities


def skew(v):
    """Map a 3-vector to the skew-symmetric matrix with that axis."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(Omega):
    return np.array([Omega[2, 1], Omega[0, 2], Omega[1, 0]])


def rotation_exp(Omega):
    """Closed-form matrix exponential of a skew-symmetric matrix."""
    w = unskew(Omega)
    theta = float(np.linalg.norm(w))
    if theta < 1e-8:
        # series expansion keeps full accuracy near zero angle
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * Omega + b * (Omega @ Omega)


def rotation_log(R):
    """Skew-symmetric logarithm of a rotation matrix.

    The angle lands in [0, pi].  Near pi the antisymmetric part of R loses
    the axis, so it is recovered from the symmetric part instead; the axis
    sign is then fixed by making its largest-magnitude component positive,
    which keeps the result deterministic.
    """
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arccos(np.clip(c, -1.0, 1.0)))
    if theta < 1e-10:
        return 0.5 * (R - R.T)
    if np.pi - theta > 1e-6:
        return theta / (2.0 * np.sin(theta)) * (R - R.T)
    # R ~ 2 n n^T - I: take the strongest column of (R + I)/2 as the axis
    B = 0.5 * (R + np.eye(3))
    k = int(np.argmax(np.diag(B)))
    n = B[:, k]
    n = n / np.linalg.norm(n)
    if n[int(np.argmax(np.abs(n)))] < 0.0:
        n = -n
    return theta * skew(n)


def minimal_rotation(a, b):
    """Rotation with the smallest angle taking unit vector a to unit vector b."""
    c = float(np.clip(np.dot(a, b), -1.0, 1.0))
    w = np.cross(a, b)
    s = float(np.linalg.norm(w))
    if s < 1e-12:
        if c > 0.0:
            return np.eye(3)
        # antiparallel: rotate by pi about any axis orthogonal to a
        aux = np.zeros(3)
        aux[int(np.argmin(np.abs(a)))] = 1.0
        axis = np.cross(a, aux)
        axis /= np.linalg.norm(axis)
        return rotation_exp(np.pi * skew(axis))
    K = skew(w / s)
    theta = float(np.arctan2(s, c))
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


# ---------------------------------------------------------------------------
# SVD with the rotation-variant sign convention


def svd_rv(F):
    """SVD F = U diag(s) W^T with U and W proper rotations.

    Reflections are pushed into the singular values, so the last entry of s
    turns negative exactly when det F < 0.
    """
    U, s, Wt = np.linalg.svd(F)
    W = Wt.T.copy()
    s = s.copy()
    if np.linalg.det(U) < 0.0:
        U = U.copy()
        U[:, 2] *= -1.0
        s[2] = -s[2]
    if np.linalg.det(W) < 0.0:
        W[:, 2] *= -1.0
        s[2] = -s[2]
    return U, s, W


def svd_rv_batch(F):
    U, s, Wt = np.linalg.svd(F)
    W = np.ascontiguousarray(np.swapaxes(Wt, -1, -2))
    s = s.copy()
    flip = np.linalg.det(U) < 0.0
    U[flip, :, 2] *= -1.0
    s[flip, 2] *= -1.0
    flip = np.linalg.det(W) < 0.0
    W[flip, :, 2] *= -1.0
    s[flip, 2] *= -1.0
    return U, s, W


def project_so3(F):
    """Closest rotation to F in the Frobenius norm.

    Well-defined for every finite F; a vanishing F maps to the identity by
    convention (any rotation is equally close, so we pick a fixed one).
    """
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite deformation gradient")
    if np.linalg.norm(F) < 1e-300:
        return np.eye(3)
    U, _, W = svd_rv(F)
    return U @ W.T


# ---------------------------------------------------------------------------
# volume projection: singular-value optimization under a product constraint


def _sl3_p(s):
    return np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])


def _sl3_residual(sigma, s, lam, free):
    p = _sl3_p(s)
    r = np.zeros(4)
    r[:3] = np.where(free, s - sigma + lam * p, 0.0)
    r[3] = s[0] * s[1] * s[2] - 1.0
    return r


def _sl3_newton_free(sigma, s0, lam0, free, iters=_NEWTON_ITERS):
    """Newton iteration on the stationarity system with some entries frozen.

    Free entries satisfy s_i - sigma_i + lam * prod_{k != i} s_k = 0, frozen
    ones keep their value, and the full product must equal one.
    """
    s = s0.copy()
    lam = lam0
    idx = np.flatnonzero(free)
    nf = idx.size
    if nf == 0:
        return s, lam, False
    for _ in range(iters):
        r = _sl3_residual(sigma, s, lam, free)
        rn = np.max(np.abs(np.concatenate([r[idx], r[3:]])))
        if rn < _NEWTON_TOL:
            return s, lam, True
        p = _sl3_p(s)
        J = np.zeros((nf + 1, nf + 1))
        for a, i in enumerate(idx):
            for b, j in enumerate(idx):
                J[a, b] = 1.0 if i == j else lam * s[3 - i - j]
            J[a, nf] = p[i]
            J[nf, a] = p[i]
        rhs = -np.concatenate([r[idx], r[3:]])
        try:
            delta = np.linalg.solve(J, rhs)
        except np.linalg.LinAlgError:
            return s, lam, False
        # damped update, retried with shorter steps if the residual grows
        step = 1.0
        for _try in range(6):
            s_new = s.copy()
            s_new[idx] = s[idx] + step * delta[:nf]
            lam_new = lam + step * delta[nf]
            r_new = _sl3_residual(sigma, s_new, lam_new, free)
            rn_new = np.max(np.abs(np.concatenate([r_new[idx], r_new[3:]])))
            if rn_new < rn or rn_new < _NEWTON_TOL:
                break
            step *= 0.5
        s, lam = s_new, lam_new
    r = _sl3_residual(sigma, s, lam, free)
    ok = np.max(np.abs(np.concatenate([r[idx], r[3:]]))) < 1e-10
    return s, lam, ok


def _sl3_solve_clamping(sigma, s_init, lam_init):
    """Run the free Newton solve, clamping floor violations between rounds."""
    free = np.ones(3, dtype=bool)
    s = s_init.copy()
    lam = lam_init
    for _round in range(3):
        s = np.where(free, s, SV_FLOOR)
        s, lam, ok = _sl3_newton_free(sigma, s, lam, free)
        if not ok:
            return None
        viol = free & (s < SV_FLOOR - 1e-12)
        if not np.any(viol):
            return s, lam, ~free
        free = free & ~viol
        if np.sum(free) == 1:
            # the remaining value is fixed by the product constraint
            i = int(np.flatnonzero(free)[0])
            s = np.full(3, SV_FLOOR)
            s[i] = 1.0 / (SV_FLOOR * SV_FLOOR)
            p = _sl3_p(s)
            lam = (sigma[i] - s[i]) / p[i]
            return s, lam, ~free
    return None


def sl3_sigma_project(sigma):
    """Closest singular-value triple with unit product and floored entries.

    Minimizes |s - sigma|^2 subject to s1*s2*s3 = 1 and s_i >= SV_FLOOR.
    Several Newton starts guard against stray stationary points; the winner
    by objective value is returned together with its multiplier and the
    clamp pattern.  Returns (s, lam, clamped, ok).
    """
    sigma = np.asarray(sigma, dtype=float)
    starts = [np.clip(sigma, SV_FLOOR, None), np.ones(3)]
    prod = float(np.prod(sigma))
    if prod > 1e-12:
        starts.append(np.clip(sigma / np.cbrt(prod), SV_FLOOR, None))
    if prod > 1.0:
        # large products admit a cheaper stationary branch that keeps two
        # values near sigma and pays the whole constraint on the smallest
        j = int(np.argmin(sigma))
        others = float(np.prod(np.delete(sigma, j)))
        if others > 1e-12:
            s0 = np.clip(sigma, SV_FLOOR, None)
            s0[j] = max(1.0 / others, SV_FLOOR)
            starts.append(s0)
    best = None
    for s0 in starts:
        p = _sl3_p(s0)
        denom = float(p @ p)
        lam0 = (float(np.prod(s0)) - 1.0) / denom if denom > 1e-300 else 0.0
        out = _sl3_solve_clamping(sigma, s0, lam0)
        if out is None:
            continue
        s, lam, clamped = out
        if np.min(s) < SV_FLOOR - 1e-9 or abs(np.prod(s) - 1.0) > 1e-8:
            continue
        obj = float(np.sum((s - sigma) ** 2))
        if best is None or obj < best[0] - 1e-15:
            best = (obj, s, lam, clamped)
    if best is not None:
        _, s, lam, clamped = best
        return s, lam, clamped, True
    # fallback: uniform scaling onto the constraint, floored and renormalized
    s = np.abs(sigma)
    s = np.clip(s, SV_FLOOR, None)
    for _ in range(3):
        s = np.clip(s / np.cbrt(np.prod(s)), SV_FLOOR, None)
    log.warning("volume projection Newton failed for sigma=%s, using uniform scaling", sigma)
    return s, 0.0, s <= SV_FLOOR, False


def project_sl3(F):
    """Closest matrix to F with unit determinant, singular values floored.

    The projection keeps the singular frames of F and optimizes the singular
    values under the product constraint, so det of the result is 1 up to the
    Newton tolerance even when F itself is degenerate or inverted.
    """
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite deformation gradient")
    U, sig, W = svd_rv(F)
    s, _, _, _ = sl3_sigma_project(sig)
    return (U * s) @ W.T


# ---------------------------------------------------------------------------
# batched projections for the per-element local solves


def _sl3_batch_newton(sig, s0=None):
    """Vectorized unclamped Newton over a batch of singular-value triples."""
    B = sig.shape[0]
    s = np.clip(sig, SV_FLOOR, None) if s0 is None else np.array(s0, dtype=float)
    p = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1)
    denom = np.maximum(np.sum(p * p, axis=1), 1e-300)
    lam = (np.prod(s, axis=1) - 1.0) / denom
    for _ in range(_NEWTON_ITERS):
        p = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1)
        r = np.empty((B, 4))
        r[:, :3] = s - sig + lam[:, None] * p
        r[:, 3] = np.prod(s, axis=1) - 1.0
        if np.max(np.abs(r)) < _NEWTON_TOL:
            break
        J = np.zeros((B, 4, 4))
        J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
        J[:, 0, 1] = J[:, 1, 0] = lam * s[:, 2]
        J[:, 0, 2] = J[:, 2, 0] = lam * s[:, 1]
        J[:, 1, 2] = J[:, 2, 1] = lam * s[:, 0]
        J[:, :3, 3] = p
        J[:, 3, :3] = p
        try:
            delta = np.linalg.solve(J, -r[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            return s, lam, np.zeros(B, dtype=bool)
        s = s + delta[:, :3]
        lam = lam + delta[:, 3]
    p = np.stack([s[:, 1] * s[:, 2], s[:, 0] * s[:, 2], s[:, 0] * s[:, 1]], axis=1)
    r3 = np.abs(s - sig + lam[:, None] * p).max(axis=1)
    rc = np.abs(np.prod(s, axis=1) - 1.0)
    ok = (np.maximum(r3, rc) < 1e-10) & np.isfinite(s).all(axis=1)
    return s, lam, ok


def sl3_sigma_project_batch(sig):
    """Batched volume projection in singular-value space.

    The vectorized Newton handles the benign bulk; elements that fail it,
    need clamping, or look extreme enough to risk a stray stationary point
    are re-solved one by one with the robust scalar path.
    """
    sig = np.asarray(sig, dtype=float)
    s, lam, ok = _sl3_batch_newton(sig)
    clamped = np.zeros(sig.shape, dtype=bool)
    feasible = ok & (np.min(s, axis=1) >= SV_FLOOR - 1e-12)
    obj = np.sum((s - sig) ** 2, axis=1)
    obj[~feasible] = np.inf
    prod = np.prod(sig, axis=1)
    # expansive triples admit a second stationary branch that keeps two
    # values near sigma and pays the whole constraint on the smallest; run
    # the Newton again from that start and keep the better feasible answer
    big = np.flatnonzero(prod > 1.0)
    if len(big):
        sub = sig[big]
        rows = np.arange(len(big))
        j = np.argmin(sub, axis=1)
        others = prod[big] / np.maximum(sub[rows, j], 1e-300)
        s0 = np.clip(sub, SV_FLOOR, None)
        s0[rows, j] = np.clip(1.0 / np.maximum(others, 1e-12), SV_FLOOR, None)
        s_b, lam_b, ok_b = _sl3_batch_newton(sub, s0)
        obj_b = np.sum((s_b - sub) ** 2, axis=1)
        take = ok_b & (np.min(s_b, axis=1) >= SV_FLOOR - 1e-12)
        take &= obj_b < obj[big] - 1e-15
        idx = big[take]
        s[idx] = s_b[take]
        lam[idx] = lam_b[take]
        obj[idx] = obj_b[take]
        feasible[idx] = True
    suspicious = (
        ~feasible
        | (np.min(sig, axis=1) < 0.2)
        | (np.max(np.abs(sig), axis=1) > 5.0)
    )
    # feasible reference candidate: uniformly scaled sigma; beating it is a
    # cheap necessary condition for having found the global minimum
    with np.errstate(invalid="ignore", divide="ignore"):
        ref = sig / np.cbrt(np.maximum(prod, 1e-300))[:, None]
    ref_valid = (prod > 1e-12) & (np.min(ref, axis=1) >= SV_FLOOR)
    obj_ref = np.sum((ref - sig) ** 2, axis=1)
    suspicious |= ref_valid & (obj > obj_ref + 1e-12)
    for i in np.flatnonzero(suspicious):
        s_i, lam_i, cl_i, _ = sl3_sigma_project(sig[i])
        s[i], lam[i], clamped[i] = s_i, lam_i, cl_i
    return s, lam, clamped


def batch_projections(F):
    """Rotation and volume projections for a batch of deformation gradients.

    Returns (R, V) with shapes matching F ((B, 3, 3) each).
    """
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("non-finite deformation gradient in batch")
    U, sig, W = svd_rv_batch(F)
    R = U @ np.swapaxes(W, -1, -2)
    s, _, _ = sl3_sigma_project_batch(sig)
    V = (U * s[:, None, :]) @ np.swapaxes(W, -1, -2)
    return R, V


# ---------------------------------------------------------------------------
# projection derivatives (9x9 in the row-major vec layout)


def _pair_indices():
    for i in range(3):
        for j in range(i + 1, 3):
            yield i, j, 3 * i + j, 3 * j + i


def _sl3_ds_dsigma(sigma, s, lam, clamped):
    """Sensitivity ds/dsigma of the constrained singular-value solve.

    Obtained by differentiating the stationarity system; clamped entries are
    insensitive, so their rows and columns vanish.
    """
    free = ~clamped
    idx = np.flatnonzero(free)
    nf = idx.size
    D = np.zeros((3, 3))
    if nf == 0:
        return D
    p = _sl3_p(s)
    A = np.zeros((nf + 1, nf + 1))
    for a, i in enumerate(idx):
        for b, j in enumerate(idx):
            A[a, b] = 1.0 if i == j else lam * s[3 - i - j]
        A[a, nf] = p[i]
        A[nf, a] = p[i]
    rhs = np.zeros((nf + 1, nf))
    rhs[:nf, :nf] = np.eye(nf)
    sol = np.linalg.solve(A, rhs)
    D[np.ix_(idx, idx)] = sol[:nf, :]
    return D


def _conjugate(L, U, W):
    Q = np.kron(U, W)  # row-major vec: vec(U X W^T) = kron(U, W) vec(X)
    return Q @ L @ Q.T


def rotation_jacobian(F):
    """Derivative of the rotation projection, d vec(R) / d vec(F)."""
    U, sig, W = svd_rv(F)
    L = np.zeros((9, 9))
    for i, j, a, b in _pair_indices():
        den = sig[i] + sig[j]
        if abs(den) < 1e-8:
            den = np.copysign(1e-8, den if den != 0.0 else 1.0)
        c = 1.0 / den
        L[a, a] = L[b, b] = c
        L[a, b] = L[b, a] = -c
    return _conjugate(L, U, W)


def sl3_jacobian(F):
    """Derivative of the volume projection, d vec(V) / d vec(F)."""
    U, sig, W = svd_rv(F)
    s, lam, clamped, _ = sl3_sigma_project(sig)
    ds = _sl3_ds_dsigma(sig, s, lam, clamped)
    L = np.zeros((9, 9))
    dia = (0, 4, 8)
    for i in range(3):
        for j in range(3):
            L[dia[i], dia[j]] = ds[i, j]
    for i, j, a, b in _pair_indices():
        dd = sig[i] - sig[j]
        if abs(dd) > 1e-7 * max(1.0, abs(sig[i]), abs(sig[j])):
            cs = (s[i] - s[j]) / dd
        else:
            cs = ds[i, i] - ds[i, j]  # confluent divided difference
        den = sig[i] + sig[j]
        if abs(den) < 1e-8:
            den = np.copysign(1e-8, den if den != 0.0 else 1.0)
        ca = (s[i] + s[j]) / den
        L[a, a] = L[b, b] = 0.5 * (cs + ca)
        L[a, b] = L[b, a] = 0.5 * (cs - ca)
    return _conjugate(L, U, W)


def projection_jacobians_batch(F):
    """Batched (d vec R / d vec F, d vec V / d vec F), each (B, 9, 9)."""
    F = np.asarray(F, dtype=float)
    B = F.shape[0]
    U, sig, W = svd_rv_batch(F)
    s, lam, clamped = sl3_sigma_project_batch(sig)

    LR = np.zeros((B, 9, 9))
    LV = np.zeros((B, 9, 9))
    dia = (0, 4, 8)
    ds = np.zeros((B, 3, 3))
    for e in range(B):
        ds[e] = _sl3_ds_dsigma(sig[e], s[e], lam[e], clamped[e])
    for i in range(3):
        for j in range(3):
            LV[:, dia[i], dia[j]] = ds[:, i, j]
    for i, j, a, b in _pair_indices():
        den = sig[:, i] + sig[:, j]
        den = np.where(np.abs(den) < 1e-8, np.copysign(1e-8, np.where(den == 0.0, 1.0, den)), den)
        c = 1.0 / den
        LR[:, a, a] = LR[:, b, b] = c
        LR[:, a, b] = LR[:, b, a] = -c
        dd = sig[:, i] - sig[:, j]
        scale = np.maximum(1.0, np.maximum(np.abs(sig[:, i]), np.abs(sig[:, j])))
        safe = np.abs(dd) > 1e-7 * scale
        cs = np.where(safe, (s[:, i] - s[:, j]) / np.where(safe, dd, 1.0), ds[:, i, i] - ds[:, i, j])
        ca = (s[:, i] + s[:, j]) / den
        LV[:, a, a] = LV[:, b, b] = 0.5 * (cs + ca)
        LV[:, a, b] = LV[:, b, a] = 0.5 * (cs - ca)

    Q = np.einsum("eik,ejl->eijkl", U, W).reshape(B, 9, 9)
    Qt = np.swapaxes(Q, 1, 2)
    JR = Q @ LR @ Qt
    JV = Q @ LV @ Qt
    return JR, JV


# ---------------------------------------------------------------------------
# element energy and forces


def element_energy(F, gamma_s, gamma_v, volume):
    """Elastic energy of one element at deformation gradient F."""
    R = project_so3(F)
    V = project_sl3(F)
    return volume * (
        gamma_s * float(np.sum((F - R) ** 2)) + gamma_v * float(np.sum((F - V) ** 2))
    )


def element_force_and_dgamma(diff_op, F, gamma_s, gamma_v, volume):
    """Energy gradient of one element and its derivatives in the two gammas.

    diff_op is the (9, 12) operator mapping element node positions to vec(F).
    Returns (force, d_gs, d_gv), all 12-vectors on the element dofs, with
    force = gamma_s * d_gs + gamma_v * d_gv; the two patterns double as the
    columns of the equilibrium derivative with respect to the coefficients.
    """
    R = project_so3(F)
    V = project_sl3(F)
    d_gs = 2.0 * volume * (diff_op.T @ (F - R).reshape(9))
    d_gv = 2.0 * volume * (diff_op.T @ (F - V).reshape(9))
    return gamma_s * d_gs + gamma_v * d_gv, d_gs, d_gv


def batch_energies(F, gamma_s, gamma_v, volumes):
    """Per-element energies for a batch of deformation gradients."""
    R, V = batch_projections(F)
    ds = np.sum((F - R) ** 2, axis=(1, 2))
    dv = np.sum((F - V) ** 2, axis=(1, 2))
    return volumes * (gamma_s * ds + gamma_v * dv)


class MaterialField:
    """Per-element coefficient pair over a mesh, stored as two flat arrays."""

    def __init__(self, gamma_s, gamma_v):
        self.gamma_s = np.asarray(gamma_s, dtype=float)
        self.gamma_v = np.asarray(gamma_v, dtype=float)
        if self.gamma_s.shape != self.gamma_v.shape:
            raise ValueError("coefficient arrays must have matching shapes")

    @classmethod
    def uniform(cls, n_elements, gamma_s, gamma_v):
        return cls(np.full(n_elements, float(gamma_s)), np.full(n_elements, float(gamma_v)))

    @classmethod
    def from_stacked(cls, stacked):
        stacked = np.asarray(stacked, dtype=float)
        n = stacked.size // 2
        return cls(stacked[:n].copy(), stacked[n:].copy())

    def stacked(self):
        """Flat view [gamma_s; gamma_v] used by the fitting optimizer."""
        return np.concatenate([self.gamma_s, self.gamma_v])

    def copy(self):
        return MaterialField(self.gamma_s.copy(), self.gamma_v.copy())

    def __len__(self):
        return self.gamma_s.size

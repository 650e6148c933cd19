"""Per-element material estimation from yarn poses.

Each sample couples a yarn pose with its transferred mesh targets and an
inertia target; the fitted state is the quasi-static equilibrium of the
homogenized mesh under those loads.  Gradients of the pose-matching loss
with respect to the two coefficient fields come from one adjoint solve
against the exact equilibrium Jacobian; Gauss-Newton directions come from
a sparse symmetric block system that never forms the dense sensitivity
matrix.  A spectral coarse-to-fine schedule (element-graph Laplacian
eigenvectors, ranks 1 / 10 / 30 / full) initializes the field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import material as mat
from . import pdsolver, transfer

log = logging.getLogger(__name__)

GD_STEP = 0.01
GN_STEP = 1.0
GD_ITERS = 12
GN_ITERS = 30
MAX_HALVINGS = 8
EQ_GATE = 1e-5          # max residual allowed for any adjoint evaluation
STOP_REL = 1e-4         # relative loss decrease below this ...
STOP_WINDOW = 3         # ... for this many iterations stops the GN phase
KAPPA_SCALE = 1e-6
STAGE_RANKS = (1, 10, 30, None)


# ---------------------------------------------------------------------------
# samples and the shared loss


@dataclass
class FitSample:
    """One yarn pose prepared for fitting."""

    index: int
    yarn_pose: np.ndarray            # (nY, 3)
    targets: transfer.TargetDeformation
    inertia: np.ndarray              # (nV, 3) inertia target
    pins: np.ndarray                 # mesh node indices held fixed
    pin_vals: np.ndarray
    x_init: np.ndarray               # warm start (y2v transfer of the pose)
    weight: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.inertia)):
            raise ValueError("non-finite inertia target")
        if not self.targets.covered.any():
            raise ValueError("sample covers no elements")


def build_sample(op, frames, i, dt=None, yarn_pins=(), yarn_force=None):
    """Assemble a FitSample from frame i of a yarn sequence.

    `op` is the transfer operator; pinned yarn vertices pin the nodes of
    their host elements at the transferred positions.  The inertia target
    needs two history frames and dt; static samples (dt None or i < 2) get
    a zero target.
    """
    x_init, targets = op.transfer(frames[i], frame=i)
    if dt is not None and i >= 2:
        seq = type("S", (), {})()
        seq.frames = frames
        seq.dt = dt
        if yarn_force is None:
            yarn_force = np.zeros_like(np.asarray(frames[i], dtype=float))
        a = transfer.estimate_inertia(op, seq, i, yarn_force=yarn_force)
    else:
        a = np.zeros_like(x_init)
    yarn_pins = np.asarray(yarn_pins, dtype=int)
    if len(yarn_pins):
        hosts = op.embedding.host_elem[yarn_pins]
        pins = np.unique(op.mesh.tets[hosts])
    else:
        pins = np.empty(0, dtype=int)
    return FitSample(index=i, yarn_pose=np.asarray(frames[i], dtype=float),
                     targets=targets, inertia=a, pins=pins,
                     pin_vals=x_init[pins], x_init=x_init)


class FitProblem:
    """Mesh, embedding, and loss plumbing shared across samples."""

    def __init__(self, mesh, embedding, dt=1e-2, alpha=transfer.MASS_ANCHOR_WEIGHT,
                 fill_weight=transfer.FILL_WEIGHT):
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        self.mesh = mesh
        self.embedding = embedding
        self.dt = dt
        self.alpha = alpha
        self.fill_weight = float(fill_weight)
        self.interp = embedding.interp
        self.yarn_mass2 = embedding.yarn_mass**2
        self._anchor = 2.0 * alpha * (
            self.interp.T @ sp.diags(self.yarn_mass2) @ self.interp)

    def element_weights(self, sample):
        """Volume-scaled weights, fill elements down to fill_weight.  Same
        weighting as the y2v reconstruction, so at the transferred pose the
        loss coincides with the reconstruction objective."""
        w = np.where(sample.targets.covered, 1.0, self.fill_weight)
        return w * self.mesh.volume

    def loss(self, x, sample):
        """Pose-matching loss: weighted per-element gradient mismatch plus
        the mass-weighted yarn anchor."""
        F = self.mesh.deformation_gradients(x.reshape(-1))
        d = F - sample.targets.per_element_f
        w = self.element_weights(sample)
        r = self.embedding.yarn_mass[:, None] * (self.interp @ x - sample.yarn_pose)
        return float(np.sum(w * np.sum(d * d, axis=(1, 2)))) \
            + self.alpha * float(np.sum(r * r))

    def loss_grad_x(self, x, sample):
        F = self.mesh.deformation_gradients(x.reshape(-1))
        d = F - sample.targets.per_element_f
        w = self.element_weights(sample)
        GT = 2.0 * np.einsum("e,enj,eij->eni", w, self.mesh.shape_grad, d)
        g = np.zeros((self.mesh.n_nodes, 3))
        np.add.at(g, self.mesh.tets.reshape(-1), GT.reshape(-1, 3))
        g += 2.0 * self.alpha * (self.interp.T @ (
            self.yarn_mass2[:, None] * (self.interp @ x - sample.yarn_pose)))
        return g

    def loss_hessian_scalar(self, sample):
        """Constant loss Hessian; the same matrix acts on each coordinate."""
        w = self.element_weights(sample)
        return (pdsolver.scatter_scalar(self.mesh, 2.0 * w) + self._anchor).tocsr()

    def solve_equilibrium(self, gammas, sample, x0=None, tol=1e-6,
                          pd_iters=6, max_newton=60):
        """Quasi-static state under the sample loads: proximal rounds from
        the warm start, then exact-Jacobian polishing.

        Returns (x, residual infinity norm on free nodes, converged flag).
        """
        x0 = sample.x_init if x0 is None else x0
        x = pdsolver.pd_equilibrium(
            self.mesh, gammas, sample.inertia, x0, sample.pins,
            sample.pin_vals, self.dt, iterations=pd_iters)
        x, ok, _ = pdsolver.newton_polish(
            self.mesh, gammas, x, dt=self.dt, pins=sample.pins,
            pin_vals=sample.pin_vals, inertia_target=sample.inertia,
            tol=tol, max_iters=max_newton, exact=True)
        free = np.setdiff1d(np.arange(self.mesh.n_nodes), sample.pins)
        g = (pdsolver.elastic_gradient(self.mesh, gammas, x)
             + (self.mesh.node_mass[:, None] / self.dt**2) * sample.inertia)
        resid = float(np.abs(g[free]).max()) if len(free) else 0.0
        return x, resid, ok

    def free_dofs(self, sample):
        free = np.setdiff1d(np.arange(self.mesh.n_nodes), sample.pins)
        return (3 * free[:, None] + np.arange(3)[None, :]).reshape(-1)


# ---------------------------------------------------------------------------
# adjoint machinery


def gamma_jacobian(mesh, x):
    """Sparse d(residual)/d(gamma), shape (3nV, 2nE).

    The equilibrium residual is linear in the coefficients, so the column
    for each coefficient is that element's unit-coefficient force pattern.
    """
    F = mesh.deformation_gradients(x.reshape(-1))
    R, V = mat.batch_projections(F)
    Js = 2.0 * mesh.volume[:, None] * np.einsum(
        "eab,ea->eb", mesh.diff_op, (F - R).reshape(-1, 9))
    Jv = 2.0 * mesh.volume[:, None] * np.einsum(
        "eab,ea->eb", mesh.diff_op, (F - V).reshape(-1, 9))
    nE = mesh.n_elements
    dofs = mesh.element_dofs().reshape(-1)
    rows = np.concatenate([dofs, dofs])
    cols = np.concatenate([np.repeat(np.arange(nE), 12),
                           np.repeat(np.arange(nE, 2 * nE), 12)])
    vals = np.concatenate([Js.reshape(-1), Jv.reshape(-1)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * mesh.n_nodes, 2 * nE))


@dataclass
class AdjointState:
    """Equilibrium-point quantities reused by gradient and Gauss-Newton."""

    x: np.ndarray
    residual: float
    fdofs: np.ndarray
    H: sp.csc_matrix          # exact equilibrium Jacobian, free DOFs
    J: sp.csr_matrix          # residual derivative in gamma, free rows
    lam: np.ndarray           # adjoint vector
    grad: np.ndarray          # loss gradient in gamma, length 2nE


def adjoint_gradient(problem, sample, gammas, x, residual=None, logger=None):
    """Loss gradient in the coefficients via one adjoint solve.

    The equilibrium Jacobian carries the projection sensitivities; with
    the frozen-projection form the gradient has order-one error.  Each
    call is gated on the equilibrium residual and logged.
    """
    if residual is None:
        free = np.setdiff1d(np.arange(problem.mesh.n_nodes), sample.pins)
        g = (pdsolver.elastic_gradient(problem.mesh, gammas, x)
             + (problem.mesh.node_mass[:, None] / problem.dt**2) * sample.inertia)
        residual = float(np.abs(g[free]).max()) if len(free) else 0.0
    ok = residual < EQ_GATE
    if logger is not None:
        logger.log_gate(sample.index, residual, ok)
    if not ok:
        raise EquilibriumGateError(
            f"adjoint evaluation rejected: residual {residual:.3e} >= {EQ_GATE:g}")

    fdofs = problem.free_dofs(sample)
    H = pdsolver.exact_elastic_hessian(problem.mesh, gammas, x)
    Hff = H[fdofs][:, fdofs].tocsc()
    gx = problem.loss_grad_x(x, sample).reshape(-1)[fdofs]
    try:
        lam = spla.spsolve(Hff, gx)
    except RuntimeError:
        kap = KAPPA_SCALE * Hff.diagonal().sum() / Hff.shape[0]
        log.warning("singular equilibrium Jacobian; adding %.3e ridge", kap)
        lam = spla.spsolve((Hff + kap * sp.eye(Hff.shape[0])).tocsc(), gx)
    J = gamma_jacobian(problem.mesh, x)[fdofs]
    grad = -(J.T @ lam)
    return AdjointState(x=x, residual=residual, fdofs=fdofs, H=Hff, J=J,
                        lam=lam, grad=grad)


class EquilibriumGateError(RuntimeError):
    pass


def reduce_columns(J, basis):
    """Map the coefficient Jacobian onto a rank-r basis per field."""
    nE = basis.shape[0]
    return np.hstack([J[:, :nE] @ basis, J[:, nE:] @ basis])


def adjoint_gauss_newton(problem, sample, state, kappa=None, basis=None,
                         frozen=None):
    """Gauss-Newton direction from the sparse symmetric block system.

    Two auxiliary vectors (v, u) turn (J^T H^-1 G H^-1 J + kappa I) d =
    -grad into one sparse solve; the third row carries -(P + kappa I) d,
    so the gradient enters with a plus sign:

        [ 0   H   J ] [v]   [ 0    ]
        [ H  -G   0 ] [u] = [ 0    ]
        [ J^T 0  -kI] [d]   [ grad ]

    `basis` restricts the direction to a spectral subspace; `frozen` zeroes
    pivoted coefficient columns.  Returns (d, kappa, ok); ok False means
    the factorization failed or produced a non-descent direction and the
    caller should escalate kappa or fall back to the gradient.
    """
    G_scalar = problem.loss_hessian_scalar(sample)
    fdofs = state.fdofs
    G = sp.kron(G_scalar, sp.eye(3)).tocsr()[fdofs][:, fdofs]
    if kappa is None:
        kappa = KAPPA_SCALE * G.diagonal().sum() / G.shape[0]

    J = state.J
    grad = state.grad
    if basis is not None:
        J = sp.csr_matrix(reduce_columns(J, basis))
        nE = basis.shape[0]
        r = basis.shape[1]
        grad = np.concatenate([basis.T @ grad[:nE], basis.T @ grad[nE:]])
    if frozen is not None and len(frozen):
        keep = np.setdiff1d(np.arange(J.shape[1]), frozen)
    else:
        keep = None
    Jk = J[:, keep] if keep is not None else J
    gk = grad[keep] if keep is not None else grad

    nf = len(fdofs)
    m = Jk.shape[1]
    Z = sp.csr_matrix((nf, nf))
    KKT = sp.bmat([
        [Z, state.H, Jk],
        [state.H, -G, None],
        [Jk.T, None, -kappa * sp.eye(m)],
    ], format="csc")
    rhs = np.concatenate([np.zeros(2 * nf), gk])
    try:
        sol = spla.splu(KKT).solve(rhs)
    except RuntimeError:
        return None, kappa, False
    dk = sol[2 * nf:]
    if not np.all(np.isfinite(dk)):
        return None, kappa, False
    d = np.zeros(J.shape[1])
    if keep is not None:
        d[keep] = dk
    else:
        d = dk
    # d = 0 at a stationary point is the valid homogeneous solution, not a
    # failed descent direction
    if len(gk) and np.linalg.norm(gk) > 0.0 and float(d @ grad) >= 0.0:
        return d, kappa, False
    return d, kappa, True


def dense_gauss_newton_direction(problem, sample, state, kappa):
    """Oracle route: explicit sensitivity columns, dense normal equations.

    Only feasible on small problems; exists to cross-check the sparse
    block solve.
    """
    Hlu = spla.splu(state.H)
    J = state.J
    m = J.shape[1]
    S = np.column_stack([
        Hlu.solve(-np.asarray(J[:, j].todense()).ravel()) for j in range(m)])
    G_scalar = problem.loss_hessian_scalar(sample)
    G = sp.kron(G_scalar, sp.eye(3)).tocsr()[state.fdofs][:, state.fdofs]
    P = S.T @ (G @ S)
    return np.linalg.solve(P + kappa * np.eye(m), -state.grad)


# ---------------------------------------------------------------------------
# safeguarded stepping


def safeguarded_update(gamma, d, step, eval_loss, current_loss,
                       clamp_cache=None, floor=mat.GAMMA_FLOOR,
                       max_halvings=MAX_HALVINGS):
    """Backtracking update with a positivity floor.

    Trials gamma + t*step*d, halving t while the loss increases; trial
    entries that go negative are set to the floor and their indices cached.
    Returns (gamma', loss', accepted, t).
    """
    t = 1.0
    for _ in range(max_halvings + 1):
        trial = gamma + t * step * d
        neg = trial < 0.0
        if neg.any():
            trial = trial.copy()
            trial[neg] = floor
            if clamp_cache is not None:
                clamp_cache.update(np.flatnonzero(neg).tolist())
        val = eval_loss(trial)
        if val < current_loss:
            return trial, val, True, t
        t *= 0.5
    return gamma, current_loss, False, 0.0


@dataclass
class FitLogger:
    """Collects gate checks and convergence rows for reporting."""

    gate: list = field(default_factory=list)          # (sample, resid, ok)
    rows: list = field(default_factory=list)          # convergence entries

    def log_gate(self, sample, resid, ok):
        self.gate.append((sample, resid, ok))

    def log_iter(self, sample, phase, iteration, loss, step, grad_norm):
        self.rows.append(dict(sample=sample, phase=phase, iteration=iteration,
                              loss=loss, step=step, grad_norm=grad_norm))

    @property
    def gate_violations(self):
        return sum(1 for _, _, ok in self.gate if not ok)


@dataclass
class FitResult:
    gamma: np.ndarray          # stacked (2nE,)
    loss: float
    x: np.ndarray
    losses: list
    stalled: bool
    resid: float = 0.0         # equilibrium residual at the final state


def _to_field(mesh, gamma_vec):
    nE = mesh.n_elements
    return mat.MaterialField(gamma_s=gamma_vec[:nE].copy(),
                             gamma_v=gamma_vec[nE:].copy())


def fit_sample(problem, sample, gamma0, *, basis=None, q0=None,
               gd_iters=GD_ITERS, gn_iters=GN_ITERS, logger=None,
               floor=mat.GAMMA_FLOOR, init_state=None):
    """Two-phase fit of one sample: gradient descent then Gauss-Newton.

    With `basis` the parameters live in the spectral subspace (vector q of
    length 2r, coefficients = basis @ q floored elementwise); otherwise in
    the full per-element space with clamp caching and pivoting.  Every
    trial re-solves the equilibrium from the current state.  `init_state`
    is an optional (loss, x, resid) triple for gamma0, used by the staged
    schedule so a stage starts exactly at the previous optimum instead of
    re-evaluating it.  Returns FitResult (and the final q when reduced).
    """
    mesh = problem.mesh
    nE = mesh.n_elements
    logger = FitLogger() if logger is None else logger
    clamp_cache = set()
    reduced = basis is not None
    r = basis.shape[1] if reduced else 0

    def to_gamma(qv):
        g = np.concatenate([basis @ qv[:r], basis @ qv[r:]])
        return np.maximum(g, floor)

    if reduced:
        q = (np.asarray(q0, dtype=float).copy() if q0 is not None else
             np.concatenate([basis.T @ gamma0[:nE], basis.T @ gamma0[nE:]]))
        gamma = to_gamma(q)
    else:
        q = None
        gamma = np.maximum(np.asarray(gamma0, dtype=float), floor)

    def eval_at(gamma_vec, warm):
        gfield = _to_field(mesh, gamma_vec)
        x_new, resid_new, _ = problem.solve_equilibrium(gfield, sample, x0=warm)
        return problem.loss(x_new, sample), x_new, resid_new

    if init_state is not None:
        loss, x, resid = init_state
        x = x.copy()
    else:
        loss, x, resid = eval_at(gamma, sample.x_init)
    losses = [loss]
    stalled = False

    def reduce_grad(g_full):
        if not reduced:
            return g_full
        return np.concatenate([basis.T @ g_full[:nE], basis.T @ g_full[nE:]])

    def line_search(d, step):
        """Backtracking trial of the direction; mutates the current state."""
        nonlocal gamma, q, loss, x, resid
        t = step
        for _ in range(MAX_HALVINGS + 1):
            if reduced:
                q_try = q + t * d
                trial = to_gamma(q_try)
            else:
                raw = gamma + t * d
                trial = raw.copy()
                neg = raw < 0.0
                if neg.any():
                    trial[neg] = floor
                    clamp_cache.update(np.flatnonzero(neg).tolist())
            val, x_try, r_try = eval_at(trial, x)
            if val < loss:
                gamma, loss, x, resid = trial, val, x_try, r_try
                if reduced:
                    q = q_try
                return True, t
            t *= 0.5
        return False, 0.0

    # phase 1: gradient descent
    for it in range(gd_iters):
        state = adjoint_gradient(problem, sample, _to_field(mesh, gamma), x,
                                 residual=resid, logger=logger)
        grad_eff = reduce_grad(state.grad)
        gnorm = float(np.linalg.norm(grad_eff))
        if gnorm < 1e-10:
            break
        accepted, t = line_search(-grad_eff, GD_STEP)
        logger.log_iter(sample.index, "gd", it, loss,
                        t if accepted else 0.0, gnorm)
        losses.append(loss)
        if not accepted:
            break                               # flat for GD; GN may still move

    # phase 2: Gauss-Newton with damping ladder and pivoting
    kappa = None
    window = []
    for it in range(gn_iters):
        state = adjoint_gradient(problem, sample, _to_field(mesh, gamma), x,
                                 residual=resid, logger=logger)
        grad_eff = reduce_grad(state.grad)
        gnorm = float(np.linalg.norm(grad_eff))
        if gnorm < 1e-10:
            break

        d = None
        kap = kappa
        for _ in range(5):
            d_try, kap, ok = adjoint_gauss_newton(
                problem, sample, state, kappa=kap, basis=basis)
            if ok:
                d = d_try
                break
            kap = (kap if kap is not None else 1e-8) * 10.0
        if kappa is None and kap is not None:
            kappa = kap
        if d is None:
            d = -grad_eff                       # damping ladder exhausted

        if not reduced and clamp_cache:
            # repeat offenders: cached entries the direction would push
            # negative get zeroed; if that kills descent they are pivoted
            # out of the block system and it is re-solved without them
            cached = np.array(sorted(clamp_cache), dtype=int)
            push = cached[d[cached] < 0.0]
            if len(push):
                d = d.copy()
                d[push] = 0.0
                if float(d @ grad_eff) >= 0.0:
                    d_piv, _, ok = adjoint_gauss_newton(
                        problem, sample, state, kappa=kap, frozen=push)
                    if ok and d_piv is not None:
                        d = d_piv
                    else:
                        d = -grad_eff
                        d[push] = 0.0

        accepted, t = line_search(d, GN_STEP)
        logger.log_iter(sample.index, "gn", it, loss,
                        t if accepted else 0.0, gnorm)
        losses.append(loss)
        if not accepted:
            stalled = True
            break
        window.append(loss)
        if len(window) > STOP_WINDOW:
            window.pop(0)
        if len(window) == STOP_WINDOW and window[0] > 0.0:
            if (window[0] - window[-1]) / window[0] < STOP_REL:
                break

    result = FitResult(gamma=gamma, loss=loss, x=x, losses=losses,
                       stalled=stalled, resid=resid)
    return (result, q) if reduced else result


# ---------------------------------------------------------------------------
# spectral coarse-to-fine schedule


def harmonic_basis(mesh, r):
    """First r eigenvectors of the element-adjacency graph Laplacian.

    Coefficients live on elements, so the graph couples elements sharing a
    face.  Columns are orthonormal and the first is the constant vector;
    prefixes are nested, which lets a coarser stage's coordinates carry
    over by zero-padding.
    """
    from . import volmesh

    nE = mesh.n_elements
    r = min(r, nE)
    adj = volmesh.element_adjacency(mesh)
    L = (sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj).tocsc()
    if nE <= 1500 or r >= nE - 1:
        w, v = np.linalg.eigh(L.toarray())
        H = v[:, :r]
    else:
        try:
            w, v = spla.eigsh(L, k=r, sigma=-1e-6, mode="normal")
            order = np.argsort(w)
            H = v[:, order]
        except Exception as exc:
            log.warning("Laplacian eigensolver failed (%s); constant-only basis", exc)
            return np.full((nE, 1), 1.0 / np.sqrt(nE))
    # pin the null eigenvector to the exact constant and re-orthonormalize;
    # QR preserves the nested prefix spans
    H = H.copy()
    H[:, 0] = 1.0 / np.sqrt(nE)
    Q, R = np.linalg.qr(H)
    Q *= np.sign(np.diag(R))[None, :]
    if Q[0, 0] < 0:
        Q[:, 0] *= -1.0
    return Q


def fit_staged(problem, sample, gamma0, *, ranks=STAGE_RANKS, logger=None,
               gd_iters=GD_ITERS, gn_iters=GN_ITERS):
    """Coarse-to-fine fit through nested spectral subspaces.

    Each rank warm-starts the next by zero-padding its coordinates, so a
    stage begins exactly at the previous stage's optimum and stage-final
    losses can only decrease along the schedule.  Rank None means the full
    per-element space.  Returns (FitResult, stage_losses dict).
    """
    logger = FitLogger() if logger is None else logger
    nE = problem.mesh.n_elements
    max_rank = max((rk for rk in ranks if rk is not None), default=0)
    H_full = harmonic_basis(problem.mesh, max_rank) if max_rank else None
    if H_full is not None and H_full.shape[1] < max_rank:
        log.warning("spectral basis truncated to rank %d", H_full.shape[1])

    gamma = np.asarray(gamma0, dtype=float).copy()
    q_prev = None
    r_prev = 0
    stage_losses = {}
    result = None
    carry = None            # (loss, x, resid) handed from stage to stage
    for rk in ranks:
        if rk is None:
            result = fit_sample(problem, sample, gamma, logger=logger,
                                gd_iters=gd_iters, gn_iters=gn_iters,
                                init_state=carry)
            stage_losses["full"] = result.loss
            gamma = result.gamma
            carry = (result.loss, result.x, result.resid)
            continue
        rk_eff = min(rk, H_full.shape[1])
        H = H_full[:, :rk_eff]
        if q_prev is not None:
            q0 = np.zeros(2 * rk_eff)
            q0[:r_prev] = q_prev[:r_prev]
            q0[rk_eff:rk_eff + r_prev] = q_prev[r_prev:]
        else:
            q0 = None
        result, q = fit_sample(problem, sample, gamma, basis=H, q0=q0,
                               logger=logger, gd_iters=gd_iters,
                               gn_iters=gn_iters, init_state=carry)
        stage_losses[f"r{rk}"] = result.loss
        gamma = result.gamma
        carry = (result.loss, result.x, result.resid)
        q_prev, r_prev = q, rk_eff
    return result, stage_losses


def fit_sequence(problem, samples, gamma0, *, logger=None,
                 gd_iters=GD_ITERS, gn_iters=GN_ITERS, w0=0.0,
                 prior_ok=False, checkpoint=None):
    """Single pass over the samples with energy-weighted averaging.

    The running field starts at the first sample's fit (weight zero), and
    each later fit is blended in proportionally to its pose's elastic
    energy; the running weight tracks the most deformed pose seen.  Fits
    that never accepted an update are skipped.  `w0` and `prior_ok` seed
    the running weight and success flag when continuing a partially
    completed pass; `checkpoint(k, gamma, w, row)` is called after each
    sample so callers can persist the state the continuation needs.
    Returns (MaterialField, report dict).
    """
    if not len(samples):
        raise ValueError("need at least one sample")
    logger = FitLogger() if logger is None else logger
    gamma = np.asarray(gamma0, dtype=float).copy()
    w = float(w0)
    best = None
    per_sample = []
    any_ok = bool(prior_ok)
    for k, sample in enumerate(samples):
        res = fit_sample(problem, sample, gamma, logger=logger,
                         gd_iters=gd_iters, gn_iters=gn_iters)
        progressed = len(res.losses) > 1 and res.losses[-1] < res.losses[0]
        per_sample.append(dict(index=sample.index, loss=res.loss,
                               stalled=res.stalled, progressed=progressed))
        if best is None or res.loss < best[0]:
            best = (res.loss, res.gamma)
        if progressed or not res.stalled:
            any_ok = True
            wk = pdsolver.elastic_energy(problem.mesh,
                                         _to_field(problem.mesh, gamma), res.x)
            if w + wk > 0.0:
                gamma = (w / (w + wk)) * gamma + (wk / (w + wk)) * res.gamma
            else:
                gamma = res.gamma.copy()
            w = max(w, wk)
        if checkpoint is not None:
            checkpoint(k, gamma, w, per_sample[-1])
    if not any_ok:
        log.warning("all samples stalled; returning best-loss field")
        gamma = best[1]
    report = dict(samples=per_sample, failed=not any_ok,
                  gate_violations=logger.gate_violations)
    return _to_field(problem.mesh, gamma), report

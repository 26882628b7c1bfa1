"""MAP estimation via bounded regularized Fisher scoring.

Each outer iteration cycles through the blocks A, B, C, D, G = U*D,
H = V*D, S, T.  Every block update is an optimization-projection step:
a regularized Fisher-scoring (or Newton, for S/T) step whose root mean
square is capped at rho, followed by a projection back onto the
identifiability-constrained parameter set that leaves the linear predictor
(hence the likelihood) unchanged by compensating through other blocks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import nb
from .exceptions import (
    DegenerateCovariateError,
    DomainError,
    NumericError,
    RankError,
    ShapeError,
)
from .model import (
    CovariateSet,
    DataMatrix,
    FitConfig,
    GbmParams,
    PriorConfig,
    check_constraints,
    first_nonzero_signs,
    linear_predictor,
)
from .rngstreams import stream_rng

D_SQ_FLOOR = 1e-12


def standardize_covariates(Xraw: np.ndarray) -> np.ndarray:
    """Center non-intercept columns and scale them to unit mean square.

    Column 1 (the intercept) is left untouched and must already be all ones.
    """
    X = np.array(Xraw, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError("covariate matrix must be 2-d")
    if not np.allclose(X[:, 0], 1.0):
        raise DomainError("first covariate column must be all ones")
    n = X.shape[0]
    for k in range(1, X.shape[1]):
        col = X[:, k] - X[:, k].mean()
        ms = np.mean(col ** 2)
        if ms <= 1e-12 * max(1.0, np.mean(X[:, k] ** 2)):
            raise DegenerateCovariateError(f"covariate column {k} has zero variance")
        X[:, k] = col / np.sqrt(ms)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankError("covariate matrix is rank deficient after standardization")
    return X


def prepare_covariates(X, Z, standardize=True) -> CovariateSet:
    """Standardize (optionally) and wrap the designs with pseudoinverses."""
    if standardize:
        X = standardize_covariates(X)
        Z = standardize_covariates(Z)
    return CovariateSet(X, Z)


def compact_svd(Q: np.ndarray, rank: int):
    """Rank-`rank` compact SVD of a dense matrix; singular values descending."""
    if rank == 0:
        return np.zeros((Q.shape[0], 0)), np.zeros(0), np.zeros((Q.shape[1], 0))
    U, s, Vt = np.linalg.svd(Q, full_matrices=False)
    return U[:, :rank], s[:rank], Vt[:rank].T


def svd_of_product(P: np.ndarray, Q: np.ndarray):
    """Compact SVD of P Q' without forming the I x J product.

    P is I x M and Q is J x M; QR-reduce both sides, SVD the small M x M
    core.  Returns (U, d, V) with U d V' = P Q' and d descending.
    """
    M = P.shape[1]
    if M == 0:
        return np.zeros((P.shape[0], 0)), np.zeros(0), np.zeros((Q.shape[0], 0))
    Qp, Rp = np.linalg.qr(P)
    Qq, Rq = np.linalg.qr(Q)
    Us, s, Vst = np.linalg.svd(Rp @ Rq.T)
    if M > 1 and np.any(np.diff(s) > -1e-10 * max(s[0], 1e-300)):
        warnings.warn("nearly repeated singular values in latent factor update")
    return Qp @ Us, s, Qq @ Vst.T


def bounded_fisher_step(beta, grad, fisher, lam, rho):
    """One regularized Fisher-scoring step with RMS-capped length.

    Solves (fisher + lam*I) xi = grad - lam*beta and returns
    beta + xi * min(1, rho * sqrt(dim) / ||xi||).  `lam` may be a scalar,
    a vector of per-coordinate precisions, or a full precision matrix.
    """
    beta = np.asarray(beta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    fisher = np.asarray(fisher, dtype=np.float64)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(fisher))):
        raise NumericError("non-finite gradient or Fisher information")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 2:
        A = fisher + lam
        rhs = grad - lam @ beta
    else:
        A = fisher + np.diag(np.broadcast_to(lam, beta.shape))
        rhs = grad - lam * beta
    xi = np.linalg.solve(A, rhs)
    norm = np.linalg.norm(xi)
    if norm > 0:
        xi = xi * min(1.0, rho * np.sqrt(xi.size) / norm)
    return beta + xi


def _capped(xi_rows: np.ndarray, rho: float) -> np.ndarray:
    """Cap each row of xi_rows at root mean square rho."""
    dim = xi_rows.shape[1]
    norms = np.linalg.norm(xi_rows, axis=1)
    factor = np.minimum(1.0, np.where(norms > 0, rho * np.sqrt(dim) / np.maximum(norms, 1e-300), 1.0))
    return xi_rows * factor[:, None]


@dataclass
class AdaptiveStepState:
    """Per-coordinate maximum step sizes for the S and T updates."""

    rho_s: np.ndarray
    rho_t: np.ndarray

    @staticmethod
    def fresh(I, J, rho) -> "AdaptiveStepState":
        return AdaptiveStepState(rho_s=np.full(I, rho), rho_t=np.full(J, rho))


@dataclass
class FitState:
    """Mutable bundle passed between block updates."""

    Y: DataMatrix
    cov: CovariateSet
    params: GbmParams
    prior: PriorConfig
    config: FitConfig
    adapt: AdaptiveStepState
    work: nb.NbWorkspace = None
    clamp_events: int = 0

    def refresh(self):
        """Recompute linpred, mu, r, W, E from the current parameters."""
        linpred = linear_predictor(self.params, self.cov)
        self.work = nb.nb_workspace(self.Y, linpred, self.params.S, self.params.T, self.params.omega)
        self.clamp_events += self.work.clamped

    def log_posterior(self) -> float:
        """Log-likelihood plus log-prior (normalizing constants included)."""
        self.refresh()
        p, w = self.params, self.work
        loglik = float(np.sum(nb.nb_log_pmf(self.Y.values, w.mu, w.r)))
        pr = self.prior

        def normal_term(q, lam, mean=0.0):
            return 0.5 * q.size * np.log(lam / (2 * np.pi)) - 0.5 * lam * np.sum((q - mean) ** 2)

        logprior = (
            normal_term(p.A, pr.lambda_a) + normal_term(p.B, pr.lambda_b)
            + normal_term(p.C, pr.lambda_c) + normal_term(p.D, pr.lambda_d)
            + normal_term(p.U, pr.lambda_u) + normal_term(p.V, pr.lambda_v)
            + normal_term(p.S, pr.lambda_s, pr.m_s) + normal_term(p.T, pr.lambda_t, pr.m_t)
        )
        return loglik + float(logprior)


def make_state(Y, cov, params, prior=None, config=None) -> FitState:
    prior = prior or PriorConfig()
    config = config or FitConfig()
    state = FitState(Y=Y, cov=cov, params=params, prior=prior, config=config,
                     adapt=AdaptiveStepState.fresh(cov.I, cov.J, config.rho))
    state.refresh()
    return state


# ---------------------------------------------------------------------------
# likelihood-preserving projections
# ---------------------------------------------------------------------------

def project_a(state: FitState):
    """Enforce Z'A = 0, compensating through C."""
    p, cov = state.params, state.cov
    Q = cov.Zplus @ p.A
    p.A -= cov.Z @ Q
    p.C += Q.T


def project_b(state: FitState):
    """Enforce X'B = 0, compensating through C."""
    p, cov = state.params, state.cov
    Q = cov.Xplus @ p.B
    p.B -= cov.X @ Q
    p.C += Q


def project_g(state: FitState, G: np.ndarray):
    """Absorb an unconstrained left-factor step G (I x M).

    Projects G onto the nullspace of X' (compensating through A, then A's
    own projection through C) and refactors G V' by compact SVD so that the
    new (U, D, V) satisfy the orthonormality constraints.  The linear
    predictor of the pre-projection state (with latent part G V') is
    preserved exactly.
    """
    p, cov = state.params, state.cov
    Q = cov.Xplus @ G
    G = G - cov.X @ Q
    p.A += p.V @ Q.T
    Q2 = cov.Zplus @ p.A
    p.A -= cov.Z @ Q2
    p.C += Q2.T
    p.U, p.D, p.V = svd_of_product(G, p.V)


def project_h(state: FitState, H: np.ndarray):
    """Mirror of project_g for a right-factor step H (J x M)."""
    p, cov = state.params, state.cov
    Q = cov.Zplus @ H
    H = H - cov.Z @ Q
    p.B += p.U @ Q.T
    Q2 = cov.Xplus @ p.B
    p.B -= cov.X @ Q2
    p.C += Q2
    p.U, p.D, p.V = svd_of_product(p.U, H)


def project_s(state: FitState):
    """Recenter S to mean-exp one, compensating through omega."""
    p = state.params
    c = float(logsumexp(p.S) - np.log(p.S.size))
    p.S -= c
    p.omega += c


def project_t(state: FitState):
    """Recenter T to mean-exp one, compensating through omega."""
    p = state.params
    c = float(logsumexp(p.T) - np.log(p.T.size))
    p.T -= c
    p.omega += c


# ---------------------------------------------------------------------------
# block updates
# ---------------------------------------------------------------------------

def _row_fisher_blocks(W, design, axis):
    """Per-row (axis=0) or per-column (axis=1) blocks design' W_slice design."""
    if axis == 1:
        return np.einsum("ij,ik,il->jkl", W, design, design, optimize=True)
    return np.einsum("ij,jk,jl->ikl", W, design, design, optimize=True)


def _batched_capped_solve(F, rhs, lam, rho):
    """Solve (F_n + diag(lam)) xi_n = rhs_n for all n and cap row RMS at rho."""
    n, d = rhs.shape
    A = F + np.diag(np.broadcast_to(np.asarray(lam, dtype=float), (d,)))[None, :, :]
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(rhs))):
        raise NumericError("non-finite gradient or Fisher information in block solve")
    xi = np.linalg.solve(A, rhs[..., None])[..., 0]
    return _capped(xi, rho)


def update_a(state: FitState):
    """Fisher-scoring step on each row of A, then the A projection."""
    state.refresh()
    p, cov, w = state.params, state.cov, state.work
    F = _row_fisher_blocks(w.W, cov.X, axis=1)            # (J, K, K)
    rhs = w.E.T @ cov.X - state.prior.lambda_a * p.A      # (J, K)
    p.A += _batched_capped_solve(F, rhs, state.prior.lambda_a, state.config.rho)
    project_a(state)


def update_b(state: FitState):
    """Fisher-scoring step on each row of B, then the B projection."""
    state.refresh()
    p, cov, w = state.params, state.cov, state.work
    F = _row_fisher_blocks(w.W, cov.Z, axis=0)            # (I, L, L)
    rhs = w.E @ cov.Z - state.prior.lambda_b * p.B        # (I, L)
    p.B += _batched_capped_solve(F, rhs, state.prior.lambda_b, state.config.rho)
    project_b(state)


def fisher_c(W, cov) -> np.ndarray:
    """KL x KL Fisher information for vec(C) (no regularization)."""
    T = _row_fisher_blocks(W, cov.X, axis=1)              # (J, K, K)
    F4 = np.einsum("jab,jl,jm->lamb", T, cov.Z, cov.Z, optimize=True)
    KL = cov.K * cov.L
    return F4.reshape(KL, KL)


def update_c(state: FitState):
    """Joint Fisher-scoring step on vec(C).  C is unconstrained."""
    state.refresh()
    p, cov, w = state.params, state.cov, state.work
    F = fisher_c(w.W, cov)
    grad = (cov.X.T @ w.E @ cov.Z).ravel(order="F")
    vecC = p.C.ravel(order="F")
    vecC = bounded_fisher_step(vecC, grad, F, state.prior.lambda_c, state.config.rho)
    p.C = vecC.reshape(cov.K, cov.L, order="F")


def fisher_d(W, U, V) -> np.ndarray:
    """M x M Fisher information for the diagonal of D."""
    P = np.einsum("ij,im,in->jmn", W, U, U, optimize=True)
    return np.einsum("jmn,jm,jn->mn", P, V, V, optimize=True)


def update_d(state: FitState):
    """Fisher-scoring step on the singular values (no projection needed)."""
    state.refresh()
    p, w = state.params, state.work
    if p.M == 0:
        return
    F = fisher_d(w.W, p.U, p.V)
    grad = np.einsum("im,ij,jm->m", p.U, w.E, p.V, optimize=True)
    p.D = bounded_fisher_step(p.D, grad, F, state.prior.lambda_d, state.config.rho)


def _latent_prior_precision(D, lam):
    d2 = np.maximum(D ** 2, D_SQ_FLOOR)
    if np.any(D ** 2 < D_SQ_FLOOR):
        warnings.warn("singular value near zero; prior precision for the factor step floored")
    return lam / d2


def update_g(state: FitState):
    """Optimization-projection step on the left factors G = U * D."""
    state.refresh()
    p, w = state.params, state.work
    if p.M == 0:
        return
    G = p.U * p.D
    lam_rows = _latent_prior_precision(p.D, state.prior.lambda_u)  # (M,)
    F = np.einsum("ij,jm,jn->imn", w.W, p.V, p.V, optimize=True)   # (I, M, M)
    rhs = w.E @ p.V - G * lam_rows
    G = G + _batched_capped_solve(F, rhs, lam_rows, state.config.rho)
    project_g(state, G)


def update_h(state: FitState):
    """Optimization-projection step on the right factors H = V * D."""
    state.refresh()
    p, w = state.params, state.work
    if p.M == 0:
        return
    H = p.V * p.D
    lam_rows = _latent_prior_precision(p.D, state.prior.lambda_v)
    F = np.einsum("ij,im,in->jmn", w.W, p.U, p.U, optimize=True)   # (J, M, M)
    rhs = w.E.T @ p.U - H * lam_rows
    H = H + _batched_capped_solve(F, rhs, lam_rows, state.config.rho)
    project_h(state, H)


def _newton_dispersion_step(offsets, grad, hess, rho_vec):
    """Per-coordinate bounded Newton (or gradient fallback) step."""
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        bad = int(np.flatnonzero(~(np.isfinite(grad) & np.isfinite(hess)))[0])
        raise NumericError(f"non-finite dispersion derivative at entry {bad}")
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = np.where(hess < 0, -grad / hess, grad)
    step = np.clip(xi, -rho_vec, rho_vec)
    return offsets + step, np.abs(xi) > rho_vec


def update_s(state: FitState):
    """Bounded Newton step on each s_i, adaptive caps, then the projection."""
    state.refresh()
    p, pr = state.params, state.prior
    derivs = nb.dispersion_derivatives(state.Y, state.work.mu, state.work.r)
    grad = -pr.lambda_s * (p.S - pr.m_s) + derivs.delta.sum(axis=1)
    hess = -pr.lambda_s + derivs.delta_prime.sum(axis=1)
    p.S, exceeded = _newton_dispersion_step(p.S, grad, hess, state.adapt.rho_s)
    state.adapt.rho_s = np.where(exceeded, state.adapt.rho_s / 2.0, state.config.rho)
    project_s(state)


def update_t(state: FitState):
    """Mirror of update_s for the column offsets."""
    state.refresh()
    p, pr = state.params, state.prior
    derivs = nb.dispersion_derivatives(state.Y, state.work.mu, state.work.r)
    grad = -pr.lambda_t * (p.T - pr.m_t) + derivs.delta.sum(axis=0)
    hess = -pr.lambda_t + derivs.delta_prime.sum(axis=0)
    p.T, exceeded = _newton_dispersion_step(p.T, grad, hess, state.adapt.rho_t)
    state.adapt.rho_t = np.where(exceeded, state.adapt.rho_t / 2.0, state.config.rho)
    project_t(state)


def bias_correct_dispersions(state: FitState, s_floor=None, t_floor=None):
    """Softplus-floor the log-dispersion offsets, then re-project.

    Applied once after the final iteration; counteracts the downward bias
    of the offsets when the true values are very low.
    """
    p = state.params
    s_floor = state.config.s_floor if s_floor is None else s_floor
    t_floor = state.config.t_floor if t_floor is None else t_floor
    p.S = s_floor + np.logaddexp(0.0, p.S - s_floor)
    project_s(state)
    p.T = t_floor + np.logaddexp(0.0, p.T - t_floor)
    project_t(state)


def finalize_factor_signs(params: GbmParams):
    """Sort singular values descending and fix the column sign convention."""
    if params.M == 0:
        return
    order = np.argsort(-params.D)
    params.D = params.D[order]
    params.U = params.U[:, order]
    params.V = params.V[:, order]
    signs = first_nonzero_signs(params.U)
    if np.any(signs == 0):
        warnings.warn("zero column in latent factors; sign convention left unset")
    flip = np.where(signs < 0, -1.0, 1.0)
    params.U *= flip
    params.V *= flip


# ---------------------------------------------------------------------------
# initialization and the outer loop
# ---------------------------------------------------------------------------

def initial_params(Y: DataMatrix, cov: CovariateSet, M: int,
                   prior: PriorConfig = None, config: FitConfig = None) -> GbmParams:
    """Least-squares warm start on log counts plus a tiny random factorization.

    A, B, C minimize the sum of squared log-scale residuals with the latent
    part excluded (which keeps the factors from chasing outliers before the
    dispersions are estimated); U, D, V come from the rank-M SVD of an
    I x J matrix with i.i.d. Normal(0, 1e-16) entries; S, T, omega start at
    zero and are refined by a few dispersion update cycles.
    """
    prior = prior or PriorConfig()
    config = config or FitConfig()
    if M >= min(cov.I, cov.J):
        raise ShapeError(f"M = {M} must be smaller than min(I, J) = {min(cov.I, cov.J)}")
    logy = np.log(Y.values + config.epsilon)
    C = cov.Xplus @ logy @ cov.Zplus.T
    A = (cov.Xplus @ logy - C @ cov.Z.T).T
    B = logy @ cov.Zplus.T - cov.X @ C
    rng = stream_rng(config.seed, "init")
    noise = rng.normal(scale=1e-8, size=(cov.I, cov.J))
    U, D, V = compact_svd(noise, M)
    params = GbmParams(A=A, B=B, C=C, D=D, U=U, V=V,
                       S=np.zeros(cov.I), T=np.zeros(cov.J), omega=0.0)
    state = make_state(Y, cov, params, prior, config)
    for _ in range(config.init_st_iters):
        update_s(state)
        update_t(state)
    return state.params


@dataclass
class FitResult:
    """Final constrained parameters plus the optimization trail."""

    params: GbmParams
    trace: list
    converged: bool
    iterations: int
    clamp_events: int
    cov: CovariateSet = field(repr=False, default=None)


_UPDATE_CYCLE = ("A", "B", "C", "D", "G", "H", "S", "T")


def fit(Y, cov, M, prior: PriorConfig = None, config: FitConfig = None,
        init_params: GbmParams = None) -> FitResult:
    """Fit the model by cycling optimization-projection steps per block.

    Stops when the relative change of log-likelihood + log-prior drops
    below config.tol or max_iter is reached; then applies the dispersion
    bias correction and finalizes the factor ordering/sign conventions.
    `init_params` overrides the default initialization (it must satisfy the
    constraints; used for warm starts and sensitivity checks).
    """
    prior = prior or PriorConfig()
    config = config or FitConfig()
    if not isinstance(Y, DataMatrix):
        Y = DataMatrix(Y)
    if init_params is None:
        params = initial_params(Y, cov, M, prior, config)
    else:
        params = init_params.copy()
        if params.M != M:
            raise ShapeError(f"init_params has M = {params.M}, expected {M}")
    state = make_state(Y, cov, params, prior, config)
    updates = {
        "A": update_a, "B": update_b, "C": update_c, "D": update_d,
        "G": update_g, "H": update_h, "S": update_s, "T": update_t,
    }
    trace = [state.log_posterior()]
    converged = False
    iterations = 0
    for it in range(1, config.max_iter + 1):
        for name in _UPDATE_CYCLE:
            if M == 0 and name in ("D", "G", "H"):
                continue
            try:
                updates[name](state)
            except NumericError as err:
                raise NumericError(f"iteration {it}, update {name}: {err}") from err
        lp = state.log_posterior()
        trace.append(lp)
        iterations = it
        if abs(lp - trace[-2]) / (abs(lp) + 1.0) < config.tol:
            converged = True
            break
    bias_correct_dispersions(state)
    finalize_factor_signs(state.params)
    report = check_constraints(state.params, cov)
    if not report.passed:
        warnings.warn("final state exceeds the constraint tolerance")
    return FitResult(params=state.params, trace=trace, converged=converged,
                     iterations=iterations, clamp_events=state.clamp_events, cov=cov)

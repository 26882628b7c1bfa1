"""Approximate standard errors for fitted models.

Three ingredients:

1. Conditional uncertainty: per-block inverse Fisher information treating
   every other block as known.  Alone, this understates the uncertainty of
   A, B, C, S, T whenever latent factors are present.
2. Joint latent uncertainty: variances for U and V come from the diagonal
   of the inverse constraint-augmented (bordered) Fisher information for
   (U, V) jointly, structured blockwise so the cost is O(I J^2 M^3) instead
   of a dense inversion over both factors.
3. Delta propagation: the extra variance of A, B (from U, V), of C (from
   A, B), and of S, T (from A, B, U, V), obtained by differentiating each
   block's one-step Fisher-scoring map through the source block and
   contracting the Jacobian with the source variances (diagonal, except
   that the C edges contract with the per-row conditional inverse blocks).

No standard errors are produced for D or the global log-dispersion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import nb
from .exceptions import DomainError, RankError, ShapeError, SizeGuardError
from .model import CovariateSet, GbmParams, PriorConfig, linear_predictor

FULL_FISHER_GUARD = 2000


@dataclass
class InferencePieces:
    """Workspace, scores, score derivatives, and conditional inverses."""

    W: np.ndarray
    E: np.ndarray
    mu: np.ndarray
    r: np.ndarray
    dWM: np.ndarray          # d w_ij / d linpred_ij
    dEM: np.ndarray          # d e_ij / d linpred_ij
    gradA: np.ndarray        # J x K likelihood score rows
    gradB: np.ndarray        # I x L
    gradC: np.ndarray        # K x L
    gradS: np.ndarray        # length I log-posterior score
    gradT: np.ndarray        # length J
    Fu: np.ndarray           # (I, M, M) regularized
    Fv: np.ndarray           # (J, M, M) regularized
    invFa: np.ndarray        # (J, K, K)
    invFb: np.ndarray        # (I, L, L)
    invFc: np.ndarray        # (KL, KL)
    invFu: np.ndarray        # (I, M, M)
    invFv: np.ndarray        # (J, M, M)
    invFs: np.ndarray        # length I
    invFt: np.ndarray        # length J


def preprocess(Y, params: GbmParams, cov: CovariateSet, prior: PriorConfig) -> InferencePieces:
    """One pass computing every reusable quantity of the inference algorithm."""
    values = Y.values if hasattr(Y, "values") else np.asarray(Y)
    linpred = linear_predictor(params, cov)
    work = nb.nb_workspace(values, linpred, params.S, params.T, params.omega)
    mu, r, W, E = work.mu, work.r, work.W, work.E
    dWM = mu * r ** 2 / (r + mu) ** 2
    dEM = -mu * r * (r + values) / (r + mu) ** 2
    derivs = nb.dispersion_derivatives(values, mu, r)
    gradS = -prior.lambda_s * (params.S - prior.m_s) + derivs.delta.sum(axis=1)
    gradT = -prior.lambda_t * (params.T - prior.m_t) + derivs.delta.sum(axis=0)

    X, Z = cov.X, cov.Z
    Fa = np.einsum("ij,ik,il->jkl", W, X, X, optimize=True)
    Fb = np.einsum("ij,jk,jl->ikl", W, Z, Z, optimize=True)
    invFa = np.linalg.inv(Fa + prior.lambda_a * np.eye(cov.K))
    invFb = np.linalg.inv(Fb + prior.lambda_b * np.eye(cov.L))
    F4 = np.einsum("jab,jl,jm->lamb", Fa, Z, Z, optimize=True)
    KL = cov.K * cov.L
    invFc = np.linalg.inv(F4.reshape(KL, KL) + prior.lambda_c * np.eye(KL))

    M = params.M
    if M > 0:
        VD = params.V * params.D
        UD = params.U * params.D
        Fu = np.einsum("ij,jm,jn->imn", W, VD, VD, optimize=True) + prior.lambda_u * np.eye(M)
        Fv = np.einsum("ij,im,in->jmn", W, UD, UD, optimize=True) + prior.lambda_v * np.eye(M)
        invFu = np.linalg.inv(Fu)
        invFv = np.linalg.inv(Fv)
    else:
        Fu = np.zeros((cov.I, 0, 0))
        Fv = np.zeros((cov.J, 0, 0))
        invFu = Fu.copy()
        invFv = Fv.copy()

    def observed_inv(lam, second_deriv_sums, label):
        denom = lam - second_deriv_sums
        bad = denom <= 0
        if np.any(bad):
            warnings.warn(
                f"observed information for {label} not positive at entries "
                f"{np.flatnonzero(bad).tolist()}; using absolute value"
            )
            denom = np.where(bad, np.abs(denom), denom)
        return 1.0 / denom

    invFs = observed_inv(prior.lambda_s, derivs.delta_prime.sum(axis=1), "S")
    invFt = observed_inv(prior.lambda_t, derivs.delta_prime.sum(axis=0), "T")
    return InferencePieces(
        W=W, E=E, mu=mu, r=r, dWM=dWM, dEM=dEM,
        gradA=E.T @ X, gradB=E @ Z, gradC=X.T @ E @ Z,
        gradS=gradS, gradT=gradT,
        Fu=Fu, Fv=Fv, invFa=invFa, invFb=invFb, invFc=invFc,
        invFu=invFu, invFv=invFv, invFs=invFs, invFt=invFt,
    )


def conditional_inverses(Y, params, cov, prior=None):
    """Per-block inverse Fisher information treating other blocks as known.

    Thin wrapper over :func:`preprocess`; the returned pieces carry invFa,
    invFb, invFc, invFu, invFv and the observed-information invFs/invFt.
    """
    return preprocess(Y, params, cov, prior or PriorConfig())


# ---------------------------------------------------------------------------
# constraint Jacobians and the joint (U, V) system
# ---------------------------------------------------------------------------

@dataclass
class ConstraintJacobians:
    """Jacobians of the orthogonality-to-covariates and orthonormality
    constraints, columns ordered like vec(U') / vec(V') (factor index fastest)."""

    Ju: np.ndarray   # (M K + M^2) x (I M)
    Jv: np.ndarray   # (M L + M^2) x (J M)


def _factor_jacobian(design: np.ndarray, factor: np.ndarray) -> np.ndarray:
    n, K = design.shape
    M = factor.shape[1]
    eye = np.eye(M)
    top = np.einsum("ik,mn->kmin", design, eye).reshape(K * M, n * M)
    bot = (
        np.einsum("ia,mn->amin", factor, eye)
        + np.einsum("an,im->amin", eye, factor)
    ).reshape(M * M, n * M)
    return np.vstack([top, bot])


def constraint_jacobians(params: GbmParams, cov: CovariateSet) -> ConstraintJacobians:
    if params.M == 0:
        raise ShapeError("constraint Jacobians require at least one latent factor")
    return ConstraintJacobians(
        Ju=_factor_jacobian(cov.X, params.U),
        Jv=_factor_jacobian(cov.Z, params.V),
    )


def latent_cross_information(pieces: InferencePieces, params: GbmParams) -> np.ndarray:
    """IM x JM cross information; block (i, j) is w_ij (D V_j)(D U_i)'."""
    DU = params.U * params.D
    DV = params.V * params.D
    I, J = pieces.W.shape
    M = params.M
    return np.einsum("ij,jm,in->imjn", pieces.W, DV, DU, optimize=True).reshape(I * M, J * M)


def _constrained_rank(M, K):
    """Independent constraint count: M K orthogonality rows plus the upper
    triangle of the symmetric orthonormality block (the assembled Jacobian
    carries all M^2 rows, of which M(M-1)/2 are duplicates)."""
    return M * K + M * (M + 1) // 2


def _pinv_checked(mat, expected_rank, label):
    """Pseudo-inverse tolerating the structural constraint redundancy but
    flagging any further rank loss."""
    u, s, vt = np.linalg.svd(mat, hermitian=False)
    tol = 1e-12 * max(s[0], 1.0)
    rank = int(np.count_nonzero(s > tol))
    if rank < expected_rank:
        raise RankError(
            f"{label}: rank {rank} below the {expected_rank} independent constraints")
    inv_s = np.where(s > tol, 1.0 / np.where(s > tol, s, 1.0), 0.0)
    return vt.T @ (inv_s[:, None] * u.T)


def joint_uv_uncertainty(pieces: InferencePieces, params: GbmParams, cov: CovariateSet,
                         prior: PriorConfig):
    """Variances of vec(U') and vec(V') from the bordered joint system.

    Eliminates the U block and its constraints analytically (the U Fisher is
    block diagonal per row), leaving one dense bordered solve in V.  The
    constraint Jacobians carry redundant rows for M > 1, so the constraint
    and bordered solves use rank-checked pseudo-inverses; the leading blocks
    are identical to those from deduplicated full-rank constraints.
    """
    M = params.M
    if M == 0:
        return np.zeros(0), np.zeros(0)
    I, J = cov.I, cov.J
    jac = constraint_jacobians(params, cov)
    Ju, Jv = jac.Ju, jac.Jv
    nJu = Ju.shape[0]

    Fuv = latent_cross_information(pieces, params)
    invFu = pieces.invFu
    FJ = np.einsum("imn,ink->imk", invFu, Ju.T.reshape(I, M, nJu), optimize=True).reshape(I * M, nJu)
    FuvFJ = Fuv.T @ FJ
    invJFJ = _pinv_checked(Ju @ FJ, _constrained_rank(M, cov.K),
                           "left-factor constraint system")
    FFuv = np.einsum("imn,inq->imq", invFu, Fuv.reshape(I, M, J * M), optimize=True).reshape(I * M, J * M)
    FuvFFuv = Fuv.T @ FFuv
    Fv_full = np.zeros((J * M, J * M))
    for j in range(J):
        Fv_full[j * M:(j + 1) * M, j * M:(j + 1) * M] = pieces.Fv[j]
    Amat = Fv_full - FuvFFuv + FuvFJ @ invJFJ @ FuvFJ.T
    nJv = Jv.shape[0]
    bordered = np.zeros((J * M + nJv, J * M + nJv))
    bordered[:J * M, :J * M] = Amat
    bordered[:J * M, J * M:] = Jv.T
    bordered[J * M:, :J * M] = Jv
    Bmat = _pinv_checked(bordered, J * M + _constrained_rank(M, cov.L),
                         "right-factor bordered system")
    Cmat = Bmat[:J * M, :J * M]
    FuvD = FFuv.T - FuvFJ @ invJFJ @ FJ.T
    d = np.einsum("imm->im", invFu).ravel()
    f = np.einsum("ki,ki->i", FJ.T, invJFJ @ FJ.T)
    g = np.einsum("ji,ji->i", FuvD, Cmat @ FuvD)
    varU = d - f + g
    varV = np.diag(Cmat).copy()
    if np.any(varU <= 0) or np.any(varV <= 0):
        warnings.warn("non-positive joint factor variance; inference may be unreliable")
    return varU, varV


# ---------------------------------------------------------------------------
# delta propagation: latent factors -> coefficients
# ---------------------------------------------------------------------------

def coef_jacobian_same_index(design, invF_j, grad_j, dWM_col, dEM_col, scaled_other):
    """Jacobian of the one-step coefficient-row estimator with respect to the
    whole factor on the data's long axis.

    design is n x K, scaled_other the length-M row d * fac_{j,:} of the
    factor sharing the coefficient row's index.  Returns K x (n M), columns
    ordered like vec(factor') of the long-axis factor.
    """
    Qj = -invF_j @ (design * dWM_col[:, None]).T
    Qj = Qj * (design @ (invF_j @ grad_j))[None, :]
    Qj = Qj + invF_j @ (design * dEM_col[:, None]).T
    return np.kron(Qj, scaled_other[None, :])


def coef_jacobian_other_index(design, invF_j, grad_j, dWM_col, dEM_col, other, D):
    """Jacobian of the one-step coefficient-row estimator with respect to the
    same-index row of the factor on the short axis.  Returns K x M."""
    M = D.shape[0]
    out = np.empty((design.shape[1], M))
    base = invF_j @ grad_j
    for m in range(M):
        col = D[m] * other[:, m]
        XdE = design.T @ (dEM_col * col)
        XdWX = design.T @ ((dWM_col * col)[:, None] * design)
        out[:, m] = (-invF_j @ XdWX) @ base + invF_j @ XdE
    return out


def propagate_uv_to_ab(pieces: InferencePieces, params: GbmParams, cov: CovariateSet,
                       varU: np.ndarray, varV: np.ndarray):
    """Extra variances of A and B due to uncertainty in the latent factors,
    as flat vectors in vec(A') / vec(B') order."""
    M = params.M
    JK, IL = cov.J * cov.K, cov.I * cov.L
    if M == 0:
        return np.zeros(JK), np.zeros(JK), np.zeros(IL), np.zeros(IL)
    varAfromU = np.empty(JK)
    varAfromV = np.empty(JK)
    for j in range(cov.J):
        dA = coef_jacobian_same_index(
            cov.X, pieces.invFa[j], pieces.gradA[j],
            pieces.dWM[:, j], pieces.dEM[:, j], params.D * params.V[j])
        varAfromU[j * cov.K:(j + 1) * cov.K] = (dA ** 2 * varU[None, :]).sum(axis=1)
        dAv = coef_jacobian_other_index(
            cov.X, pieces.invFa[j], pieces.gradA[j],
            pieces.dWM[:, j], pieces.dEM[:, j], params.U, params.D)
        varAfromV[j * cov.K:(j + 1) * cov.K] = \
            (dAv ** 2 * varV[j * M:(j + 1) * M][None, :]).sum(axis=1)

    varBfromU = np.empty(IL)
    varBfromV = np.empty(IL)
    dWMt, dEMt = pieces.dWM.T, pieces.dEM.T
    for i in range(cov.I):
        dBv = coef_jacobian_same_index(
            cov.Z, pieces.invFb[i], pieces.gradB[i],
            dWMt[:, i], dEMt[:, i], params.D * params.U[i])
        varBfromV[i * cov.L:(i + 1) * cov.L] = (dBv ** 2 * varV[None, :]).sum(axis=1)
        dBu = coef_jacobian_other_index(
            cov.Z, pieces.invFb[i], pieces.gradB[i],
            dWMt[:, i], dEMt[:, i], params.V, params.D)
        varBfromU[i * cov.L:(i + 1) * cov.L] = \
            (dBu ** 2 * varU[i * M:(i + 1) * M][None, :]).sum(axis=1)
    return varAfromU, varAfromV, varBfromU, varBfromV


# ---------------------------------------------------------------------------
# delta propagation: coefficients -> interactions
# ---------------------------------------------------------------------------

def interaction_jacobian_from_a(pieces, cov, j, k):
    """Jacobian column of the one-step C estimator with respect to a_{j k}."""
    X, Z = cov.X, cov.Z
    dWX = pieces.dWM[:, j] * X[:, k]
    dF = np.kron(np.outer(Z[j], Z[j]), X.T @ (dWX[:, None] * X))
    dgradC = np.outer(X.T @ (pieces.dEM[:, j] * X[:, k]), Z[j])
    vec_gradC = pieces.gradC.ravel(order="F")
    return pieces.invFc @ (-dF @ (pieces.invFc @ vec_gradC) + dgradC.ravel(order="F"))


def interaction_jacobian_from_b(pieces, cov, i, ell):
    """Jacobian column of the one-step C estimator with respect to b_{i ell}."""
    X, Z = cov.X, cov.Z
    dWZ = pieces.dWM[i, :] * Z[:, ell]
    dF = np.kron(Z.T @ (dWZ[:, None] * Z), np.outer(X[i], X[i]))
    dgradC = np.outer(X[i], (pieces.dEM[i, :] * Z[:, ell]) @ Z)
    vec_gradC = pieces.gradC.ravel(order="F")
    return pieces.invFc @ (-dF @ (pieces.invFc @ vec_gradC) + dgradC.ravel(order="F"))


def propagate_ab_to_c(pieces: InferencePieces, params: GbmParams, cov: CovariateSet,
                      varA=None, varB=None):
    """Extra variance of vec(C) due to uncertainty in A and in B.

    varA/varB are the full per-entry variances (conditional plus latent-
    propagated) in vec(A')/vec(B') order.  The conditional part contracts
    with the per-row inverse Fisher blocks; the propagated remainder, which
    carries the latent-to-coefficient chain, contracts diagonally.  Omitting
    varA/varB keeps the conditional part only.
    """
    K, L, I, J = cov.K, cov.L, cov.I, cov.J
    KL = K * L
    varCfromA = np.zeros(KL)
    cond_A = np.einsum("jkk->jk", pieces.invFa).ravel()
    extraA = np.zeros(J * K) if varA is None else np.maximum(varA - cond_A, 0.0)
    for j in range(J):
        block = np.column_stack([interaction_jacobian_from_a(pieces, cov, j, k) for k in range(K)])
        varCfromA += np.einsum("ck,kl,cl->c", block, pieces.invFa[j], block, optimize=True)
        varCfromA += block ** 2 @ extraA[j * K:(j + 1) * K]
    varCfromB = np.zeros(KL)
    cond_B = np.einsum("ill->il", pieces.invFb).ravel()
    extraB = np.zeros(I * L) if varB is None else np.maximum(varB - cond_B, 0.0)
    for i in range(I):
        block = np.column_stack([interaction_jacobian_from_b(pieces, cov, i, ell) for ell in range(L)])
        varCfromB += np.einsum("ck,kl,cl->c", block, pieces.invFb[i], block, optimize=True)
        varCfromB += block ** 2 @ extraB[i * L:(i + 1) * L]
    return varCfromA, varCfromB


# ---------------------------------------------------------------------------
# delta propagation: everything -> dispersions
# ---------------------------------------------------------------------------

def _score_sensitivities(W, E, mu, r):
    """Derivatives of the dispersion score pieces with respect to the linear
    predictor: Q = d delta / d linpred, and P entering the curvature term."""
    Q = -W * E / r
    P = 2.0 * W * Q / mu
    return Q, P


def dispersion_jacobian_same_axis(Q, P, scaled_other, invF, gradv):
    """d (one-step offset estimate) / d (same-axis factor row), all rows.

    Q, P are n x J; scaled_other is the J x M other-axis factor times D.
    Returns n x M: row i holds the sensitivities to factor row i.
    """
    dgrad = Q @ scaled_other
    dF = dgrad - P @ scaled_other
    return (-invF ** 2 * gradv)[:, None] * dF + invF[:, None] * dgrad


def dispersion_jacobian_other_axis(Q, P, scaled_same, invF, gradv):
    """d (one-step offset estimate) / d (every other-axis factor entry).

    scaled_same is the n x M same-axis factor times D.  Returns n x J x M.
    """
    dgrad = Q[:, :, None] * scaled_same[:, None, :]
    dF = dgrad - P[:, :, None] * scaled_same[:, None, :]
    return (-invF ** 2 * gradv)[:, None, None] * dF + invF[:, None, None] * dgrad


def propagate_to_dispersions(pieces: InferencePieces, params: GbmParams, cov: CovariateSet,
                             varA, varB, varU, varV):
    """Extra variances of S and T from uncertainty in A, B, U, V.

    varA/varB must be the full (conditional + propagated) variances in
    vec(A') / vec(B') order.  Returns two dicts keyed by source block.
    """
    M = params.M
    Q, P = _score_sensitivities(pieces.W, pieces.E, pieces.mu, pieces.r)
    Qt, Pt = Q.T, P.T
    X, Z = cov.X, cov.Z
    varA_mat = varA.reshape(cov.J, cov.K)
    varB_mat = varB.reshape(cov.I, cov.L)

    var_s = {
        "A": np.einsum("ijk,jk->i",
                       dispersion_jacobian_other_axis(Q, P, X, pieces.invFs, pieces.gradS) ** 2,
                       varA_mat, optimize=True),
        "B": np.einsum("im,im->i",
                       dispersion_jacobian_same_axis(Q, P, Z, pieces.invFs, pieces.gradS) ** 2,
                       varB_mat, optimize=True),
    }
    var_t = {
        "A": np.einsum("jm,jm->j",
                       dispersion_jacobian_same_axis(Qt, Pt, X, pieces.invFt, pieces.gradT) ** 2,
                       varA_mat, optimize=True),
        "B": np.einsum("jik,ik->j",
                       dispersion_jacobian_other_axis(Qt, Pt, Z, pieces.invFt, pieces.gradT) ** 2,
                       varB_mat, optimize=True),
    }
    if M > 0:
        UD = params.U * params.D
        VD = params.V * params.D
        varU_mat = varU.reshape(cov.I, M)
        varV_mat = varV.reshape(cov.J, M)
        var_s["U"] = np.einsum(
            "im,im->i",
            dispersion_jacobian_same_axis(Q, P, VD, pieces.invFs, pieces.gradS) ** 2,
            varU_mat, optimize=True)
        var_s["V"] = np.einsum(
            "ijm,jm->i",
            dispersion_jacobian_other_axis(Q, P, UD, pieces.invFs, pieces.gradS) ** 2,
            varV_mat, optimize=True)
        var_t["V"] = np.einsum(
            "jm,jm->j",
            dispersion_jacobian_same_axis(Qt, Pt, UD, pieces.invFt, pieces.gradT) ** 2,
            varV_mat, optimize=True)
        var_t["U"] = np.einsum(
            "jim,im->j",
            dispersion_jacobian_other_axis(Qt, Pt, VD, pieces.invFt, pieces.gradT) ** 2,
            varU_mat, optimize=True)
    else:
        var_s["U"] = np.zeros(cov.I)
        var_s["V"] = np.zeros(cov.I)
        var_t["U"] = np.zeros(cov.J)
        var_t["V"] = np.zeros(cov.J)
    return var_s, var_t


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

@dataclass
class InferenceResult:
    """Per-entry approximate standard errors plus the variance ledgers."""

    se_A: np.ndarray
    se_B: np.ndarray
    se_C: np.ndarray
    se_U: np.ndarray
    se_V: np.ndarray
    se_S: np.ndarray
    se_T: np.ndarray
    ledger: dict

    def blocks(self) -> dict:
        return {"A": self.se_A, "B": self.se_B, "C": self.se_C, "U": self.se_U,
                "V": self.se_V, "S": self.se_S, "T": self.se_T}


def standard_errors(Y, params: GbmParams, cov: CovariateSet,
                    prior: PriorConfig = None) -> InferenceResult:
    """Full inference pass: conditional + joint latent + delta propagation."""
    prior = prior or PriorConfig()
    pieces = preprocess(Y, params, cov, prior)
    M = params.M
    varU, varV = joint_uv_uncertainty(pieces, params, cov, prior)
    varAfromU, varAfromV, varBfromU, varBfromV = propagate_uv_to_ab(pieces, params, cov, varU, varV)
    varA = np.einsum("jkk->jk", pieces.invFa).ravel() + varAfromU + varAfromV
    varB = np.einsum("ill->il", pieces.invFb).ravel() + varBfromU + varBfromV
    varCfromA, varCfromB = propagate_ab_to_c(pieces, params, cov, varA, varB)
    varC = np.diag(pieces.invFc) + varCfromA + varCfromB
    var_s, var_t = propagate_to_dispersions(pieces, params, cov, varA, varB, varU, varV)
    varS = pieces.invFs + var_s["A"] + var_s["B"] + var_s["U"] + var_s["V"]
    varT = pieces.invFt + var_t["A"] + var_t["B"] + var_t["U"] + var_t["V"]
    ledger = {
        "varAfromU": varAfromU, "varAfromV": varAfromV,
        "varBfromU": varBfromU, "varBfromV": varBfromV,
        "varCfromA": varCfromA, "varCfromB": varCfromB,
        "varSfromA": var_s["A"], "varSfromB": var_s["B"],
        "varSfromU": var_s["U"], "varSfromV": var_s["V"],
        "varTfromA": var_t["A"], "varTfromB": var_t["B"],
        "varTfromU": var_t["U"], "varTfromV": var_t["V"],
        "varU": varU, "varV": varV,
    }
    return InferenceResult(
        se_A=np.sqrt(varA).reshape(cov.J, cov.K),
        se_B=np.sqrt(varB).reshape(cov.I, cov.L),
        se_C=np.sqrt(varC).reshape(cov.K, cov.L, order="F"),
        se_U=np.sqrt(varU).reshape(cov.I, M) if M else np.zeros((cov.I, 0)),
        se_V=np.sqrt(varV).reshape(cov.J, M) if M else np.zeros((cov.J, 0)),
        se_S=np.sqrt(varS),
        se_T=np.sqrt(varT),
        ledger=ledger,
    )


def wald_tests(estimates, ses, level=0.95):
    """Two-sided p-values and Wald confidence intervals."""
    estimates = np.asarray(estimates, dtype=np.float64)
    ses = np.asarray(ses, dtype=np.float64)
    if np.any(ses <= 0):
        raise DomainError("standard errors must be positive")
    if not 0.0 < level < 1.0:
        raise DomainError("level must be in (0, 1)")
    zstat = estimates / ses
    p_values = 2.0 * norm.sf(np.abs(zstat))
    z = norm.ppf(0.5 + level / 2.0)
    return {
        "p_values": p_values,
        "ci_lower": estimates - z * ses,
        "ci_upper": estimates + z * ses,
    }


# ---------------------------------------------------------------------------
# dense oracles
# ---------------------------------------------------------------------------

def _eta_jacobian(params: GbmParams, cov: CovariateSet) -> np.ndarray:
    """(I J) x P Jacobian of the vectorized linear predictor (rows in C order)
    with respect to [vec(A'), vec(B'), vec(C), d, vec(U'), vec(V')]."""
    X, Z, U, V, D = cov.X, cov.Z, params.U, params.V, params.D
    I, J, K, L, M = cov.I, cov.J, cov.K, cov.L, params.M
    A_part = np.einsum("jl,ik->ijlk", np.eye(J), X).reshape(I * J, J * K)
    B_part = np.einsum("im,jl->ijml", np.eye(I), Z).reshape(I * J, I * L)
    C_part = np.einsum("ik,jl->ijlk", X, Z).reshape(I * J, L * K)
    parts = [A_part, B_part, C_part]
    if M:
        parts.append((U[:, None, :] * V[None, :, :]).reshape(I * J, M))
        parts.append(np.einsum("ia,jm->ijam", np.eye(I), V * D).reshape(I * J, I * M))
        parts.append(np.einsum("ja,im->ijam", np.eye(J), U * D).reshape(I * J, J * M))
    else:
        parts.extend([np.zeros((I * J, 0))] * 3)
    return np.hstack(parts)


def full_fisher_variances(Y, params: GbmParams, cov: CovariateSet,
                          prior: PriorConfig = None) -> dict:
    """Variances from the dense bordered Fisher system over every block.

    Comparison oracle only: builds the full regularized Fisher information
    for (A, B, C, D, U, V) with every cross block, borders it with the
    stacked constraint Jacobians, inverts densely, and returns the leading
    diagonal split per block.  Guarded to small problems.
    """
    prior = prior or PriorConfig()
    I, J, K, L, M = cov.I, cov.J, cov.K, cov.L, params.M
    sizes = [J * K, I * L, K * L, M, I * M, J * M]
    P = sum(sizes)
    if P > FULL_FISHER_GUARD:
        raise SizeGuardError(f"full Fisher oracle refused: {P} parameters > {FULL_FISHER_GUARD}")
    values = Y.values if hasattr(Y, "values") else np.asarray(Y)
    linpred = linear_predictor(params, cov)
    work = nb.nb_workspace(values, linpred, params.S, params.T, params.omega)
    Jeta = _eta_jacobian(params, cov)
    F = Jeta.T @ (work.W.ravel()[:, None] * Jeta)
    lam = np.concatenate([
        np.full(J * K, prior.lambda_a), np.full(I * L, prior.lambda_b),
        np.full(K * L, prior.lambda_c), np.full(M, prior.lambda_d),
        np.full(I * M, prior.lambda_u), np.full(J * M, prior.lambda_v),
    ])
    F += np.diag(lam)

    Ja = np.kron(cov.Z.T, np.eye(K))
    Jb = np.kron(cov.X.T, np.eye(L))
    rows = [
        np.hstack([Ja, np.zeros((Ja.shape[0], P - J * K))]),
        np.hstack([np.zeros((Jb.shape[0], J * K)), Jb,
                   np.zeros((Jb.shape[0], P - J * K - I * L))]),
    ]
    if M:
        jac = constraint_jacobians(params, cov)
        off_u = J * K + I * L + K * L + M
        rows.append(np.hstack([np.zeros((jac.Ju.shape[0], off_u)), jac.Ju,
                               np.zeros((jac.Ju.shape[0], J * M))]))
        rows.append(np.hstack([np.zeros((jac.Jv.shape[0], off_u + I * M)), jac.Jv]))
    Jall = np.vstack(rows)
    nc = Jall.shape[0]
    bordered = np.zeros((P + nc, P + nc))
    bordered[:P, :P] = F
    bordered[:P, P:] = Jall.T
    bordered[P:, :P] = Jall
    # the factor constraint rows are redundant for M > 1
    variances = np.diag(np.linalg.pinv(bordered, rcond=1e-12))[:P]
    out = {}
    offset = 0
    for name, size in zip(("A", "B", "C", "D", "U", "V"), sizes):
        out[name] = variances[offset:offset + size]
        offset += size
    return {
        "A": out["A"].reshape(J, K),
        "B": out["B"].reshape(I, L),
        "C": out["C"].reshape(K, L, order="F"),
        "U": out["U"].reshape(I, M) if M else np.zeros((I, 0)),
        "V": out["V"].reshape(J, M) if M else np.zeros((J, 0)),
    }


def joint_uv_dense_oracle(pieces: InferencePieces, params: GbmParams, cov: CovariateSet):
    """Diagonal of the inverse bordered (U, V) system by direct dense inversion."""
    M = params.M
    I, J = cov.I, cov.J
    jac = constraint_jacobians(params, cov)
    Fuv = latent_cross_information(pieces, params)
    Fu_full = np.zeros((I * M, I * M))
    for i in range(I):
        Fu_full[i * M:(i + 1) * M, i * M:(i + 1) * M] = pieces.Fu[i]
    Fv_full = np.zeros((J * M, J * M))
    for j in range(J):
        Fv_full[j * M:(j + 1) * M, j * M:(j + 1) * M] = pieces.Fv[j]
    nu, nv = jac.Ju.shape[0], jac.Jv.shape[0]
    n = I * M + J * M + nu + nv
    big = np.zeros((n, n))
    big[:I * M, :I * M] = Fu_full
    big[:I * M, I * M:I * M + J * M] = Fuv
    big[I * M:I * M + J * M, :I * M] = Fuv.T
    big[I * M:I * M + J * M, I * M:I * M + J * M] = Fv_full
    big[:I * M, I * M + J * M:I * M + J * M + nu] = jac.Ju.T
    big[I * M + J * M:I * M + J * M + nu, :I * M] = jac.Ju
    big[I * M:I * M + J * M, I * M + J * M + nu:] = jac.Jv.T
    big[I * M + J * M + nu:, I * M:I * M + J * M] = jac.Jv
    diag = np.diag(np.linalg.pinv(big, rcond=1e-12))
    return diag[:I * M], diag[I * M:I * M + J * M]

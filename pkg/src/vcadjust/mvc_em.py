"""General engine: joint response/covariate mixed model fit by EM.

The stacked vector of responses and covariates follows a linear model with
random treatment-associated factors (scalar variances) and random blocking
factors (one small covariance matrix each, the first being the residual).
The EM iteration alternates conditional moments of the random effects given
the data with closed-form complete-data updates, handles all-or-none cell
missingness by simply dropping the empty cells, and reports treatment means
adjusted at the estimated covariate means with a plug-in covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .data_model import StackedData
from .design_algebra import (
    KroneckerCovariance,
    kron_cov_dense,
    kron_cov_inverse,
    rcb_partition,
)
from .errors import SingularityError

_CLIP_FRAC = 1e-12  # eigenvalue floor relative to trace, float-noise guard


@dataclass(frozen=True)
class MVCParams:
    """One parameter point: fixed effects, scalar variances, covariances."""

    beta: np.ndarray
    sigma2: np.ndarray  # treatment-associated factor variances, length r
    Sigmas: tuple[np.ndarray, ...]  # residual first, then one per blocking factor

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float))
        object.__setattr__(
            self, "Sigmas", tuple(np.asarray(S, dtype=float) for S in self.Sigmas)
        )


@dataclass(frozen=True)
class MultivariateModel:
    """Stacked design plus a current parameter point."""

    stacked: StackedData
    params: MVCParams

    @property
    def r(self) -> int:
        return len(self.stacked.C_list)

    @property
    def q(self) -> int:
        return len(self.stacked.D_list)

    def with_params(self, params: MVCParams) -> "MultivariateModel":
        return replace(self, params=params)


def initial_params(stacked: StackedData) -> MVCParams:
    """Scale-aware interior starting point.

    Fixed effects by ordinary least squares; residual covariance from the
    pooled per-cell residual cross-products; every other component at a
    tenth of the residual scale.
    """
    X, z = stacked.X, stacked.z
    n, m = stacked.n_obs, stacked.m
    beta, *_ = np.linalg.lstsq(X, z, rcond=None)
    R = (z - X @ beta).reshape(m + 1, n).T
    S0 = R.T @ R / n
    S0 += np.eye(m + 1) * (1e-10 * np.trace(S0) + 1e-12)
    Sigmas = [S0] + [0.1 * S0 for _ in stacked.D_list]
    s2 = np.full(len(stacked.C_list), 0.1 * S0[0, 0])
    return MVCParams(beta=beta, sigma2=s2, Sigmas=tuple(Sigmas))


def make_model(stacked: StackedData, params: MVCParams | None = None) -> MultivariateModel:
    return MultivariateModel(
        stacked=stacked, params=params if params is not None else initial_params(stacked)
    )


def assemble_V(model: MultivariateModel) -> np.ndarray:
    """Dense stacked covariance: treatment terms plus one Kronecker block
    per blocking factor plus the residual."""
    sd, p = model.stacked, model.params
    n, m = sd.n_obs, sd.m
    V = np.kron(p.Sigmas[0], np.eye(n))
    for s2, C in zip(p.sigma2, sd.C_list):
        V += s2 * (C @ C.T)
    for S, W in zip(p.Sigmas[1:], sd.W_list):
        V += np.kron(S, W @ W.T)
    return V


def _v_inverse_logdet(model: MultivariateModel):
    """(V^-1, log det V); structured per-block inverse on a complete RCB."""
    sd, p = model.stacked, model.params
    if sd.rcb is not None and model.r == 0 and model.q == 1:
        return _rcb_inverse(sd, p)
    V = assemble_V(model)
    try:
        c, low = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularityError("stacked covariance is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    Vinv = linalg.cho_solve((c, low), np.eye(V.shape[0]))
    return 0.5 * (Vinv + Vinv.T), logdet


def _rcb_inverse(sd: StackedData, p: MVCParams):
    """Block-diagonal inverse through the two-stratum Kronecker structure."""
    t, b = sd.rcb.t, sd.rcb.b
    n, m = sd.n_obs, sd.m
    G0 = p.Sigmas[0] + t * p.Sigmas[1]
    G1 = p.Sigmas[0]
    kc = KroneckerCovariance(partition=rcb_partition(t), strata=(G0, G1))
    block_inv = kron_cov_dense(kron_cov_inverse(kc))
    sign0, ld0 = np.linalg.slogdet(G0)
    sign1, ld1 = np.linalg.slogdet(G1)
    if sign0 <= 0 or sign1 <= 0:
        raise SingularityError("stacked covariance is not positive definite")
    logdet = b * (ld0 + (t - 1) * ld1)
    Vinv = np.zeros((n * (m + 1), n * (m + 1)))
    order = np.lexsort((sd.rcb.treat_of_record, sd.rcb.block_of_record))
    for j in range(b):
        recs = order[j * t : (j + 1) * t]
        pos = np.concatenate([v * n + recs for v in range(m + 1)])
        Vinv[np.ix_(pos, pos)] = block_inv
    return Vinv, float(logdet)


def observed_loglik(model: MultivariateModel, z: np.ndarray | None = None) -> float:
    """Exact Gaussian log-density of the stacked data at the current params."""
    sd, p = model.stacked, model.params
    zz = sd.z if z is None else np.asarray(z, dtype=float)
    Vinv, logdet = _v_inverse_logdet(model)
    r = zz - sd.X @ p.beta
    quad = float(r @ Vinv @ r)
    n_tot = sd.n_stacked
    return -0.5 * (n_tot * np.log(2 * np.pi) + logdet + quad)


@dataclass
class EStepMoments:
    """Conditional moments of every random factor given the data."""

    t_mean: tuple[np.ndarray, ...]
    t_sq: tuple[float, ...]  # E[T_i' T_i]
    b_mean: tuple[np.ndarray, ...]
    b_sq: tuple[np.ndarray, ...]  # (m+1)x(m+1) matrices of E[B_ij' B_ik]
    b0_mean: np.ndarray  # residual-factor mean at the current fixed effects
    b0_sq: np.ndarray
    resid_less_effects: np.ndarray = field(repr=False)  # z - sum C E[T] - sum D E[B]
    b0_trace: np.ndarray = field(repr=False)  # trace matrix of var(B_0 | z)


def e_step(
    model: MultivariateModel,
    z: np.ndarray | None = None,
    _vinv: np.ndarray | None = None,
) -> EStepMoments:
    """Conditional means and second moments of the random factors.

    Second moments add the trace of the conditional covariance block to the
    outer product of conditional means; the residual factor's moments come
    from the identity that it equals the data minus fixed effects minus
    every other random term.
    """
    sd, p = model.stacked, model.params
    zz = sd.z if z is None else np.asarray(z, dtype=float)
    n, m = sd.n_obs, sd.m
    mp1 = m + 1
    Vinv = _vinv if _vinv is not None else _v_inverse_logdet(model)[0]
    resid = zz - sd.X @ p.beta
    w = Vinv @ resid

    # cross-covariance columns of every factor with the data
    gam_cols: list[np.ndarray] = []
    prior_blocks: list[np.ndarray] = []
    M_cols: list[np.ndarray] = []
    for s2, C in zip(p.sigma2, sd.C_list):
        gam_cols.append(s2 * C)
        prior_blocks.append(s2 * np.eye(C.shape[1]))
        M_cols.append(C)
    for S, W, D in zip(p.Sigmas[1:], sd.W_list, sd.D_list):
        gam_cols.append(np.kron(S, W))
        prior_blocks.append(np.kron(S, np.eye(W.shape[1])))
        M_cols.append(D)

    t_mean, t_sq, b_mean, b_sq = [], [], [], []
    if gam_cols:
        Gam = np.hstack(gam_cols)
        M = np.hstack(M_cols)
        Psi = linalg.block_diag(*prior_blocks)
        u_mean = Gam.T @ w
        var_u = Psi - Gam.T @ Vinv @ Gam
        var_u = 0.5 * (var_u + var_u.T)
    else:
        Gam = M = np.zeros((n * mp1, 0))
        u_mean = np.zeros(0)
        var_u = np.zeros((0, 0))

    off = 0
    for i, C in enumerate(sd.C_list):
        ci = C.shape[1]
        mu = u_mean[off : off + ci]
        tr = float(np.trace(var_u[off : off + ci, off : off + ci]))
        t_mean.append(mu)
        t_sq.append(float(mu @ mu) + tr)
        off += ci
    for i, W in enumerate(sd.W_list):
        di = W.shape[1]
        tot = mp1 * di
        mu = u_mean[off : off + tot]
        vb = var_u[off : off + tot, off : off + tot]
        sq = np.zeros((mp1, mp1))
        for j in range(mp1):
            for k in range(mp1):
                mj = mu[j * di : (j + 1) * di]
                mk = mu[k * di : (k + 1) * di]
                sq[j, k] = mj @ mk + np.trace(
                    vb[j * di : (j + 1) * di, k * di : (k + 1) * di]
                )
        b_mean.append(mu)
        b_sq.append(0.5 * (sq + sq.T))
        off += tot

    # residual factor via its defining identity
    reduced = zz - M @ u_mean
    b0_mean = reduced - sd.X @ p.beta
    var_b0 = M @ var_u @ M.T
    b0_trace = np.zeros((mp1, mp1))
    for j in range(mp1):
        for k in range(mp1):
            b0_trace[j, k] = np.trace(var_b0[j * n : (j + 1) * n, k * n : (k + 1) * n])
    b0_sq = np.zeros((mp1, mp1))
    for j in range(mp1):
        for k in range(mp1):
            b0_sq[j, k] = (
                b0_mean[j * n : (j + 1) * n] @ b0_mean[k * n : (k + 1) * n]
                + b0_trace[j, k]
            )
    return EStepMoments(
        t_mean=tuple(t_mean),
        t_sq=tuple(t_sq),
        b_mean=tuple(b_mean),
        b_sq=tuple(b_sq),
        b0_mean=b0_mean,
        b0_sq=0.5 * (b0_sq + b0_sq.T),
        resid_less_effects=reduced,
        b0_trace=b0_trace,
    )


def m_step(
    moments: EStepMoments, model: MultivariateModel
) -> tuple[MVCParams, list[str]]:
    """Complete-data maximizers at the conditional moments.

    Fixed effects first (weighted by the current residual covariance), then
    the residual covariance from moments recomputed at the new fixed
    effects, then the remaining components from their own moments.  Any
    indefinite update is clipped at a relative eigenvalue floor and the
    event reported.
    """
    sd, p = model.stacked, model.params
    n, m = sd.n_obs, sd.m
    mp1 = m + 1
    events: list[str] = []

    S0_cur = p.Sigmas[0]
    try:
        S0_inv = np.linalg.inv(S0_cur)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("current residual covariance is singular") from exc
    Wt = np.kron(S0_inv, np.eye(n))
    XtW = sd.X.T @ Wt
    A = XtW @ sd.X
    try:
        beta = np.linalg.solve(A, XtW @ moments.resid_less_effects)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("weighted normal equations are singular") from exc

    b0 = moments.resid_less_effects - sd.X @ beta
    S0 = np.zeros((mp1, mp1))
    for j in range(mp1):
        for k in range(mp1):
            S0[j, k] = (
                b0[j * n : (j + 1) * n] @ b0[k * n : (k + 1) * n]
                + moments.b0_trace[j, k]
            )
    S0 = 0.5 * (S0 + S0.T) / n

    sigma2 = np.array(
        [sq / C.shape[1] for sq, C in zip(moments.t_sq, sd.C_list)]
    )
    Sigmas = [S0]
    for sq, W in zip(moments.b_sq, sd.W_list):
        Sigmas.append(sq / W.shape[1])

    clipped = []
    for i, S in enumerate(Sigmas):
        vals, vecs = np.linalg.eigh(S)
        floor = _CLIP_FRAC * max(float(np.trace(S)), 1e-300)
        if vals.min() < floor:
            if i == 0 and vals.min() < -1e-6 * max(float(np.trace(S)), 1.0):
                raise SingularityError(
                    "residual covariance update is indefinite; the model is "
                    "degenerate at the current iterate"
                )
            vals = np.clip(vals, floor, None)
            S = vecs @ np.diag(vals) @ vecs.T
            events.append(f"clipped eigenvalues of component {i}")
        clipped.append(0.5 * (S + S.T))
    sigma2 = np.clip(sigma2, 0.0, None)
    return MVCParams(beta=beta, sigma2=sigma2, Sigmas=tuple(clipped)), events


@dataclass
class MVCFit:
    """EM output: final parameter point and the likelihood path."""

    model: MultivariateModel
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    events: tuple[str, ...] = ()

    @property
    def params(self) -> MVCParams:
        return self.model.params

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def mu_z_hat(self) -> np.ndarray:
        sd = self.model.stacked
        beta = self.params.beta
        if sd.cov_mean_cols:
            # grand-mean columns appear in covariate declaration order
            cols = sorted(sd.cov_mean_cols.values())
            return beta[cols].copy()
        # treatments affect the covariates: the covariate cell-mean columns
        # follow the response means in blocks of t; report their averages
        t = len(sd.treatments)
        return np.array(
            [float(np.mean(beta[t + j * t : t + (j + 1) * t])) for j in range(sd.m)]
        )


def fit_em(
    model_init: MultivariateModel,
    z: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 2000,
) -> MVCFit:
    """Run EM from the supplied starting point until the likelihood settles.

    Convergence is declared when the observed-data log-likelihood moves by
    less than ``tol``; hitting ``max_iter`` returns the last iterate with
    ``converged=False``.
    """
    sd = model_init.stacked
    zz = sd.z if z is None else np.asarray(z, dtype=float)
    n_tot = sd.n_stacked
    model = model_init
    trace: list[float] = []
    events: list[str] = []
    converged = False
    it = 0
    for it in range(max_iter + 1):
        Vinv, logdet = _v_inverse_logdet(model)
        r = zz - sd.X @ model.params.beta
        ll = -0.5 * (n_tot * np.log(2 * np.pi) + logdet + float(r @ Vinv @ r))
        trace.append(ll)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
        if it == max_iter:
            break
        moments = e_step(model, zz, _vinv=Vinv)
        params, ev = m_step(moments, model)
        events.extend(ev)
        model = model.with_params(params)
    return MVCFit(
        model=model,
        loglik_trace=np.array(trace),
        iterations=it,
        converged=converged,
        events=tuple(events),
    )


@dataclass
class AdjustedMeansResult:
    means: np.ndarray
    covariance: np.ndarray
    evaluated_at: np.ndarray
    treatments: tuple[str, ...]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def adjusted_means_mvc(fit: MVCFit) -> AdjustedMeansResult:
    """Treatment means at the estimated covariate means, with plug-in SEs.

    Evaluating at the estimated covariate means kills the conditional-mean
    correction term, so the means are the treatment coordinates of the
    fitted fixed effects.  The covariance treats the fitted covariance as
    known and conditions on the covariates: the response block of the
    stacked covariance is replaced by its covariate-conditional Schur
    complement inside the GLS sandwich.
    """
    model = fit.model
    sd, p = model.stacked, model.params
    n, m = sd.n_obs, sd.m
    Vinv, _ = _v_inverse_logdet(model)
    A = sd.X.T @ Vinv @ sd.X
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("information matrix is singular") from exc
    if m == 0:
        full = Ainv
    else:
        V = assemble_V(model)
        V00 = V[:n, :n]
        V0r = V[:n, n:]
        Vrr = V[n:, n:]
        try:
            Vstar = V00 - V0r @ np.linalg.solve(Vrr, V0r.T)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("covariate block of V is singular") from exc
        U0 = (Vinv @ sd.X)[:n, :]
        full = Ainv @ (U0.T @ Vstar @ U0) @ Ainv
    full = 0.5 * (full + full.T)
    idx = sd.treat_cols
    return AdjustedMeansResult(
        means=p.beta[idx].copy(),
        covariance=full[np.ix_(idx, idx)],
        evaluated_at=fit.mu_z_hat,
        treatments=sd.treatments,
    )

"""Univariate linear mixed model fitter with scalar variance components.

Model: ``y = X b + sum_l Z_l u_l + e`` with ``u_l ~ N(0, s2_l I)`` and
``e ~ N(0, s2_e I)``.  The (restricted) log-likelihood is maximized over
log-variances with a quasi-Newton optimizer and a small multi-start grid of
variance ratios; the fixed effects are profiled out by GLS at each point.
Reported standard errors are plug-in GLS (no small-sample inflation).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .errors import SingularityError, ValidationError

_RATIO_STARTS = (1e-2, 1e-1, 1.0, 1e1, 1e2)
_BOUNDARY_FRAC = 1e-10  # components below this times var(y) report as zero


@dataclass(frozen=True)
class LmmSpec:
    """Response, full-rank fixed design, and random-factor incidence."""

    y: np.ndarray
    X: np.ndarray
    random: tuple[np.ndarray, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        rnd = tuple(np.asarray(Z, dtype=float) for Z in self.random)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "random", rnd)
        names = self.names or tuple(f"u{l}" for l in range(len(rnd)))
        object.__setattr__(self, "names", tuple(names))
        n, p = X.shape
        if len(y) != n:
            raise ValidationError("y and X disagree in length")
        if n <= p:
            raise ValidationError(f"need n > p, got n={n}, p={p}")
        if np.linalg.matrix_rank(X) < p:
            raise ValidationError("X is rank deficient")
        for Z in rnd:
            if Z.shape[0] != n:
                raise ValidationError("random incidence row count != n")


@dataclass
class LmmFit:
    beta_hat: np.ndarray
    sigma_e2: float
    sigma2: np.ndarray  # one per random factor
    beta_cov: np.ndarray
    loglik: float
    method: str
    converged: bool
    iterations: int
    flags: tuple[str, ...] = ()
    names: tuple[str, ...] = ()

    @property
    def var_comps(self) -> dict[str, float]:
        out = {"residual": self.sigma_e2}
        out.update({n: float(s) for n, s in zip(self.names, self.sigma2)})
        return out


def _neg_loglik(theta, y, X, grams, method):
    """Negative (restricted) log-likelihood at log-variances ``theta``."""
    n, p = X.shape
    V = np.exp(theta[0]) * np.eye(n)
    for th, G in zip(theta[1:], grams):
        V += np.exp(th) * G
    try:
        c, low = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError:
        return 1e30
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    Vi_X = linalg.cho_solve((c, low), X)
    Vi_y = linalg.cho_solve((c, low), y)
    A = X.T @ Vi_X
    try:
        # extreme multi-start points can make A nearly singular; the
        # objective just needs a finite value there
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            beta = linalg.solve(A, X.T @ Vi_y, assume_a="pos")
    except linalg.LinAlgError:
        return 1e30
    if not np.all(np.isfinite(beta)):
        return 1e30
    r = y - X @ beta
    quad = r @ linalg.cho_solve((c, low), r)
    if method == "ml":
        ll = -0.5 * (n * np.log(2 * np.pi) + logdet + quad)
    else:
        sign, ldA = np.linalg.slogdet(A)
        if sign <= 0:
            return 1e30
        ll = -0.5 * ((n - p) * np.log(2 * np.pi) + logdet + ldA + quad)
    return -ll


def _gls(y, X, V):
    c, low = linalg.cho_factor(V, lower=True)
    Vi_X = linalg.cho_solve((c, low), X)
    A = X.T @ Vi_X
    beta = linalg.solve(A, Vi_X.T @ y, assume_a="pos")
    cov = linalg.inv(A)
    return beta, 0.5 * (cov + cov.T)


def fit_lmm(
    spec: LmmSpec,
    method: str = "ml",
    tol: float = 1e-10,
    max_iter: int = 500,
) -> LmmFit:
    """Maximize the ML or REML likelihood over the variance components.

    Returns the best iterate with ``converged=False`` plus a flag when the
    optimizer hits ``max_iter``; variance estimates within a relative
    boundary band of zero are reported as exactly zero and flagged.
    """
    if method not in ("ml", "reml"):
        raise ValidationError(f"method must be 'ml' or 'reml', got {method!r}")
    y, X = spec.y, spec.X
    n, p = X.shape
    grams = [Z @ Z.T for Z in spec.random]
    vary = float(np.var(y))
    if vary <= 0:
        raise ValidationError("response is constant; nothing to fit")

    # OLS residual variance seeds the scale of every start
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    s2_ols = max(float(np.mean((y - X @ beta0) ** 2)), 1e-12 * vary)

    best = None
    nit_total = 0
    for ratio in _RATIO_STARTS:
        theta0 = np.log(np.r_[s2_ols, np.full(len(grams), ratio * s2_ols)])
        lo = np.log(1e-14 * vary)
        hi = np.log(1e8 * vary)
        res = optimize.minimize(
            _neg_loglik,
            theta0,
            args=(y, X, grams, method),
            method="L-BFGS-B",
            bounds=[(lo, hi)] * len(theta0),
            options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-10},
        )
        nit_total += res.nit
        if best is None or res.fun < best.fun:
            best = res

    theta = np.asarray(best.x, dtype=float)
    flags: list[str] = []
    converged = bool(best.success)
    if not converged:
        flags.append("non_convergence")

    # boundary handling: tiny components are reported as exact zeros
    sig = np.exp(theta)
    boundary = sig[1:] < _BOUNDARY_FRAC * vary
    if boundary.any():
        flags.append("boundary")

    V = sig[0] * np.eye(n)
    for keep, s, G in zip(~boundary, sig[1:], grams):
        if keep:
            V += s * G
    beta, beta_cov = _gls(y, X, V)
    loglik = -_neg_loglik(theta, y, X, grams, method)
    sig2 = np.where(boundary, 0.0, sig[1:])

    if _weakly_identified(theta, y, X, grams, method, boundary):
        flags.append("weakly_identified")

    return LmmFit(
        beta_hat=beta,
        sigma_e2=float(sig[0]),
        sigma2=sig2,
        beta_cov=beta_cov,
        loglik=float(loglik),
        method=method,
        converged=converged,
        iterations=int(nit_total),
        flags=tuple(flags),
        names=spec.names,
    )


def _weakly_identified(theta, y, X, grams, method, boundary, h=1e-3):
    """Flag a flat likelihood: singular numeric Hessian over the free coords."""
    free = [0] + [l + 1 for l in range(len(grams)) if not boundary[l]]
    k = len(free)
    if k < 2:
        return False
    H = np.zeros((k, k))

    def f(delta):
        th = theta.copy()
        for idx, d in zip(free, delta):
            th[idx] += d
        return _neg_loglik(th, y, X, grams, method)

    for a in range(k):
        for b in range(a, k):
            da, db = np.zeros(k), np.zeros(k)
            da[a], db[b] = h, h
            # central differences: O(h^2) bias, enough to expose a flat ridge
            H[a, b] = H[b, a] = (
                f(da + db) - f(da - db) - f(db - da) + f(-da - db)
            ) / (4 * h * h)
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    top = np.max(np.abs(ev))
    return bool(top <= 0 or np.min(ev) < 1e-5 * top)


def contrast(fit: LmmFit, coeffs: np.ndarray) -> tuple[float, float]:
    """Point estimate and plug-in standard error of ``coeffs' beta``."""
    c = np.asarray(coeffs, dtype=float).ravel()
    if c.shape[0] != fit.beta_hat.shape[0]:
        raise ValidationError(
            f"contrast length {c.shape[0]} != {fit.beta_hat.shape[0]} coefficients"
        )
    est = float(c @ fit.beta_hat)
    var = float(c @ fit.beta_cov @ c)
    if var < 0:
        raise SingularityError("negative contrast variance from beta covariance")
    return est, float(np.sqrt(var))

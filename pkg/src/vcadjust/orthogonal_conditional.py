"""Stratum regressions and conditional fits for orthogonal blocking designs.

When the replicate-unit covariance has the projector form handled by
:mod:`.design_algebra`, conditioning the response on the covariates yields
a univariate mixed model whose extra regressors are stratum means of the
covariates (block means, wholeplot means, row and column means).  Each
shipped recipe knows which means to append, which random factors to keep,
and which projector partition its replicate unit carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import Dataset, DesignSpec, incidence
from .design_algebra import (
    KroneckerCovariance,
    OrthogonalPartition,
    averaging_matrix,
    validate_partition,
)
from .errors import SingularityError, ValidationError
from .lmm import LmmFit, LmmSpec, fit_lmm


@dataclass(frozen=True)
class StratumRegression:
    """Per-stratum covariate slopes and conditional variances."""

    gammas: tuple[np.ndarray, ...]  # one m-vector per stratum
    lambdas: np.ndarray  # conditional variance per stratum

    @property
    def n_strata(self) -> int:
        return len(self.gammas)


def stratum_regressions(kc: KroneckerCovariance) -> StratumRegression:
    """Slopes and residual variances of response-on-covariates per stratum.

    Variable 0 of every stratum matrix is the response; the slope vector is
    the regression of it on the remaining variables within that stratum and
    the conditional variance is the corresponding Schur complement.
    """
    gammas, lambdas = [], []
    for l, G in enumerate(kc.strata):
        g_uu = G[0, 0]
        g_uz = G[0, 1:]
        G_zz = G[1:, 1:]
        if G_zz.size == 0:
            gammas.append(np.zeros(0))
            lambdas.append(float(g_uu))
            continue
        try:
            sol = np.linalg.solve(G_zz, g_uz)
        except np.linalg.LinAlgError as exc:
            raise SingularityError(
                f"stratum {l}: covariate block is singular"
            ) from exc
        gammas.append(sol)
        lambdas.append(float(g_uu - g_uz @ sol))
    return StratumRegression(gammas=tuple(gammas), lambdas=np.array(lambdas))


def adjusted_means_orthogonal(
    mu_y: np.ndarray, gamma_0: np.ndarray, zbar: np.ndarray, mu_z: np.ndarray
) -> np.ndarray:
    """Expected responses with every covariate held at its marginal mean.

    Only the grand-mean stratum slope survives the averaging, so the
    adjustment is the scalar ``gamma_0'(zbar - mu_z)`` subtracted from each
    treatment mean.
    """
    mu_y = np.asarray(mu_y, dtype=float)
    gamma_0 = np.atleast_1d(np.asarray(gamma_0, dtype=float))
    zbar = np.atleast_1d(np.asarray(zbar, dtype=float))
    mu_z = np.atleast_1d(np.asarray(mu_z, dtype=float))
    if not (len(gamma_0) == len(zbar) == len(mu_z)):
        raise ValidationError("gamma_0, zbar, mu_z must share one length")
    return mu_y - float(gamma_0 @ (zbar - mu_z))


@dataclass(frozen=True)
class DesignRecipe:
    """Resolved factor roles for one of the shipped orthogonal designs.

    ``mean_groupings`` are the factor tuples whose group means enter the
    conditional model as regressors; ``random_groupings`` name the random
    factors (each the crossing of the listed factors); ``replicate_factors``
    identify one replicate unit and ``unit_classifiers`` the sub-unit
    groupings that generate the unit's projector partition.
    """

    name: str
    treatment_factors: tuple[str, ...]
    mean_groupings: tuple[tuple[str, ...], ...]
    random_groupings: tuple[tuple[str, tuple[str, ...]], ...]
    replicate_factors: tuple[str, ...]
    unit_classifiers: tuple[tuple[str, ...], ...]


def recipe_for(spec: DesignSpec) -> DesignRecipe:
    """Build the recipe for ``spec`` from its declared factor roles."""
    tf, bf = spec.treatment_factors, spec.blocking_factors
    if spec.recipe in ("rcb", "incomplete_block"):
        block = bf[0]
        return DesignRecipe(
            name=spec.recipe,
            treatment_factors=tf,
            mean_groupings=((block,),),
            random_groupings=((block, (block,)),),
            replicate_factors=(block,),
            unit_classifiers=(),
        )
    if spec.recipe == "split_plot":
        wp_trt, _sp_trt = tf
        rep = bf[0]
        wholeplot = (wp_trt, rep)
        return DesignRecipe(
            name="split_plot",
            treatment_factors=tf,
            mean_groupings=(wholeplot,),
            random_groupings=(("wholeplot", wholeplot),),
            replicate_factors=wholeplot,
            unit_classifiers=(),
        )
    if spec.recipe == "blocked_split_plot":
        wp_trt, sp_trt = tf
        block, rep = bf
        wholeplot = (block, wp_trt, rep)
        return DesignRecipe(
            name="blocked_split_plot",
            treatment_factors=tf,
            mean_groupings=((block,), wholeplot),
            random_groupings=(
                (block, (block,)),
                (f"{block}*{wp_trt}", (block, wp_trt)),
                ("wholeplot", wholeplot),
                (f"{block}*{sp_trt}", (block, sp_trt)),
                (f"{block}*{wp_trt}*{sp_trt}", (block, wp_trt, sp_trt)),
            ),
            replicate_factors=(block,),
            unit_classifiers=((wp_trt, rep),),
        )
    if spec.recipe == "latin_square":
        row, col = bf
        return DesignRecipe(
            name="latin_square",
            treatment_factors=tf,
            mean_groupings=((row,), (col,)),
            random_groupings=((row, (row,)), (col, (col,))),
            replicate_factors=(),
            unit_classifiers=((row,), (col,)),
        )
    raise ValidationError(
        f"recipe {spec.recipe!r} has no orthogonal-conditional expansion"
    )


def _group_keys(ds: Dataset, grouping: tuple[str, ...]) -> np.ndarray:
    parts = [ds.factors[f] for f in grouping]
    return np.array([":".join(v) for v in zip(*parts)], dtype=object)


def conditional_regressors(recipe: DesignRecipe, ds: Dataset) -> Dataset:
    """Append the recipe's stratum-mean covariate columns to the dataset.

    Means are taken over complete cells; every group inside one grouping
    must hold the same number of complete cells, otherwise the layout is
    not orthogonal and belongs to the general engine.
    """
    mask = ds.complete_mask
    new_cols = []
    new_names = []
    for grouping in recipe.mean_groupings:
        keys = _group_keys(ds, grouping)
        complete_keys = keys[mask]
        uniq, counts = np.unique(complete_keys, return_counts=True)
        if len(uniq) == 0:
            raise ValidationError("no complete cells to average")
        if counts.min() != counts.max():
            raise ValidationError(
                f"grouping {grouping} has ragged cell counts; "
                "route this layout to the general engine"
            )
        for j, cov in enumerate(ds.covariate_names):
            vals = ds.covariates[:, j]
            means = {
                u: float(np.mean(vals[mask & (keys == u)])) for u in uniq
            }
            col = np.array(
                [
                    means[k] if ok and k in means else np.nan
                    for k, ok in zip(keys, mask)
                ]
            )
            new_cols.append(col)
            new_names.append(f"mean({cov}|{','.join(grouping)})")
    covs = np.column_stack([ds.covariates] + [c.reshape(-1, 1) for c in new_cols])
    return Dataset(
        factors=dict(ds.factors),
        response=ds.response,
        covariates=covs,
        covariate_names=ds.covariate_names + tuple(new_names),
        levels=dict(ds.levels),
    )


def recipe_partition(recipe: DesignRecipe, ds: Dataset) -> OrthogonalPartition:
    """Projector partition of one replicate unit, built from the layout.

    Every replicate unit must show the same cell count; the partition is
    the grand-mean projector, one centered averaging projector per unit
    classifier, and the residual.  The result is validated before return.
    """
    mask = ds.complete_mask
    if recipe.replicate_factors:
        unit_keys = _group_keys(ds, recipe.replicate_factors)[mask]
    else:
        unit_keys = np.array(["<all>"] * int(mask.sum()), dtype=object)
    uniq, counts = np.unique(unit_keys, return_counts=True)
    if counts.min() != counts.max():
        raise ValidationError(
            "replicate units have unequal cell counts; not an orthogonal layout"
        )
    k = int(counts[0])
    unit = uniq[0]
    in_unit = np.zeros(len(mask), dtype=bool)
    in_unit[np.where(mask)[0]] = unit_keys == unit

    A0 = averaging_matrix(k)
    projs = [A0]
    for classifier in recipe.unit_classifiers:
        keys = _group_keys(ds, classifier)[in_unit]
        P = np.zeros((k, k))
        for u in np.unique(keys):
            idx = np.where(keys == u)[0]
            P[np.ix_(idx, idx)] = 1.0 / len(idx)
        projs.append(P - A0)
    resid = np.eye(k) - sum(projs)
    projs.append(resid)
    part = OrthogonalPartition(dim=k, projectors=tuple(projs))
    report = validate_partition(part, tol=1e-8)
    if not report.passed:
        raise ValidationError(
            f"layout does not generate an orthogonal partition for recipe "
            f"{recipe.name!r}"
        )
    return part


@dataclass
class OrthogonalConditionalFit:
    """Conditional mixed fit of an orthogonal recipe with adjusted means."""

    treatments: tuple[str, ...]
    adjusted_means: np.ndarray
    adjusted_se: np.ndarray
    slopes: dict[str, float]
    var_comps: dict[str, float]
    loglik: float
    method: str
    lmm_fit: LmmFit
    dropped_regressors: tuple[str, ...]


def fit_orthogonal_conditional(
    recipe: DesignRecipe, ds: Dataset, method: str = "ml"
) -> OrthogonalConditionalFit:
    """Fit the recipe's conditional model and adjust the treatment means.

    The fixed part is the full treatment-combination cell means plus one
    slope per covariate column (original and appended stratum means); the
    random part is the recipe's factor list.  Constant regressor columns
    (for instance an identically-zero covariate) are dropped, pinning their
    slopes at zero.  Means are evaluated with every covariate column at the
    grand mean of its parent covariate.
    """
    aug = conditional_regressors(recipe, ds)
    mask = aug.complete_mask
    sub = aug.subset(mask)
    n = sub.n_records

    parts = [sub.factors[f] for f in recipe.treatment_factors]
    combos = [":".join(v) for v in zip(*parts)]
    labels = sorted(set(combos))
    cindex = {lab: i for i, lab in enumerate(labels)}
    T = incidence(np.array([cindex[c] for c in combos]), len(labels))
    t = len(labels)

    # parent covariate of each regressor column, for the plug-in values
    n_orig = len(ds.covariate_names)
    parents = list(range(n_orig))
    for grouping in recipe.mean_groupings:
        parents.extend(range(n_orig))
    grand = np.array([sub.covariates[:, j].mean() for j in range(n_orig)])

    keep, dropped = [], []
    for r in range(sub.m):
        col = sub.covariates[:, r]
        if np.var(col) <= 1e-12 * max(1.0, float(np.mean(col**2))):
            dropped.append(aug.covariate_names[r])
        else:
            keep.append(r)
    R = sub.covariates[:, keep]

    randoms, names = [], []
    for nm, grouping in recipe.random_groupings:
        keys = _group_keys(sub, grouping)
        uniq = sorted(set(keys))
        idx = {u: i for i, u in enumerate(uniq)}
        randoms.append(incidence(np.array([idx[k] for k in keys]), len(uniq)))
        names.append(nm)

    X = np.column_stack([T, R]) if R.size else T
    fit = fit_lmm(
        LmmSpec(y=sub.response, X=X, random=tuple(randoms), names=tuple(names)),
        method=method,
    )

    coef = np.zeros((t, X.shape[1]))
    coef[:, :t] = np.eye(t)
    for pos, r in enumerate(keep):
        coef[:, t + pos] = grand[parents[r]]
    adj = coef @ fit.beta_hat
    adj_cov = coef @ fit.beta_cov @ coef.T
    slopes = {aug.covariate_names[r]: float(fit.beta_hat[t + pos])
              for pos, r in enumerate(keep)}
    for nm in dropped:
        slopes[nm] = 0.0
    return OrthogonalConditionalFit(
        treatments=tuple(labels),
        adjusted_means=adj,
        adjusted_se=np.sqrt(np.clip(np.diag(adj_cov), 0.0, None)),
        slopes=slopes,
        var_comps=fit.var_comps,
        loglik=fit.loglik,
        method=method,
        lmm_fit=fit,
        dropped_regressors=tuple(dropped),
    )

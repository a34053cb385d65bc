"""Batch command-line surface.

Subcommands: ``fit`` (parameter estimates and log-likelihood), ``adjust``
(adjusted-means table), ``compare`` (fixed/mixed/bivariate side by side on
a complete RCB), ``contrast`` (a treatment contrast with its standard
error), ``check-design`` (projector-partition and layout validation), and
``simulate`` (data generation and the bias study).  Exit codes: 0 success,
2 input/validation error, 3 non-convergence, 4 singularity; every failure
prints one machine-parseable line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .bivariate_rcb import (
    adjusted_means_bivariate,
    fit_bivariate_rcb_ml,
    fit_conditional_ibd,
    fit_naive_block_mixed,
)
from .data_model import build_stacked, load_dataset, load_design_spec
from .design_algebra import validate_partition
from .errors import ConvergenceError, SingularityError, ValidationError
from .lmm import contrast as lmm_contrast
from .mvc_em import adjusted_means_mvc, fit_em, make_model
from .orthogonal_conditional import (
    fit_orthogonal_conditional,
    recipe_for,
    recipe_partition,
)
from .rcb_classical import fit_fixed_rcb, fit_mixed_rcb, rcb_arrays
from .simulate import BivariateParams, SimConfig, bias_study, gen_bivariate_rcb

MODELS = ("fixed", "mixed", "bivariate", "orthogonal", "mvc")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGENCE = 3
EXIT_SINGULAR = 4


@dataclass
class RunRequest:
    command: str
    model: str = "bivariate"
    method: str = "ml"
    data_path: str | None = None
    design_path: str | None = None
    output_path: str | None = None
    format: str = "tsv"
    tol: float | None = None
    max_iter: int | None = None
    coeffs: str | None = None
    sim: dict = field(default_factory=dict)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def _jval(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(format(float(x), ".10g"))
    return str(x)


@dataclass
class Artifact:
    """Scalar section plus named tables, rendered to TSV or JSON."""

    scalars: dict
    tables: dict  # name -> (columns, rows)

    def render(self, fmt: str) -> str:
        if fmt == "json":
            payload = {"params": {k: _jval(v) for k, v in self.scalars.items()}}
            for name, (cols, rows) in self.tables.items():
                payload[name] = {
                    "columns": list(cols),
                    "rows": [[_jval(v) for v in row] for row in rows],
                }
            return json.dumps(payload, indent=2) + "\n"
        lines = []
        for k, v in self.scalars.items():
            lines.append(f"{k}\t{_fmt(v)}")
        for name, (cols, rows) in self.tables.items():
            lines.append("")
            lines.append(f"# {name}")
            lines.append("\t".join(cols))
            for row in rows:
                lines.append("\t".join(_fmt(v) for v in row))
        return "\n".join(lines) + "\n"


def _emit(artifact: Artifact, req: RunRequest):
    text = artifact.render(req.format)
    if req.output_path:
        with open(req.output_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load(req: RunRequest):
    if not req.design_path or not req.data_path:
        raise ValidationError("both --data and --design are required")
    spec = load_design_spec(req.design_path)
    ds = load_dataset(req.data_path, spec)
    return ds, spec


def _is_complete_rcb(ds, spec) -> bool:
    if spec.recipe != "rcb" or spec.m != 1 or len(spec.blocking_factors) != 1:
        return False
    try:
        rcb_arrays(ds, spec)
        return True
    except (ValidationError, SingularityError):
        return False


def _fit_artifact(req: RunRequest, ds, spec) -> tuple[Artifact, int]:
    code = EXIT_OK
    if req.model == "fixed":
        f = fit_fixed_rcb(ds, spec)
        n = len(f.treatments) * len(f.blocks)
        loglik = -0.5 * n * (np.log(2 * np.pi) + np.log(f.sigma_e2_hat) + 1.0)
        scalars = {
            "model": "fixed",
            "gamma_ols": f.gamma_ols,
            "sigma_e2": f.sigma_e2_hat,
            "loglik": loglik,
        }
        rows = [
            [lab, f.adjusted_means[i], f.adjusted_se[i], f.tau_hat[i]]
            for i, lab in enumerate(f.treatments)
        ]
        return (
            Artifact(scalars, {"treatments": (["treatment", "adj_mean", "std_err", "effect"], rows)}),
            code,
        )
    if req.model == "mixed":
        if _is_complete_rcb(ds, spec):
            f = fit_mixed_rcb(ds, spec, method=req.method)
            scalars = {
                "model": "mixed",
                "method": req.method,
                "gamma_mixed": f.gamma_mixed,
                "sigma_e2": f.sigma_e2_hat,
                "sigma_b2": f.sigma_b2_hat,
                "rho": f.rho_hat,
                "loglik": f.loglik,
                "converged": f.lmm_fit.converged,
            }
            rows = [
                [lab, f.adjusted_means[i], f.adjusted_se[i], f.tau_hat[i]]
                for i, lab in enumerate(f.treatments)
            ]
            if not f.lmm_fit.converged:
                code = EXIT_NONCONVERGENCE
            return (
                Artifact(
                    scalars,
                    {"treatments": (["treatment", "adj_mean", "std_err", "effect"], rows)},
                ),
                code,
            )
        f = fit_naive_block_mixed(ds, spec, method=req.method)
        scalars = {
            "model": "mixed",
            "method": req.method,
            "gamma": f.gamma_e,
            "sigma_e2": f.sigma_e2,
            "sigma_b2": f.sigma_b2,
            "loglik": f.loglik,
            "converged": f.lmm_fit.converged,
        }
        rows = [
            [lab, f.adjusted_means[i], f.adjusted_se[i], f.effects[i], f.effect_se[i]]
            for i, lab in enumerate(f.treatments)
        ]
        if not f.lmm_fit.converged:
            code = EXIT_NONCONVERGENCE
        return (
            Artifact(
                scalars,
                {
                    "treatments": (
                        ["treatment", "adj_mean", "adj_se", "effect", "effect_se"],
                        rows,
                    )
                },
            ),
            code,
        )
    if req.model == "bivariate":
        if req.method == "ml" and _is_complete_rcb(ds, spec):
            fit, params, cond = fit_bivariate_rcb_ml(ds, spec)
            means, se = adjusted_means_bivariate(fit)
            scalars = {
                "model": "bivariate",
                "method": "ml",
                "gamma_e": fit.gamma_e_hat,
                "gamma_be": fit.gamma_be_hat,
                "gamma_b": cond.gamma_b,
                "sigma_e2": cond.sigma_e2,
                "sigma_b2": cond.sigma_b2,
                "mu_z": fit.mu_z_hat,
                "loglik": fit.loglik,
                "sigma_b_psd": params.sigma_b_psd,
            }
            rows = [
                [lab, means[i], se[i]] for i, lab in enumerate(fit.treatments)
            ]
            return (
                Artifact(
                    scalars,
                    {"treatments": (["treatment", "adj_mean", "std_err"], rows)},
                ),
                code,
            )
        f = fit_conditional_ibd(ds, spec, method=req.method)
        scalars = {
            "model": "bivariate",
            "method": req.method,
            "gamma_e": f.gamma_e,
            "gamma_b": f.gamma_b,
            "sigma_e2": f.sigma_e2,
            "sigma_b2": f.sigma_b2,
            "loglik": f.loglik,
            "converged": f.lmm_fit.converged,
        }
        rows = [
            [lab, f.adjusted_means[i], f.adjusted_se[i], f.effects[i], f.effect_se[i]]
            for i, lab in enumerate(f.treatments)
        ]
        if not f.lmm_fit.converged:
            code = EXIT_NONCONVERGENCE
        return (
            Artifact(
                scalars,
                {
                    "treatments": (
                        ["treatment", "adj_mean", "adj_se", "effect", "effect_se"],
                        rows,
                    )
                },
            ),
            code,
        )
    if req.model == "orthogonal":
        recipe = recipe_for(spec)
        f = fit_orthogonal_conditional(recipe, ds, method=req.method)
        scalars = {"model": "orthogonal", "method": req.method, "loglik": f.loglik}
        for name, val in f.slopes.items():
            scalars[f"slope[{name}]"] = val
        for name, val in f.var_comps.items():
            scalars[f"varcomp[{name}]"] = val
        scalars["converged"] = f.lmm_fit.converged
        rows = [
            [lab, f.adjusted_means[i], f.adjusted_se[i]]
            for i, lab in enumerate(f.treatments)
        ]
        if not f.lmm_fit.converged:
            code = EXIT_NONCONVERGENCE
        return (
            Artifact(
                scalars, {"treatments": (["treatment", "adj_mean", "std_err"], rows)}
            ),
            code,
        )
    if req.model == "mvc":
        if req.method == "reml":
            raise ValidationError("reml unsupported for mvc")
        stacked = build_stacked(ds, spec)
        fit = fit_em(
            make_model(stacked),
            tol=req.tol if req.tol is not None else 1e-8,
            max_iter=req.max_iter if req.max_iter is not None else 2000,
        )
        res = adjusted_means_mvc(fit)
        scalars = {
            "model": "mvc",
            "method": "ml",
            "loglik": fit.loglik,
            "iterations": fit.iterations,
            "converged": fit.converged,
        }
        # cov_mean_cols preserves covariate declaration order, matching
        # the order of the evaluated-at vector
        for j, name in enumerate(stacked.cov_mean_cols):
            scalars[f"mu_z[{name}]"] = res.evaluated_at[j]
        S0 = fit.params.Sigmas[0]
        for j in range(S0.shape[0]):
            for k in range(j, S0.shape[0]):
                scalars[f"Sigma0[{j},{k}]"] = S0[j, k]
        for i, S in enumerate(fit.params.Sigmas[1:], start=1):
            for j in range(S.shape[0]):
                for k in range(j, S.shape[0]):
                    scalars[f"Sigma{i}[{j},{k}]"] = S[j, k]
        rows = [
            [lab, res.means[i], res.se[i]] for i, lab in enumerate(res.treatments)
        ]
        if not fit.converged:
            code = EXIT_NONCONVERGENCE
        return (
            Artifact(
                scalars, {"treatments": (["treatment", "adj_mean", "std_err"], rows)}
            ),
            code,
        )
    raise ValidationError(f"unknown model {req.model!r}; expected one of {MODELS}")


def _cmd_fit(req: RunRequest) -> int:
    ds, spec = _load(req)
    artifact, code = _fit_artifact(req, ds, spec)
    _emit(artifact, req)
    return code


def _cmd_adjust(req: RunRequest) -> int:
    ds, spec = _load(req)
    artifact, code = _fit_artifact(req, ds, spec)
    table = artifact.tables["treatments"]
    cols, rows = table
    keep = [cols.index(c) for c in cols if c in ("treatment", "adj_mean", "std_err", "adj_se")]
    out_cols = ["treatment", "adj_mean", "std_err"]
    out_rows = [[row[i] for i in keep] for row in rows]
    _emit(
        Artifact(
            {"model": req.model, "method": req.method},
            {"adjusted_means": (out_cols, out_rows)},
        ),
        req,
    )
    return code


def _cmd_compare(req: RunRequest) -> int:
    ds, spec = _load(req)
    if not _is_complete_rcb(ds, spec):
        raise ValidationError(
            "compare needs a complete randomized-blocks layout with one covariate"
        )
    fx = fit_fixed_rcb(ds, spec)
    mx = fit_mixed_rcb(ds, spec, method=req.method)
    bv_fit, _bv_params, bv_cond = fit_bivariate_rcb_ml(ds, spec)
    bv_means, bv_se = adjusted_means_bivariate(bv_fit)
    scalars = {
        "gamma_ols": fx.gamma_ols,
        "gamma_mixed": mx.gamma_mixed,
        "gamma_be": bv_fit.gamma_be_hat,
        "sigma_e2_mixed": mx.sigma_e2_hat,
        "sigma_b2_mixed": mx.sigma_b2_hat,
        "rho_mixed": mx.rho_hat,
        "method": req.method,
    }
    rows = []
    for i, lab in enumerate(fx.treatments):
        rows.append(
            [
                lab,
                fx.adjusted_means[i],
                fx.adjusted_se[i],
                mx.adjusted_means[i],
                mx.adjusted_se[i],
                bv_means[i],
                bv_se[i],
            ]
        )
    cols = [
        "treatment",
        "fixed_adj_mean",
        "fixed_std_err",
        "mixed_adj_mean",
        "mixed_std_err",
        "bivariate_adj_mean",
        "bivariate_std_err",
    ]
    _emit(Artifact(scalars, {"comparison": (cols, rows)}), req)
    return EXIT_OK if mx.lmm_fit.converged else EXIT_NONCONVERGENCE


def _cmd_check_design(req: RunRequest) -> int:
    ds, spec = _load(req)
    recipe = recipe_for(spec)
    part = recipe_partition(recipe, ds)
    report = validate_partition(part, tol=req.tol if req.tol is not None else 1e-10)
    scalars = {
        "recipe": recipe.name,
        "partition": "pass" if report.passed else "fail",
        "dim": part.dim,
        "strata": part.n_strata,
        "idempotency": report.idempotency,
        "orthogonality": report.orthogonality,
        "completeness": report.completeness,
        "grand_mean": report.grand_mean,
    }
    _emit(Artifact(scalars, {}), req)
    return EXIT_OK if report.passed else EXIT_INPUT


def _parse_coeffs(text: str, labels) -> np.ndarray:
    out = np.zeros(len(labels))
    index = {lab: i for i, lab in enumerate(labels)}
    for part in text.split(","):
        if "=" not in part:
            raise ValidationError(f"bad contrast term {part!r}; use LABEL=COEF")
        lab, val = part.split("=", 1)
        lab = lab.strip()
        if lab not in index:
            raise ValidationError(f"unknown treatment {lab!r} in contrast")
        try:
            out[index[lab]] = float(val)
        except ValueError:
            raise ValidationError(f"non-numeric coefficient {val!r}") from None
    return out


def _cmd_contrast(req: RunRequest) -> int:
    if not req.coeffs:
        raise ValidationError("--coeffs is required for contrast")
    ds, spec = _load(req)
    if req.model == "mixed":
        f = fit_naive_block_mixed(ds, spec, method=req.method)
    elif req.model == "bivariate":
        f = fit_conditional_ibd(ds, spec, method=req.method)
    else:
        raise ValidationError("contrast supports models 'mixed' and 'bivariate'")
    c = _parse_coeffs(req.coeffs, f.treatments)
    full = np.zeros(len(f.lmm_fit.beta_hat))
    full[: len(c)] = c
    est, se = lmm_contrast(f.lmm_fit, full)
    _emit(
        Artifact(
            {
                "model": req.model,
                "method": req.method,
                "contrast": req.coeffs,
                "estimate": est,
                "std_err": se,
            },
            {},
        ),
        req,
    )
    return EXIT_OK if f.lmm_fit.converged else EXIT_NONCONVERGENCE


def _cmd_simulate(req: RunRequest) -> int:
    sim = req.sim
    mu_y = np.full(sim["t"], sim.get("mu_y", 0.0))
    params = BivariateParams(
        mu_y=mu_y,
        mu_z=sim.get("mu_z", 0.0),
        Sigma_B=np.array(
            [
                [sim["sigma_b"][0], sim["sigma_b"][1]],
                [sim["sigma_b"][1], sim["sigma_b"][2]],
            ]
        ),
        Sigma_E=np.array(
            [
                [sim["sigma_e"][0], sim["sigma_e"][1]],
                [sim["sigma_e"][1], sim["sigma_e"][2]],
            ]
        ),
    )
    cfg = SimConfig(
        t=sim["t"],
        b=sim["b"],
        params=params,
        replicates=sim.get("replicates", 1),
        seed=sim.get("seed", 0),
        condition_on_z=sim.get("study") == "bias",
    )
    if sim.get("study") == "bias":
        res = bias_study(cfg)
        rows = [
            [r.estimator, r.target, r.mc_mean, r.mc_se, r.bias, r.flag]
            for r in res.rows
        ]
        _emit(
            Artifact(
                {
                    "replicates": res.replicates,
                    "gamma_e": res.gamma_e,
                    "gamma_be": res.gamma_be,
                    "rho": res.rho,
                    "mixing_value": res.mixing_value,
                },
                {
                    "study": (
                        ["estimator", "target", "mc_mean", "mc_se", "bias", "flag"],
                        rows,
                    )
                },
            ),
            req,
        )
        return EXIT_OK
    ds = gen_bivariate_rcb(cfg)[sim.get("rep", 0)]
    lines = ["treatment,block,y,z"]
    for i in range(ds.n_records):
        lines.append(
            ",".join(
                [
                    str(ds.factors["treatment"][i]),
                    str(ds.factors["block"][i]),
                    _fmt(float(ds.response[i])),
                    _fmt(float(ds.covariates[i, 0])),
                ]
            )
        )
    text = "\n".join(lines) + "\n"
    if req.output_path:
        with open(req.output_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "adjust": _cmd_adjust,
    "compare": _cmd_compare,
    "check-design": _cmd_check_design,
    "contrast": _cmd_contrast,
    "simulate": _cmd_simulate,
}


def run(request: RunRequest) -> int:
    """Execute one request; returns the process exit code."""
    handler = _COMMANDS.get(request.command)
    try:
        if handler is None:
            raise ValidationError(f"unknown command {request.command!r}")
        if request.format not in ("tsv", "json"):
            raise ValidationError(f"unknown format {request.format!r}")
        if request.method not in ("ml", "reml"):
            raise ValidationError(f"unknown method {request.method!r}")
        return handler(request)
    except ValidationError as exc:
        _diag(EXIT_INPUT, "input", exc)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        _diag(EXIT_INPUT, "input", exc)
        return EXIT_INPUT
    except SingularityError as exc:
        _diag(EXIT_SINGULAR, "singularity", exc)
        return EXIT_SINGULAR
    except ConvergenceError as exc:
        _diag(EXIT_NONCONVERGENCE, "non-convergence", exc)
        return EXIT_NONCONVERGENCE


def _diag(code: int, kind: str, exc: Exception):
    msg = str(exc).replace("\n", " ")
    sys.stderr.write(f'vcadjust: code={code} kind={kind} msg="{msg}"\n')


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vcadjust",
        description="Covariate-adjusted treatment means for designed experiments.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help="delimited data file")
            p.add_argument("--design", required=True, help="JSON design spec")
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--format", default="tsv", choices=["tsv", "json"])
        p.add_argument("--tol", type=float, default=None)
        p.add_argument("--max-iter", type=int, default=None)

    for name in ("fit", "adjust"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--model", default="bivariate", choices=MODELS)
        p.add_argument("--method", default="ml", choices=["ml", "reml"])

    p = sub.add_parser("compare")
    common(p)
    p.add_argument("--method", default="ml", choices=["ml", "reml"])

    p = sub.add_parser("check-design")
    common(p)

    p = sub.add_parser("contrast")
    common(p)
    p.add_argument("--model", default="bivariate", choices=["mixed", "bivariate"])
    p.add_argument("--method", default="reml", choices=["ml", "reml"])
    p.add_argument("--coeffs", required=True, help="e.g. 'A=1,B=-1'")

    p = sub.add_parser("simulate")
    common(p, data=False)
    p.add_argument("--study", default="generate", choices=["generate", "bias"])
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--mu-y", type=float, default=0.0)
    p.add_argument("--mu-z", type=float, default=0.0)
    p.add_argument("--sigma-b", default="1,0,1", help="block cov: yy,yz,zz")
    p.add_argument("--sigma-e", default="1,0.5,1", help="residual cov: yy,yz,zz")
    return ap


def _request_from_args(args) -> RunRequest:
    req = RunRequest(
        command=args.command,
        model=getattr(args, "model", "bivariate"),
        method=getattr(args, "method", "ml"),
        data_path=getattr(args, "data", None),
        design_path=getattr(args, "design", None),
        output_path=args.out,
        format=args.format,
        tol=args.tol,
        max_iter=args.max_iter,
        coeffs=getattr(args, "coeffs", None),
    )
    if args.command == "simulate":
        req.sim = {
            "study": args.study,
            "t": args.t,
            "b": args.b,
            "replicates": args.replicates,
            "seed": args.seed,
            "rep": args.rep,
            "mu_y": args.mu_y,
            "mu_z": args.mu_z,
            "sigma_b": [float(v) for v in args.sigma_b.split(",")],
            "sigma_e": [float(v) for v in args.sigma_e.split(",")],
        }
    return req


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        req = _request_from_args(args)
    except (ValueError, ValidationError) as exc:
        _diag(EXIT_INPUT, "input", exc)
        return EXIT_INPUT
    return run(req)


if __name__ == "__main__":
    sys.exit(main())

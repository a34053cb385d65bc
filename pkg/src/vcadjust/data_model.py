"""Experimental records, design declarations, and the stacked model layout.

A :class:`Dataset` is long-format: one record per experimental cell, with
factor labels, an optional response, and optional covariates.  Missingness
is all-or-none per record — a cell either has its response and every
covariate, or none of them.  :func:`build_stacked` turns a dataset plus a
:class:`DesignSpec` into the stacked vector/matrix layout used by the
general fitting engine: all responses first, then covariate 1, and so on
(variable-major).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

RECIPES = (
    "rcb",
    "incomplete_block",
    "split_plot",
    "blocked_split_plot",
    "latin_square",
    "custom",
)

# (n treatment factors, n blocking factors) each recipe requires; None = any
_RECIPE_FACTOR_COUNTS = {
    "rcb": (None, 1),
    "incomplete_block": (None, 1),
    "split_plot": (2, 1),
    "blocked_split_plot": (2, 2),
    "latin_square": (1, 2),
    "custom": (None, None),
}


@dataclass(frozen=True)
class DesignSpec:
    """Declaration of the design: factor roles, covariates, and recipe.

    ``treatment_factors`` are fixed; ``blocking_factors`` are random.  Factor
    order carries the recipe roles: for ``split_plot`` the treatment factors
    are (wholeplot, splitplot) and the blocking factor is the wholeplot
    replicate; for ``blocked_split_plot`` blocking is (block, replicate);
    for ``latin_square`` blocking is (row, column).
    """

    response: str
    treatment_factors: tuple[str, ...]
    blocking_factors: tuple[str, ...]
    covariates: tuple[str, ...] = ()
    recipe: str = "custom"
    treatments_affect_covariates: bool = False
    levels: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "treatment_factors", tuple(self.treatment_factors))
        object.__setattr__(self, "blocking_factors", tuple(self.blocking_factors))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(
            self, "levels", {k: tuple(v) for k, v in dict(self.levels).items()}
        )
        if self.recipe not in RECIPES:
            raise ValidationError(
                f"unknown recipe {self.recipe!r}; expected one of {RECIPES}"
            )
        names = self.factor_names + (self.response,) + self.covariates
        if len(set(names)) != len(names):
            raise ValidationError("factor/response/covariate names must be unique")
        n_t, n_b = _RECIPE_FACTOR_COUNTS[self.recipe]
        if n_t is not None and len(self.treatment_factors) != n_t:
            raise ValidationError(
                f"recipe {self.recipe!r} needs {n_t} treatment factors, "
                f"got {len(self.treatment_factors)}"
            )
        if n_b is not None and len(self.blocking_factors) != n_b:
            raise ValidationError(
                f"recipe {self.recipe!r} needs {n_b} blocking factors, "
                f"got {len(self.blocking_factors)}"
            )
        if not self.treatment_factors:
            raise ValidationError("at least one treatment factor is required")

    @property
    def factor_names(self) -> tuple[str, ...]:
        return self.treatment_factors + self.blocking_factors

    @property
    def m(self) -> int:
        return len(self.covariates)


def load_design_spec(source) -> DesignSpec:
    """Read a design declaration from a JSON key-value tree.

    Keys: ``response`` (string), ``treatment_factors``, ``blocking_factors``,
    ``covariates`` (lists of strings), ``recipe`` (one of the recipe names),
    ``treatments_affect_covariates`` (bool), ``levels`` (optional map from
    factor name to the declared level list).
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8") as fh:
            tree = json.load(fh)
    elif isinstance(source, str):
        tree = json.loads(source)
    elif isinstance(source, dict):
        tree = source
    else:
        tree = json.load(source)
    if not isinstance(tree, dict):
        raise ValidationError("design spec must be a JSON object")
    known = {
        "response",
        "treatment_factors",
        "blocking_factors",
        "covariates",
        "recipe",
        "treatments_affect_covariates",
        "levels",
    }
    unknown = set(tree) - known
    if unknown:
        raise ValidationError(f"unknown design-spec keys: {sorted(unknown)}")
    try:
        return DesignSpec(
            response=tree["response"],
            treatment_factors=tuple(tree.get("treatment_factors", ())),
            blocking_factors=tuple(tree.get("blocking_factors", ())),
            covariates=tuple(tree.get("covariates", ())),
            recipe=tree.get("recipe", "custom"),
            treatments_affect_covariates=bool(
                tree.get("treatments_affect_covariates", False)
            ),
            levels={k: tuple(v) for k, v in tree.get("levels", {}).items()},
        )
    except KeyError as exc:
        raise ValidationError(f"design spec missing required key {exc}") from exc


@dataclass(frozen=True)
class Dataset:
    """Long-format experimental records.

    ``factors[name]`` holds one label per record; ``response`` and the
    columns of ``covariates`` are floats with NaN for missing.  Missingness
    must be all-or-none within a record.
    """

    factors: dict[str, np.ndarray]
    response: np.ndarray
    covariates: np.ndarray  # (n_records, m)
    covariate_names: tuple[str, ...]
    levels: dict[str, tuple[str, ...]]

    def __post_init__(self):
        facs = {k: np.asarray(v, dtype=object) for k, v in self.factors.items()}
        object.__setattr__(self, "factors", facs)
        y = np.asarray(self.response, dtype=float)
        Z = np.asarray(self.covariates, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1) if Z.size else Z.reshape(len(y), 0)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "covariates", Z)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(
            self, "levels", {k: tuple(v) for k, v in dict(self.levels).items()}
        )
        n = len(y)
        if Z.shape[0] != n or any(len(v) != n for v in facs.values()):
            raise ValidationError("column lengths disagree")
        if Z.shape[1] != len(self.covariate_names):
            raise ValidationError("covariate names do not match covariate columns")
        present = np.column_stack([~np.isnan(y)] + [~np.isnan(Z[:, j]) for j in range(Z.shape[1])])
        partial = np.where(present.any(axis=1) & ~present.all(axis=1))[0]
        if partial.size:
            raise ValidationError(
                f"record {partial[0] + 1}: response and covariates must be "
                "missing together (all-or-none per cell)"
            )
        for name, vals in facs.items():
            declared = self.levels.get(name)
            if declared is None:
                continue
            bad = [v for v in vals if v not in declared]
            if bad:
                raise ValidationError(
                    f"factor {name!r}: value {bad[0]!r} is not a declared level"
                )

    @property
    def n_records(self) -> int:
        return len(self.response)

    @property
    def m(self) -> int:
        return self.covariates.shape[1]

    @property
    def complete_mask(self) -> np.ndarray:
        ok = ~np.isnan(self.response)
        for j in range(self.m):
            ok &= ~np.isnan(self.covariates[:, j])
        return ok

    def factor_levels(self, name: str) -> tuple[str, ...]:
        if name in self.levels:
            return self.levels[name]
        return tuple(sorted(set(self.factors[name])))

    def subset(self, mask: np.ndarray) -> "Dataset":
        return Dataset(
            factors={k: v[mask] for k, v in self.factors.items()},
            response=self.response[mask],
            covariates=self.covariates[mask],
            covariate_names=self.covariate_names,
            levels=self.levels,
        )


def load_dataset(source, schema: DesignSpec) -> Dataset:
    """Parse delimited text (comma or tab, sniffed from the header row).

    Empty fields mark missing values; a record must blank its response and
    every covariate together.  Rows are reported 1-based (excluding the
    header) in error messages.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    lines = text.splitlines()
    if not lines:
        raise ValidationError("empty data file")
    delim = "\t" if "\t" in lines[0] else ","
    reader = csv.reader(io.StringIO(text), delimiter=delim)
    header = [h.strip() for h in next(reader)]
    needed = list(schema.factor_names) + [schema.response] + list(schema.covariates)
    missing = [c for c in needed if c not in header]
    if missing:
        raise ValidationError(f"data file is missing columns: {missing}")
    col = {name: header.index(name) for name in needed}

    factors: dict[str, list[str]] = {name: [] for name in schema.factor_names}
    y: list[float] = []
    Z: list[list[float]] = []
    for rownum, row in enumerate(reader, start=1):
        if not any(cell.strip() for cell in row):
            continue  # blank line
        if len(row) < len(header):
            raise ValidationError(f"row {rownum}: expected {len(header)} fields")
        for name in schema.factor_names:
            val = row[col[name]].strip()
            if not val:
                raise ValidationError(f"row {rownum}: factor {name!r} is empty")
            factors[name].append(val)
        vals = []
        for name in [schema.response] + list(schema.covariates):
            raw = row[col[name]].strip()
            if raw == "":
                vals.append(float("nan"))
                continue
            try:
                vals.append(float(raw))
            except ValueError:
                raise ValidationError(
                    f"row {rownum}: non-numeric value {raw!r} in column {name!r}"
                ) from None
        present = [not np.isnan(v) for v in vals]
        if any(present) and not all(present):
            raise ValidationError(
                f"row {rownum}: partially missing cell (response and covariates "
                "must be blank together)"
            )
        y.append(vals[0])
        Z.append(vals[1:])

    ds = Dataset(
        factors={k: np.array(v, dtype=object) for k, v in factors.items()},
        response=np.array(y),
        covariates=np.array(Z, dtype=float).reshape(len(y), schema.m),
        covariate_names=schema.covariates,
        levels={k: v for k, v in schema.levels.items()},
    )
    return ds


def treatment_labels(ds: Dataset, spec: DesignSpec) -> tuple[list[str], np.ndarray]:
    """Sorted treatment-combination labels and each record's label index."""
    parts = [ds.factors[f] for f in spec.treatment_factors]
    combos = [":".join(vals) for vals in zip(*parts)]
    labels = sorted(set(combos))
    index = {lab: i for i, lab in enumerate(labels)}
    return labels, np.array([index[c] for c in combos])


def incidence(codes: np.ndarray, n_levels: int) -> np.ndarray:
    """0/1 incidence matrix from integer level codes."""
    W = np.zeros((len(codes), n_levels))
    W[np.arange(len(codes)), codes] = 1.0
    return W


@dataclass(frozen=True)
class RcbLayout:
    """Complete-RCB bookkeeping: every treatment once in every block."""

    t: int
    b: int
    treat_of_record: np.ndarray
    block_of_record: np.ndarray


@dataclass(frozen=True)
class StackedData:
    """Variable-major stacked layout of the complete cells.

    ``z`` has length ``n_obs * (m+1)``; position ``v * n_obs + c`` holds
    variable ``v`` of complete cell ``c``.  ``X`` carries treatment-mean
    columns acting on the response block and one grand-mean column per
    covariate (plus treatment columns on covariate blocks when treatments
    affect the covariates).  ``D_list[i] = I_{m+1} (x) W_list[i]``.
    """

    z: np.ndarray
    X: np.ndarray
    col_names: tuple[str, ...]
    treatments: tuple[str, ...]
    treat_cols: np.ndarray  # response-block treatment-mean column indices
    cov_mean_cols: dict[str, int]  # covariate name -> grand-mean column
    W_list: tuple[np.ndarray, ...]
    D_list: tuple[np.ndarray, ...]
    blocking_names: tuple[str, ...]
    C_list: tuple[np.ndarray, ...]
    treatment_random_names: tuple[str, ...]
    n_obs: int
    m: int
    record_index: np.ndarray  # original record number of each complete cell
    rcb: RcbLayout | None = None

    @property
    def n_stacked(self) -> int:
        return self.n_obs * (self.m + 1)

    def position(self, record: int, variable: int) -> int:
        """Stacked position of (complete-cell index, variable index)."""
        return variable * self.n_obs + record

    def obs_index(self, position: int) -> tuple[int, int]:
        """Inverse of :meth:`position`: (complete-cell index, variable)."""
        return position % self.n_obs, position // self.n_obs


def build_stacked(
    ds: Dataset,
    spec: DesignSpec,
    random_treatment_terms: Sequence[tuple[str, ...]] = (),
) -> StackedData:
    """Assemble the stacked vector, fixed design, and incidence matrices.

    ``random_treatment_terms`` lists factor-name tuples whose crossed levels
    enter as random treatment-associated factors; their incidence acts on
    the response block only unless treatments affect the covariates.
    """
    mask = ds.complete_mask
    sub = ds.subset(mask)
    n = sub.n_records
    if n == 0:
        raise ValidationError("no complete cells")
    m = spec.m
    if sub.m != m:
        raise ValidationError("dataset covariate count does not match design")

    labels, codes = treatment_labels(sub, spec)
    all_labels, _ = treatment_labels(ds, spec)
    lost = [lab for lab in all_labels if lab not in labels]
    if lost:
        raise ValidationError(
            f"treatment {lost[0]!r} has no complete cells; its mean is inestimable"
        )
    t = len(labels)
    T = incidence(codes, t)

    # fixed-effects design, variable-major blocks
    cols: list[np.ndarray] = []
    names: list[str] = []
    zero = np.zeros((n, 1))
    for lab in labels:
        names.append(f"mean:{spec.response}:{lab}")
    blocks_per_col: list[list[np.ndarray]] = [[] for _ in range(t)]
    for i in range(t):
        blocks_per_col[i].append(T[:, [i]])
    cov_mean_cols: dict[str, int] = {}
    extra_names: list[str] = []
    extra_blocks: list[list[np.ndarray]] = []
    for j, cov in enumerate(spec.covariates):
        if spec.treatments_affect_covariates:
            for i, lab in enumerate(labels):
                extra_names.append(f"mean:{cov}:{lab}")
                blk = [zero] * (m + 1)
                blk[j + 1] = T[:, [i]]
                extra_blocks.append(blk)
            # grand covariate mean reported as the average of its cell means
        else:
            cov_mean_cols[cov] = t + len(extra_names)
            extra_names.append(f"mean:{cov}")
            blk = [zero] * (m + 1)
            blk[j + 1] = np.ones((n, 1))
            extra_blocks.append(blk)
    for i in range(t):
        blocks_per_col[i].extend([zero] * m)
    X_cols = [np.vstack(blocks_per_col[i]) for i in range(t)]
    X_cols += [np.vstack(blk) for blk in extra_blocks]
    X = np.hstack(X_cols)
    names = names + extra_names
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        raise ValidationError("fixed-effects design is rank deficient")

    # stacked observation vector
    z = np.concatenate([sub.response] + [sub.covariates[:, j] for j in range(m)])

    # blocking incidence, replicated across variables
    W_list, D_list = [], []
    for fac in spec.blocking_factors:
        lv = list(sub.factor_levels(fac))
        lv_index = {l: i for i, l in enumerate(lv)}
        codes_f = np.array([lv_index[v] for v in sub.factors[fac]])
        W = incidence(codes_f, len(lv))
        W_list.append(W)
        D_list.append(np.kron(np.eye(m + 1), W))

    # random treatment-associated terms (response block only by default)
    C_list, C_names = [], []
    for term in random_treatment_terms:
        parts = [sub.factors[f] for f in term]
        combo = [":".join(v) for v in zip(*parts)]
        lv = sorted(set(combo))
        lv_index = {l: i for i, l in enumerate(lv)}
        U = incidence(np.array([lv_index[c] for c in combo]), len(lv))
        stack = [U] + [np.zeros_like(U)] * m
        if spec.treatments_affect_covariates:
            stack = [U] * (m + 1)
        C_list.append(np.vstack(stack))
        C_names.append("*".join(term))

    rcb = _detect_rcb(sub, spec, codes, t) if spec.recipe == "rcb" else None

    return StackedData(
        z=z,
        X=X,
        col_names=tuple(names),
        treatments=tuple(labels),
        treat_cols=np.arange(t),
        cov_mean_cols=cov_mean_cols,
        W_list=tuple(W_list),
        D_list=tuple(D_list),
        blocking_names=tuple(spec.blocking_factors),
        C_list=tuple(C_list),
        treatment_random_names=tuple(C_names),
        n_obs=n,
        m=m,
        record_index=np.where(mask)[0],
        rcb=rcb,
    )


def _detect_rcb(sub: Dataset, spec: DesignSpec, codes: np.ndarray, t: int):
    """Tag the layout when every treatment appears once in every block."""
    fac = spec.blocking_factors[0]
    lv = list(sub.factor_levels(fac))
    lv_index = {l: i for i, l in enumerate(lv)}
    bcodes = np.array([lv_index[v] for v in sub.factors[fac]])
    b = len(lv)
    if sub.n_records != t * b:
        return None
    counts = np.zeros((t, b), dtype=int)
    for i, j in zip(codes, bcodes):
        counts[i, j] += 1
    if not np.all(counts == 1):
        return None
    return RcbLayout(t=t, b=b, treat_of_record=codes, block_of_record=bcodes)

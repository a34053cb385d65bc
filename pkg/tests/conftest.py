"""Shared fixtures: simulated designs and fixture-file discovery.

The published apple-yield (Pearce) and resistor-noise (Zelen) tables are
not distributable with the package; tests that reproduce them look for
user-supplied files under ``tests/fixtures/`` (or ``$VCADJUST_FIXTURE_DIR``)
and skip cleanly when the files are absent.  See tests/fixtures/README.md
for the expected formats.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

import vcadjust as v

FIXTURE_DIR = Path(os.environ.get("VCADJUST_FIXTURE_DIR", Path(__file__).parent / "fixtures"))

PEARCE_DATA = FIXTURE_DIR / "pearce_apple.csv"
ZELEN_DATA = FIXTURE_DIR / "zelen_resistors.csv"


def fixture_or_skip(path: Path) -> Path:
    if not path.exists():
        pytest.skip(f"fixture {path.name} not supplied (see tests/fixtures/README.md)")
    return path


def pearce_spec() -> v.DesignSpec:
    return v.DesignSpec(
        response="yield",
        treatment_factors=("treatment",),
        blocking_factors=("block",),
        covariates=("prev",),
        recipe="rcb",
    )


def zelen_spec() -> v.DesignSpec:
    return v.DesignSpec(
        response="log_noise",
        treatment_factors=("shape",),
        blocking_factors=("plate",),
        covariates=("log_resistance",),
        recipe="incomplete_block",
    )


def interior_bivariate_params(t: int = 6) -> v.BivariateParams:
    """Generating point with strong block structure and distinct slopes."""
    mu_y = 10.0 + 2.0 * np.arange(t, dtype=float)
    return v.BivariateParams(
        mu_y=mu_y,
        mu_z=8.0,
        Sigma_B=np.array([[6.0, 2.0], [2.0, 2.0]]),
        Sigma_E=np.array([[2.0, 0.6], [0.6, 0.8]]),
    )


def bias_demo_params(t: int = 6) -> v.BivariateParams:
    """Wide gap between the cell and block-mean slopes, moderate block
    correlation, so the single-slope estimator is visibly pulled."""
    return v.BivariateParams(
        mu_y=10.0 + 2.0 * np.arange(t, dtype=float),
        mu_z=8.0,
        Sigma_B=np.array([[4.0, 2.0], [2.0, 1.0]]),
        Sigma_E=np.array([[2.0, 0.5], [0.5, 1.0]]),
    )


@pytest.fixture
def rcb_dataset():
    """One healthy complete-RCB draw (t=6, b=8) plus its design spec."""
    cfg = v.SimConfig(
        t=6, b=8, params=interior_bivariate_params(6), replicates=1, seed=1
    )
    return v.gen_bivariate_rcb(cfg)[0], cfg.design_spec


@pytest.fixture
def pearce(request):
    path = fixture_or_skip(PEARCE_DATA)
    spec = pearce_spec()
    return v.load_dataset(path, spec), spec


@pytest.fixture
def zelen(request):
    path = fixture_or_skip(ZELEN_DATA)
    spec = zelen_spec()
    return v.load_dataset(path, spec), spec


def drop_cells(ds: v.Dataset, pairs, treatment="treatment", block="block") -> v.Dataset:
    """Blank out response and covariates for (treatment, block) pairs."""
    y = ds.response.copy()
    Z = ds.covariates.copy()
    for trt, blk in pairs:
        hit = (ds.factors[treatment] == trt) & (ds.factors[block] == blk)
        y[hit] = np.nan
        Z[hit] = np.nan
    return v.Dataset(
        factors=dict(ds.factors),
        response=y,
        covariates=Z,
        covariate_names=ds.covariate_names,
        levels=dict(ds.levels),
    )

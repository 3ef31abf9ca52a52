"""Regression guard on the derived quantities of the default setup.

The frozen values were produced by this code at the default config. They are
not closed forms; the independent checks live in the module tests. A change
here means the default campaigns moved and the acceptance data must be rerun.
Regenerate by evaluating the same fields of ``Context(ExperimentConfig())``.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from hcdefect.experiments.campaigns import Context
from hcdefect.experiments.config import ExperimentConfig

FROZEN = json.loads((Path(__file__).parent / "data" / "frozen_oracles.json").read_text())


@pytest.fixture(scope="module")
def ctx():
    return Context(ExperimentConfig().validate())


def test_gap_and_window(ctx):
    np.testing.assert_allclose(ctx.gap, FROZEN["gap"], rtol=1e-9)
    np.testing.assert_allclose(ctx.window, FROZEN["window"], rtol=1e-9)
    assert ctx.beta.spectrum_intervals(100)[0][0] == pytest.approx(FROZEN["first_pole"], rel=1e-9)


def test_homogenized_tensor(ctx):
    np.testing.assert_allclose(ctx.hom.A, FROZEN["A_hom"], rtol=1e-7, atol=1e-10)


def test_defect_tuning_and_mode(ctx):
    assert float(ctx.defect.A2[0, 0]) == pytest.approx(FROZEN["a2"], rel=1e-7)
    assert ctx.lam0 == pytest.approx(FROZEN["lam0"], rel=1e-7)
    assert ctx.mode.multiplicity == FROZEN["multiplicity"]
    assert ctx.estimator(ctx.lam0) == pytest.approx(FROZEN["beta_inf_lam0"], rel=1e-7)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfssm.gfssm_kernel import FirCoefficients, GfssmInstance, GroupConfig, build_L_group
from gfssm.ssd_core import SsdInstance, build_L_plain
from gfssm.stability_lab import (
    SWEEP_COLUMNS,
    precision_divergence,
    product_profile,
    stability_report,
    sweep_point,
    uniform_instance,
)


def _direct_stats(L):
    nz = L[np.tril_indices(L.shape[0])]
    nz = nz[nz != 0]
    return math.log10(nz.min()), math.log10(nz.max())


def test_uniform_decay_closed_form():
    rep = product_profile(np.full(256, 0.9), 4)
    l9 = math.log10(0.9)
    assert rep.plain.log10_min_nonzero == pytest.approx(255 * l9, abs=1e-9)
    assert rep.grouped.log10_min_nonzero == pytest.approx(63 * l9, abs=1e-9)
    assert rep.plain.log10_max_entry == 0.0 and rep.grouped.log10_max_entry == 0.0
    assert rep.plain.max_product_length == 255
    # (t - s) // Q factors of a survive in the grouped mask, at most 255 // 4
    assert rep.grouped.max_product_length == 63


def test_unit_decay_has_no_dynamic_range():
    rep = product_profile(np.ones(40), 3)
    assert rep.plain.log10_dynamic_range == 0.0
    assert rep.grouped.log10_dynamic_range == 0.0
    assert rep.plain.zero_entries == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 48), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_grouping_never_widens_the_range(T, Q, seed):
    a = np.random.default_rng(seed).uniform(0.01, 1.0, T)
    rep = product_profile(a, Q)
    assert rep.grouped.log10_min_nonzero >= rep.plain.log10_min_nonzero - 1e-12
    assert rep.grouped.log10_dynamic_range <= rep.plain.log10_dynamic_range + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_log_statistics_match_materialized_masks(T, Q, seed):
    a = np.random.default_rng(seed).uniform(0.05, 1.0, T)
    rep = product_profile(a, Q)
    lo, hi = _direct_stats(build_L_plain(a))
    assert rep.plain.log10_min_nonzero == pytest.approx(lo, abs=1e-9)
    assert rep.plain.log10_max_entry == pytest.approx(hi, abs=1e-9)
    lo, hi = _direct_stats(build_L_group(a, Q, 0))
    assert rep.grouped.log10_min_nonzero == pytest.approx(lo, abs=1e-9)
    assert rep.grouped.log10_max_entry == pytest.approx(hi, abs=1e-9)


def test_zero_decay_entries_are_counted():
    a = np.full(10, 0.5)
    a[5] = 0.0
    rep = product_profile(a, 2)
    L = build_L_plain(a)
    assert rep.plain.zero_entries == int(np.count_nonzero(L[np.tril_indices(10)] == 0))
    G = build_L_group(a, 2, 0)
    assert rep.grouped.zero_entries == int(np.count_nonzero(G[np.tril_indices(10)] == 0))
    assert rep.plain.zero_entries > rep.grouped.zero_entries > 0


def test_explosive_decay_needs_flag():
    a = np.full(16, 1.1)
    with pytest.raises(ValueError):
        product_profile(a, 4)
    rep = product_profile(a, 4, allow_explosion=True)
    assert rep.plain.log10_max_entry == pytest.approx(15 * math.log10(1.1))
    with pytest.raises(ValueError):
        product_profile(np.full(5000, 1.1), 4, allow_explosion=True)


def test_profile_rejects_bad_input():
    with pytest.raises(ValueError):
        product_profile(np.array([0.5]), 2)
    with pytest.raises(ValueError):
        product_profile(np.array([0.5, np.nan]), 2)
    with pytest.raises(ValueError):
        product_profile(np.full(4, 0.5), 0)


def test_single_step_divergence_is_tiny():
    inst = uniform_instance(0.9, 1, 2, 2, seed=3, N=3, P=2)
    for div in precision_divergence(inst).values():
        assert div.max_rel <= 1e-6
        assert div.nonfinite_step is None


def test_zero_decay_resets_in_both_precisions():
    inst = uniform_instance(0.9, 12, 1, 1, seed=5, N=2, P=2)
    a = inst.base.a.copy()
    a[5] = 0.0
    b = inst.base
    inst = GfssmInstance(SsdInstance(a, b.B, b.C, b.x), GroupConfig(1, 1))
    z = GfssmInstance(SsdInstance(a[5:], b.B[5:], b.C[5:], b.x[5:]), GroupConfig(1, 1))
    from gfssm.gfssm_kernel import grouped_scan

    for prec in ("single", "double"):
        y = grouped_scan(inst.astype(prec))[0]
        y_tail = grouped_scan(z.astype(prec))[0]
        np.testing.assert_array_equal(y[5:], y_tail)


def test_single_precision_overflow_is_reported():
    inst = uniform_instance(1.5, 400, 1, 1, seed=0)
    div = precision_divergence(inst)
    assert div["grouped"].nonfinite_step is not None
    assert div["grouped"].max_abs == math.inf
    assert div["plain"].nonfinite_step is not None


def test_stability_report_combines_both():
    inst = uniform_instance(0.99, 64, 4, 2, seed=1)
    rep = stability_report(inst)
    assert set(rep.divergence) == {"plain", "grouped"}
    assert rep.T == 64 and rep.Q == 4


def test_sweep_row_columns_and_reduction():
    row = sweep_point(0.9, 64, 1, 4, seed=2)
    assert tuple(row) == SWEEP_COLUMNS
    plain = product_profile(np.full(64, 0.9), 1).plain
    assert row["min_nonzero"] == plain.min_nonzero
    assert row["log10_range"] == plain.log10_dynamic_range

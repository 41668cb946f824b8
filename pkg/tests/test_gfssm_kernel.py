import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfssm.errors import NonFiniteError, ShapeError
from gfssm.gfssm_kernel import (
    FirCoefficients,
    GfssmInstance,
    GroupConfig,
    build_L_gfssm,
    build_L_group,
    fir_filter,
    gfssm_matrix_form,
    grouped_scan,
)
from gfssm.rng import Xoshiro256
from gfssm.ssd_core import SsdInstance, build_L_plain, random_instance, ssd_matrix_form, ssd_scan_recurrent

from oracles import brute_fir, brute_gfssm, brute_group_mask


def make(rng, T=8, N=3, P=2, Q=4, n=4, taps=None, k=None):
    base = random_instance(rng, T, N, P)
    fir = FirCoefficients(rng.uniform(-1.0, 1.0, n) if k is None else k)
    return GfssmInstance(base, GroupConfig(Q, n), fir, taps)


def outer_products(inst):
    return np.einsum("tn,tp->tnp", inst.base.B, inst.base.x)


def test_identity_filter(rng):
    inst = make(rng, k=[1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(fir_filter(inst), outer_products(inst))


def test_pure_delay_filter(rng):
    inst = make(rng, k=[0.0, 1.0, 0.0, 0.0])
    s = fir_filter(inst)
    u = outer_products(inst)
    assert np.all(s[0] == 0.0)
    np.testing.assert_array_equal(s[1:], u[:-1])


def test_filter_matches_brute_force(rng):
    inst = make(rng, T=8, n=4)
    b = inst.base
    ref = brute_fir(b.B.tolist(), b.x.tolist(), inst.fir.k.tolist())
    np.testing.assert_allclose(fir_filter(inst), ref, atol=1e-15)


def test_filter_reads_prompt_taps_newest_first(rng):
    taps = rng.uniform(-1.0, 1.0, (3, 3, 2))
    inst = make(rng, T=5, n=4, taps=taps)
    b = inst.base
    ref = brute_fir(b.B.tolist(), b.x.tolist(), inst.fir.k.tolist(), taps.tolist())
    np.testing.assert_allclose(fir_filter(inst), ref, atol=1e-15)
    # k = [0, 0, 0, 1] at t = 0 reads index -3, the oldest cached tap
    delay3 = GfssmInstance(b, GroupConfig(4, 4), FirCoefficients([0.0, 0.0, 0.0, 1.0]), taps)
    np.testing.assert_array_equal(fir_filter(delay3)[0], taps[2])


def test_reduction_to_ssd_is_exact(rng):
    base = random_instance(rng, 20, 4, 3)
    inst = GfssmInstance(base, GroupConfig(1, 1), FirCoefficients([1.0]))
    y_ssd, h_ssd = ssd_scan_recurrent(base)
    y, h = grouped_scan(inst)
    assert np.max(np.abs(y - y_ssd)) <= 1e-15
    np.testing.assert_array_equal(h[0], h_ssd)
    assert np.max(np.abs(gfssm_matrix_form(inst) - ssd_matrix_form(base))) <= 1e-15


def test_two_groups_decay_free_prefix_sum():
    x = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    base = SsdInstance(np.ones(5), np.ones((5, 1)), np.ones((5, 1)), x)
    y, h = grouped_scan(GfssmInstance(base, GroupConfig(2, 1), FirCoefficients([1.0])))
    np.testing.assert_array_equal(y[:, 0], [1, 3, 6, 10, 15])
    assert h[0, 0, 0] == 1 + 3 + 5 and h[1, 0, 0] == 2 + 4


def test_scan_matches_brute_recurrence_with_taps_and_state(rng):
    taps = rng.uniform(-1.0, 1.0, (3, 3, 2))
    h0 = rng.uniform(-1.0, 1.0, (4, 3, 2))
    inst = make(rng, T=13, Q=4, n=4, taps=taps)
    b = inst.base
    y, h = grouped_scan(inst, h0, t_offset=6)
    y_ref, h_ref = brute_gfssm(b.a, b.B.tolist(), b.C.tolist(), b.x.tolist(), inst.fir.k, 4, taps.tolist(),
                               h0.tolist(), t_offset=6)
    np.testing.assert_allclose(y, y_ref, atol=1e-13)
    np.testing.assert_allclose(h, h_ref, atol=1e-13)


def test_schedule_hook(rng):
    seen = []
    grouped_scan(make(rng, T=9, Q=4), t_offset=3, hook=lambda t, g: seen.append((t, g)))
    assert seen == [(t, t % 4) for t in range(3, 12)]


def test_scan_vs_matrix_random_T16(rng):
    inst = make(rng, T=16, Q=4, n=4)
    assert np.max(np.abs(grouped_scan(inst)[0] - gfssm_matrix_form(inst))) <= 1e-12


def test_scan_vs_matrix_random_T32(rng):
    inst = make(rng, T=32, Q=4, n=4)
    assert np.max(np.abs(grouped_scan(inst)[0] - gfssm_matrix_form(inst))) <= 1e-12


def test_matrix_form_single_step(rng):
    inst = make(rng, T=1, n=4)
    b = inst.base
    expected = inst.fir.k[0] * (b.C[0] @ b.B[0]) * b.x[0]
    np.testing.assert_allclose(gfssm_matrix_form(inst)[0], expected, atol=1e-16)


def test_matrix_form_rejects_prompt_taps(rng):
    with pytest.raises(ShapeError):
        gfssm_matrix_form(make(rng, taps=np.ones((3, 3, 2))))


def test_L_group_tap0_single_group_is_plain(rng):
    a = rng.uniform(0.0, 1.0, 9)
    np.testing.assert_array_equal(build_L_group(a, 1, 0), build_L_plain(a))


def test_L_group_hand_enumerated_Q2():
    a = np.array([2.0, 3.0, 5.0, 7.0])
    L0 = build_L_group(a, 2, 0)
    assert L0[3, 0] == 5.0  # only tau = 2 is = 0 (mod 2) in (0, 3]
    assert L0[3, 1] == 7.0  # only tau = 3 in (1, 3]
    assert L0[1, 0] == 1.0 and L0[2, 0] == 5.0


def test_L_group_shift_relation(rng):
    a = rng.uniform(0.1, 1.0, 12)
    for Q in (1, 2, 3, 4):
        L0 = build_L_group(a, Q, 0)
        for j in range(1, 4):
            Lj = build_L_group(a, Q, j)
            for t in range(12):
                for s in range(12):
                    if s + j <= t:
                        assert Lj[t, s] == L0[t, s + j]
                    else:
                        assert Lj[t, s] == 0.0


@pytest.mark.parametrize("Q", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("j", [0, 1, 3])
def test_L_group_matches_enumeration(rng, Q, j):
    a = rng.uniform(0.1, 1.0, 11)
    np.testing.assert_allclose(build_L_group(a, Q, j), brute_group_mask(a, Q, j), rtol=1e-15)


@pytest.mark.parametrize("Q", [1, 2, 4, 8])
def test_product_length_is_floor_of_gap_over_Q(Q):
    T = 40
    for j in range(4):
        L = build_L_group(np.full(T, 2.0), Q, j)
        for t in range(T):
            for s in range(T):
                if t >= s + j:
                    assert L[t, s] == 2.0 ** ((t - s - j) // Q)


def test_L_gfssm_reductions(rng):
    a = rng.uniform(0.0, 1.0, 7)
    np.testing.assert_array_equal(build_L_gfssm(a, GroupConfig(1, 1), FirCoefficients([1.0])), build_L_plain(a))
    assert not np.any(build_L_gfssm(a, GroupConfig(4, 4), FirCoefficients(np.zeros(4))))


def test_L_gfssm_T13_reproduces_scan(rng):
    inst = make(rng, T=13, Q=4, n=4)
    assert np.max(np.abs(grouped_scan(inst)[0] - gfssm_matrix_form(inst))) <= 1e-12


def test_grouped_entries_dominate_plain(rng):
    a = rng.uniform(0.0, 1.0, 30)
    a = 1.0 - a  # (0, 1]
    plain = build_L_plain(a)
    for Q in (2, 3, 4):
        grouped = build_L_gfssm(a, GroupConfig(Q, 3), FirCoefficients.identity(3))
        mask = grouped != 0
        assert np.all(grouped[mask] >= plain[mask])


def test_group_isolation_without_filter(rng):
    Q, T = 3, 15
    a = rng.uniform(0.1, 1.0, T)
    L = build_L_group(a, Q, 0)
    for s in range(T):
        perturbed = a.copy()
        others = [tau for tau in range(T) if tau % Q != s % Q]
        perturbed[others] = rng.uniform(0.1, 1.0, len(others))
        np.testing.assert_array_equal(build_L_group(perturbed, Q, 0)[:, s], L[:, s])


def test_filter_couples_groups(rng):
    # with n = 1 the contribution of s to a group of another residue is absent;
    # a delay tap moves it into the neighbouring group's chain
    a = rng.uniform(0.1, 1.0, 12)
    L1 = build_L_group(a, 4, 1)
    perturbed = a.copy()
    perturbed[5] = 0.123  # 5 = 1 (mod 4): only on the path of inputs entering group 1
    diff = build_L_group(perturbed, 4, 1)[:, 0] != L1[:, 0]
    assert diff.any()


@settings(max_examples=30, deadline=None)
@given(
    T=st.integers(1, 64),
    Q=st.sampled_from([1, 2, 4, 8]),
    n=st.sampled_from([1, 2, 4]),
    seed=st.integers(0, 2**63),
)
def test_cross_form_equivalence_property(T, Q, n, seed):
    rng = Xoshiro256(seed)
    inst = GfssmInstance(random_instance(rng, T, 3, 2), GroupConfig(Q, n), FirCoefficients(rng.uniform(-1, 1, n)))
    assert np.max(np.abs(grouped_scan(inst)[0] - gfssm_matrix_form(inst))) <= 1e-12


def test_non_finite_intermediate_reports_step():
    T = 6
    a = np.array([1.0, 1.0, 1e300, 1e300, 1e300, 1e300])
    base = SsdInstance(a, np.full((T, 1), 1e200), np.ones((T, 1)), np.full((T, 1), 1e100))
    with pytest.raises(NonFiniteError) as exc:
        grouped_scan(GfssmInstance(base, GroupConfig(1, 1), FirCoefficients([1.0])))
    assert exc.value.step is not None and exc.value.step >= 2


def test_validation():
    with pytest.raises(ShapeError):
        GroupConfig(0, 4)
    with pytest.raises(ShapeError):
        GroupConfig(4, 0)
    with pytest.raises(NonFiniteError):
        FirCoefficients([1.0, np.inf])
    base = random_instance(Xoshiro256(0), 4, 2, 2)
    with pytest.raises(ShapeError):
        GfssmInstance(base, GroupConfig(4, 4), FirCoefficients([1.0, 0.0]))
    with pytest.raises(ShapeError):
        GfssmInstance(base, GroupConfig(4, 4), None, np.zeros((2, 2, 2)))
    with pytest.raises(ShapeError):
        grouped_scan(GfssmInstance(base, GroupConfig(4, 4)), np.zeros((3, 2, 2)))


def test_default_filter_is_identity():
    assert FirCoefficients.identity(4).k.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert FirCoefficients.uniform(4).k.tolist() == [0.25] * 4
    base = random_instance(Xoshiro256(0), 4, 2, 2)
    assert GfssmInstance(base, GroupConfig(2, 3)).fir.k.tolist() == [1.0, 0.0, 0.0]


def test_single_precision_scan(rng):
    inst = make(rng, T=24)
    y32, h32 = grouped_scan(inst.astype("single"))
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, grouped_scan(inst)[0], atol=1e-5)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clrlab import theory
from clrlab.estimators import crr_update, gr_update, run_sequence
from clrlab.model import TaskData, TaskSpectrum, TrueModel, design_from_spectrum
from clrlab.theory import (SpectralSequence, crr_gr_ratio_curve, crr_two_task_error,
                           es_from_lambda, es_optimal_schedule, gr_error_closed_form, gr_error_recursion,
                           lambda_from_es, mn_lower_bound, optimal_lambda, oracle_error, practical_weights,
                           sensitivity_check, sensitivity_rhs)


def seq1(pairs, e0=1.0, sigma2=1.0):
    """Scalar sequence from (gamma, n) pairs."""
    g = [[gm] for gm, _ in pairs]
    return SpectralSequence(np.eye(1), g, [n for _, n in pairs], [e0], sigma2)


@st.composite
def spectral_sequences(draw, max_p=8, max_T=6):
    p = draw(st.integers(1, max_p))
    T = draw(st.integers(1, max_T))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    g = rng.uniform(0, 3, (T, p)) * (rng.random((T, p)) < 0.75)
    e0 = rng.exponential(size=p) * (rng.random(p) < 0.9)
    sigma2 = draw(st.sampled_from([0.0, 0.3, 1.0, 5.0]))
    return SpectralSequence(np.eye(p), g, rng.integers(1, 50, T), e0, sigma2)


# oracle

def test_oracle_error_examples():
    assert oracle_error(seq1([(1, 1), (1, 1)])) == pytest.approx(0.5)
    assert oracle_error(seq1([(1, 1), (1, 1)], sigma2=0.0)) == 0.0
    seq = SpectralSequence(np.eye(2), [[1, 2], [1, 2]], [1, 1], [1, 1], 1.0)
    assert oracle_error(seq) == pytest.approx(0.75)


def test_oracle_error_uninformed_coordinate():
    seq = SpectralSequence(np.eye(2), [[1, 0]], [3], [1, 1], 1.0)
    with pytest.raises(ValueError):
        oracle_error(seq)


# recursion

def test_recursion_examples():
    assert gr_error_recursion(np.array([1.0]), 0.0, 2.0, 1, 1.0) == pytest.approx([1.0])
    assert gr_error_recursion(np.array([1.0]), 1.0, 1.0, 1, 1.0) == pytest.approx([0.5])
    assert gr_error_recursion(np.array([1.0]), 1.0, 0.0, 1, 1.0) == pytest.approx([1.0])


def test_recursion_pinned_and_degenerate():
    out = gr_error_recursion(np.array([2.0, 3.0]), [1.0, 1.0], [0.0, 0.5], 4, 1.0, pinned=[True, False])
    assert out[0] == 2.0
    with pytest.raises(ValueError):
        gr_error_recursion(np.array([1.0]), 0.0, 0.0, 1, 1.0)


@settings(max_examples=50, deadline=None)
@given(e=st.floats(0, 10), g=st.floats(0.01, 10), lam=st.floats(0, 10), n=st.integers(1, 100),
       s2=st.floats(0, 5))
def test_recursion_factored_form_matches_expanded(e, g, lam, n, s2):
    expanded = e - 2 * g * e / (lam + g) + (g**2 * e + g * s2 / n) / (lam + g) ** 2
    got = gr_error_recursion(np.array([e]), g, lam, n, s2)[0]
    assert got == pytest.approx(expanded, rel=1e-9, abs=1e-12)


# optimal weights and closed form

def test_optimal_lambda_examples():
    assert optimal_lambda(seq1([(1, 1)]), 1).values == pytest.approx([1.0])
    assert optimal_lambda(seq1([(1, 1), (1, 1)]), 2).values == pytest.approx([2.0])
    lam = optimal_lambda(seq1([(1, 1)], e0=0.0), 1)
    assert lam.pinned[0]


def test_optimal_lambda_noiseless_uninformed_pins():
    seq = SpectralSequence(np.eye(2), [[1.0, 0.0]], [5], [1.0, 1.0], 0.0)
    lam = optimal_lambda(seq, 1)
    assert list(lam.pinned) == [False, True]


def test_closed_form_examples():
    seq = seq1([(1, 1), (1, 1)])
    assert gr_error_closed_form(seq, 1)[0] == pytest.approx(0.5)
    assert gr_error_closed_form(seq, 2)[0] == pytest.approx(1 / 3)
    assert gr_error_closed_form(seq1([(1, 1)], sigma2=0.0), 1)[0] == 0.0
    assert gr_error_closed_form(seq1([(1, 1)], e0=0.0), 1)[0] == 0.0


@settings(max_examples=60, deadline=None)
@given(seq=spectral_sequences())
def test_recursion_reproduces_closed_form(seq):
    e = seq.e0.copy()
    for t in range(1, seq.tasks + 1):
        lam = optimal_lambda(seq, t)
        e = gr_error_recursion(e, seq.eigenvalues[t - 1], lam.values, seq.sample_sizes[t - 1], seq.sigma2,
                               lam.pinned)
        total, per = gr_error_closed_form(seq, t)
        np.testing.assert_allclose(e, per, rtol=1e-12, atol=1e-300)
        assert math.fsum(e) == pytest.approx(total, rel=1e-12, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(seq=spectral_sequences(), seed=st.integers(0, 1000))
def test_closed_form_order_invariant_and_monotone(seq, seed):
    T = seq.tasks
    order = np.random.default_rng(seed).permutation(T)
    a = gr_error_closed_form(seq, T)[0]
    b = gr_error_closed_form(seq.permuted(order), T)[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)
    curve = [math.fsum(seq.e0)] + [gr_error_closed_form(seq, t)[0] for t in range(1, T + 1)]
    for t in range(1, T + 1):
        assert curve[t] <= curve[t - 1] * (1 + 1e-12)
        informative = np.any((seq.info[t - 1] > 0) & (seq.e0 > 0))
        if informative and seq.sigma2 > 0:
            assert curve[t] < curve[t - 1]


@settings(max_examples=40, deadline=None)
@given(seq=spectral_sequences())
def test_closed_form_below_oracle(seq):
    if np.any(seq.cumulative_info(seq.tasks) == 0):
        return
    assert gr_error_closed_form(seq, seq.tasks)[0] <= oracle_error(seq) * (1 + 1e-12)


# practical weights

def test_practical_weights_examples():
    H = practical_weights([(np.eye(3), 10), (np.eye(3), 10)], 10, ridge=1e-3)
    np.testing.assert_allclose(H.matrix, (2 + 1e-3) * np.eye(3))
    H0 = practical_weights([(np.eye(3), 10), (np.eye(3), 10)], 10, ridge=0.0)
    np.testing.assert_allclose(H0.matrix, 2 * np.eye(3))
    doubled = practical_weights([(np.eye(3), 20), (np.eye(3), 20)], 20, ridge=1e-3)
    np.testing.assert_allclose(doubled.matrix, H.matrix)
    with pytest.raises(ValueError):
        practical_weights([], 10)


def test_practical_lambda_first_task_is_ridge():
    seq = seq1([(1, 4), (1, 4)])
    assert theory.practical_lambda(seq, 1, 1e-3).values == pytest.approx([1e-3])
    assert theory.practical_lambda(seq, 2, 0.0).values == pytest.approx([1.0])


# sensitivity

def test_sensitivity_rhs_value():
    assert sensitivity_rhs(0.1, 2.0) == pytest.approx(2 * 0.01 / (1.1 * 1.44))


def test_sensitivity_exact_weights_hold():
    seq = SpectralSequence(np.eye(2), [[1, 2], [0.5, 1]], [10, 20], [1, 2], 1.0)
    lam = np.array([optimal_lambda(seq, t).values for t in (1, 2)])
    report = sensitivity_check(seq, lam, 2.0)
    assert report.all_hold
    np.testing.assert_array_equal(report.lhs, 0)
    assert np.all((report.rho >= 0) & (report.rho < 1))
    np.testing.assert_allclose(report.bound[1], 2.0 / (seq.e0 + seq.cumulative_info(2)))
    assert report.total_bound(2) >= gr_error_closed_form(seq, 2)[0]


def test_sensitivity_small_rho_fails():
    seq = SpectralSequence(np.eye(1), [[1e-6]], [1], [1e6], 1.0)
    lam = optimal_lambda(seq, 1).values + 5.0
    report = sensitivity_check(seq, lam[None, :], 2.0)
    assert report.rhs[0, 0] < 1e-10
    assert not report.all_hold


def test_sensitivity_rejects_bad_c():
    with pytest.raises(ValueError):
        sensitivity_check(seq1([(1, 1)]), np.ones((1, 1)), 1.0)


# minimum norm floor

@pytest.mark.parametrize("gmax, s2, expected", [(4, 1, 0.25), (4, 0, 0.0), (1, 5, 5.0)])
def test_mn_lower_bound(gmax, s2, expected):
    assert mn_lower_bound(gmax, s2) == expected


def test_mn_lower_bound_rejects():
    with pytest.raises(ValueError):
        mn_lower_bound(0.0, 1.0)


# two-task construction

def test_two_task_zero_contraction():
    err = crr_two_task_error(10, 100, 0.1, 1.0, 0.0, 1.0)
    assert err.task2[0] == pytest.approx(0.1)


def test_two_task_optimal_first_lambda():
    n1, s2 = 50, 2.0
    err = crr_two_task_error(n1, 10, 0.3, s2 / n1, 1.0, s2)
    assert err.task1[0] == pytest.approx(s2 / (n1 + s2))


def test_two_task_noise_free_zero_ridge():
    err = crr_two_task_error(5, 7, 0.4, 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(err.task1, 0)
    np.testing.assert_array_equal(err.task2, 0)


def test_two_task_rejects():
    with pytest.raises(ValueError):
        crr_two_task_error(5, 7, 0.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        crr_two_task_error(5, 7, 0.5, -1.0, 1.0, 1.0)


def test_two_task_matches_monte_carlo():
    """Closed forms against 10^5 simulated noise draws through the real estimator."""
    n1, n2, eps, lam1, lam2, s2 = 4, 6, 0.3, 0.4, 0.7, 1.5
    rng = np.random.default_rng(2024)
    w = np.ones(2)
    X1 = design_from_spectrum(np.eye(2), np.array([1.0, eps]), n1, rng)
    X2 = design_from_spectrum(np.eye(2), np.array([eps, 1.0]), n2, rng)
    R = 100_000
    t1 = TaskData(X1, (X1 @ w)[:, None] + math.sqrt(s2) * rng.standard_normal((n1, R)))
    t2 = TaskData(X2, (X2 @ w)[:, None] + math.sqrt(s2) * rng.standard_normal((n2, R)))
    w1 = crr_update(np.zeros((2, R)), t1, lam1)
    w2 = crr_update(w1, t2, lam2)
    theory_err = crr_two_task_error(n1, n2, eps, lam1, lam2, s2)
    for est, expected in ((w1, theory_err.task1), (w2, theory_err.task2)):
        sq = (est - 1.0) ** 2
        mean = sq.mean(axis=1)
        se = sq.std(axis=1, ddof=1) / math.sqrt(R)
        assert np.all(np.abs(mean - expected) <= 3 * se), (mean, expected, se)


def test_ratio_curve_properties():
    pts = crr_gr_ratio_curve([10, 100])
    assert all(p.ratio > 1 for p in pts)
    control = crr_gr_ratio_curve([10, 100], eps=1.0)
    assert all(abs(p.ratio - 1) <= 0.1 for p in control)
    shared = crr_gr_ratio_curve([10], shared=True)
    assert shared[0].lam1 == shared[0].lam2 and shared[0].ratio >= pts[0].ratio
    with pytest.raises(ValueError):
        crr_gr_ratio_curve([])


# early stopping maps

def test_lambda_from_es_examples():
    assert lambda_from_es([1.0], [0.5], 1).values == pytest.approx([1.0])
    assert lambda_from_es([1.0], [1.0], 1).values == pytest.approx([0.0])
    assert lambda_from_es([1.0], [0.5], 200).values[0] < 1e-50
    out = lambda_from_es([1.0, 0.0], [0.5, 0.3], 2)
    assert list(out.pinned) == [False, True]
    with pytest.raises(ValueError):
        lambda_from_es([1.0], [0.0], 1)


def test_es_from_lambda_examples():
    assert es_from_lambda([1.0], [1.0], 1).values == pytest.approx([0.5])
    assert es_from_lambda([4.0], [0.0], 1).values == pytest.approx([0.25])
    out = es_from_lambda([0.0, 1.0], [1.0, 1.0], 1)
    assert out.values[0] == 0.0 and out.pinned[0]


@settings(max_examples=80, deadline=None)
@given(g=st.floats(0.01, 100), sg=st.floats(0.01, 0.999), m=st.integers(1, 20))
def test_es_lambda_round_trip(g, sg, m):
    s = sg / g
    lam = lambda_from_es([g], [s], m).values
    back = es_from_lambda([g], lam, m).values
    assert back[0] == pytest.approx(s, rel=1e-10)


def test_es_optimal_schedule_examples():
    sched = es_optimal_schedule(seq1([(1, 1)]), 1, 1)
    assert sched.rates == pytest.approx([0.5])
    seq = SpectralSequence(np.eye(2), [[1.0, 0.0]], [3], [1.0, 1.0], 1.0)
    assert es_optimal_schedule(seq, 1, 2).rates[1] == 0.0


def test_es_optimal_schedule_larger_n_longer_path():
    contraction = []
    for n in (1, 5, 25, 125):
        s = es_optimal_schedule(seq1([(1.0, n)]), 1, 3).rates[0]
        contraction.append((1 - s) ** 3)
    assert all(b < a for a, b in zip(contraction, contraction[1:]))


def test_es_optimal_schedule_matches_optimal_gr():
    rng = np.random.default_rng(3)
    p, T = 5, 4
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = rng.uniform(0.2, 2, (T, p))
    model = TrueModel(rng.standard_normal(p), 1.0)
    seq = SpectralSequence.from_model(Q, eig, [12] * T, model)
    tasks = []
    for t in range(T):
        X = design_from_spectrum(Q, eig[t], 12, rng)
        tasks.append(TaskData(X, X @ model.w_star + rng.standard_normal(12)))
    for m in (1, 4):
        es = run_sequence(tasks, "es", lambda t, _: es_optimal_schedule(seq, t, m))
        gr = run_sequence(tasks, "gr", lambda t, _: theory.optimal_weights(seq, t))
        for a, b in zip(es.estimates, gr.estimates):
            assert np.max(np.abs(a - b)) <= 1e-8 * max(1.0, np.max(np.abs(b)))


# nonshared bases

def test_nonshared_reduces_to_optimal_lambda_for_shared_basis():
    rng = np.random.default_rng(4)
    p, T = 4, 3
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    eig = rng.uniform(0.3, 2, (T, p))
    sizes = [7, 9, 11]
    model = TrueModel(rng.standard_normal(p), 1.3)
    seq = SpectralSequence.from_model(Q, eig, sizes, model)
    spectra = [TaskSpectrum(Q, eig[t], sizes[t]) for t in range(T)]
    policy = theory.nonshared_basis_monotone_policy(spectra, model)
    for t in range(1, T + 1):
        np.testing.assert_allclose(policy[t - 1].values, optimal_lambda(seq, t).values, rtol=1e-10)
    expected = theory.nonshared_basis_expected_errors(spectra, model)
    closed = [math.fsum(seq.e0)] + [gr_error_closed_form(seq, t)[0] for t in range(1, T + 1)]
    np.testing.assert_allclose(expected, closed, rtol=1e-10)


def test_nonshared_zero_task_keeps_error():
    model = TrueModel(np.array([1.0, -1.0]), 1.0)
    spectra = [TaskSpectrum(np.eye(2), np.array([1.0, 2.0]), 5), TaskSpectrum(np.eye(2), np.zeros(2), 5)]
    errs = theory.nonshared_basis_expected_errors(spectra, model)
    assert errs[2] == pytest.approx(errs[1], rel=1e-14)
    assert theory.nonshared_basis_monotone_policy(spectra, model)[1].pinned.all()


def test_nonshared_rotated_pair_monte_carlo():
    """Diagonal then 45-degree rotated task: simulated error does not rise."""
    rng = np.random.default_rng(5)
    c = 1 / math.sqrt(2)
    bases = [np.eye(2), np.array([[c, c], [c, -c]])]
    eig = [np.array([3.0, 0.5]), np.array([2.0, 0.2])]
    n = 6
    model = TrueModel(np.array([1.0, 2.0]), 1.0)
    spectra = [TaskSpectrum(b, g, n) for b, g in zip(bases, eig)]
    policy = theory.nonshared_basis_monotone_policy(spectra, model)
    R = 10_000
    w = np.zeros((2, R))
    errs = []
    for (b, g), H in zip(zip(bases, eig), policy):
        X = design_from_spectrum(b, g, n, rng)
        task = TaskData(X, (X @ model.w_star)[:, None] + rng.standard_normal((n, R)))
        w = gr_update(w, task, H)
        errs.append(np.sum((w - model.w_star[:, None]) ** 2, axis=0))
    d = errs[1] - errs[0]
    assert d.mean() <= 3 * d.std(ddof=1) / math.sqrt(R)
    exact = theory.nonshared_basis_expected_errors(spectra, model)
    for t, e in enumerate(errs, start=1):
        assert abs(e.mean() - exact[t]) <= 3 * e.std(ddof=1) / math.sqrt(R)


def test_pooled_oracle_error_matches_spectral_formula_for_commuting():
    seq = SpectralSequence(np.eye(2), [[1, 2], [3, 0.5]], [4, 6], [1, 1], 2.0)
    grams = [n * np.diag(g) for g, n in zip(seq.eigenvalues, seq.sample_sizes)]
    curve = theory.pooled_oracle_error(grams, 2.0)
    assert curve[1] == pytest.approx(oracle_error(seq, 2))
    singular = theory.pooled_oracle_error([np.diag([1.0, 0.0])], 1.0)
    assert np.isnan(singular[0])

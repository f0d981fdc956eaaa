import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subgeom import drift, hitting, models, rates
from subgeom._rng import exponentials
from subgeom.drift import LyapunovCandidate, PsiFunction
from subgeom.errors import ConfigError, TailBoundError, UnreliableEstimate
from subgeom.hitting import Censored, HittingSampler, MomentEstimate
from subgeom.models import TargetSet

C0 = TargetSet.of_states([0])


@pytest.fixture(scope="module")
def psi_from_v():
    model = models.two_state_symmetric()
    prof = rates.make_profile({"kind": "polynomial", "alpha": 0.5})
    V = LyapunovCandidate(values=np.array([1.0, 4.0]))
    cert = drift.check_subgeometric_drift(model, V, prof)
    return drift.build_psi_from_v(V, prof, cert)


def constant_psi(kappa, value=1.0):
    return PsiFunction("constant", lambda t, x: value * np.ones(np.shape(x)) if np.ndim(x) else value,
                       kappa, kappa, 1.0)


class TestSampler:
    def test_validation(self, two_state):
        with pytest.raises(ConfigError):
            HittingSampler(two_state, C0, r=0.0)
        with pytest.raises(ConfigError):
            HittingSampler(two_state, C0, horizon_cap=-1.0)
        with pytest.raises(ConfigError):
            HittingSampler(two_state, TargetSet.of_interval(0, 1))
        with pytest.raises(ConfigError):
            HittingSampler(two_state, C0, jobs=0)

    def test_with_r_keeps_the_rest(self, two_state):
        s = HittingSampler(two_state, C0, r=1.0, horizon_cap=50.0, master_seed=9)
        t = s.with_r(3.0)
        assert t.r == 3.0 and t.horizon_cap == 50.0 and t.master_seed == 9


class TestRandomizedHitting:
    def test_absorbing_clock_is_the_exponential(self, absorbing):
        s = HittingSampler(absorbing, C0, r=1.0, master_seed=5)
        tau, T = hitting.sample_randomized_hitting_batch(s, 0, 1000)
        np.testing.assert_array_equal(tau, T)
        np.testing.assert_array_equal(T, exponentials(5, np.arange(1000)))

    def test_absorbing_rate_two_halves_the_clock(self, absorbing):
        s = HittingSampler(absorbing, C0, r=2.0, master_seed=5)
        tau, T = hitting.sample_randomized_hitting_batch(s, 0, 1000)
        np.testing.assert_allclose(tau, T / 2, rtol=1e-15)

    def test_single_draw(self, absorbing):
        s = HittingSampler(absorbing, C0, master_seed=5)
        assert hitting.sample_randomized_hitting(s, 0, path=7) == exponentials(5, np.array([7]))[0]

    def test_two_state_mean(self, two_state):
        s = HittingSampler(two_state, C0, master_seed=11)
        tau, _ = hitting.sample_randomized_hitting_batch(s, 0, 100_000)
        se = tau.std(ddof=1) / math.sqrt(tau.size)
        assert abs(tau.mean() - 2.0) <= 3 * se

    def test_censored(self, two_state):
        s = HittingSampler(two_state, C0, horizon_cap=1e-3, master_seed=1)
        assert hitting.sample_randomized_hitting(s, 1, 0) is Censored
        assert not Censored

    def test_crossing_matches_fine_grid_scan(self, two_state):
        seed, horizon = 21, 80.0
        s = HittingSampler(two_state, C0, master_seed=seed)
        tau, T = hitting.sample_randomized_hitting_batch(s, 1, 100)
        coarse = np.arange(0.0, horizon, 1e-3)
        for i in range(100):
            path = models.sample_path(two_state, 1, horizon, seed=seed, path_index=i)
            occ = path.occupation(C0, coarse)
            k = int(np.argmax(occ >= T[i]))
            assert occ[k] >= T[i]
            fine = coarse[max(k - 1, 0)] + 1e-6 * np.arange(1001)
            j = int(np.argmax(path.occupation(C0, fine) >= T[i]))
            assert abs(fine[j] - tau[i]) <= 1e-6

    def test_pathwise_monotone_in_rate(self, two_state):
        base = HittingSampler(two_state, C0, master_seed=3)
        prev = None
        for r in (0.5, 1.0, 2.0, 7.5):
            tau, _ = hitting.sample_randomized_hitting_batch(base.with_r(r), 1, 2000)
            if prev is not None:
                assert np.all(tau <= prev)
            prev = tau

    @settings(max_examples=20, deadline=None)
    @given(r1=st.floats(0.1, 20), r2=st.floats(0.1, 20), seed=st.integers(0, 2**32))
    def test_monotone_in_rate_property(self, r1, r2, seed):
        model = models.bd_geometric(1.0, 1.5, 6)
        target = TargetSet.of_states([0, 2])
        lo, hi = sorted((r1, r2))
        s = HittingSampler(model, target, master_seed=seed)
        slow, _ = hitting.sample_randomized_hitting_batch(s.with_r(lo), 4, 200)
        fast, _ = hitting.sample_randomized_hitting_batch(s.with_r(hi), 4, 200)
        assert np.all(fast <= slow)

    def test_jobs_do_not_change_samples(self, two_state):
        one = HittingSampler(two_state, C0, master_seed=8, jobs=1)
        many = HittingSampler(two_state, C0, master_seed=8, jobs=4)
        a, _ = hitting.sample_randomized_hitting_batch(one, 1, 5000)
        b, _ = hitting.sample_randomized_hitting_batch(many, 1, 5000)
        np.testing.assert_array_equal(a, b)

    def test_prefix_stable(self, two_state):
        s = HittingSampler(two_state, C0, master_seed=8)
        a, _ = hitting.sample_randomized_hitting_batch(s, 1, 300)
        b, _ = hitting.sample_randomized_hitting_batch(s, 1, 100, first_path=200)
        np.testing.assert_array_equal(a[200:], b)


class TestHittingMoment:
    def test_absorbing_closed_form(self, absorbing, sqrt_profile):
        s = HittingSampler(absorbing, C0, master_seed=2)
        est = hitting.estimate_hitting_moment(s, 0, sqrt_profile, 100_000)
        # E[(1 + T/2)^2] = 1 + E[T] + E[T^2]/4
        assert abs(est.mean - 2.5) <= 3 * est.std_error
        assert est.censored_fraction == 0.0 and not est.unreliable

    def test_large_rate_limit(self, absorbing, sqrt_profile):
        s = HittingSampler(absorbing, C0, r=1e8, master_seed=2)
        est = hitting.estimate_hitting_moment(s, 0, sqrt_profile, 1000)
        assert est.mean == pytest.approx(1.0, abs=1e-7)

    def test_needs_enough_paths(self, absorbing, sqrt_profile):
        with pytest.raises(ConfigError):
            hitting.estimate_hitting_moment(HittingSampler(absorbing, C0), 0, sqrt_profile, 99)

    def test_censored_paths_are_a_lower_bound(self, two_state, sqrt_profile):
        s = HittingSampler(two_state, C0, horizon_cap=0.5, master_seed=4)
        est = hitting.estimate_hitting_moment(s, 1, sqrt_profile, 1000)
        assert est.unreliable and est.censored_fraction > 0.5
        assert est.mean <= float(sqrt_profile.h_inv(0.5)) + 1e-12

    def test_jobs_give_identical_estimates(self, two_state, sqrt_profile):
        a = hitting.estimate_hitting_moment(HittingSampler(two_state, C0, master_seed=6), 1, sqrt_profile, 20_000)
        b = hitting.estimate_hitting_moment(HittingSampler(two_state, C0, master_seed=6, jobs=8), 1,
                                            sqrt_profile, 20_000)
        assert a == b

    def test_moment_estimate_flags(self):
        est = MomentEstimate.from_samples([1.0, 2.0, 3.0], [False, False, True], threshold=0.1)
        assert est.mean == 2.0 and est.std_error == pytest.approx(1 / math.sqrt(3))
        assert est.unreliable


class TestOccupationIdentity:
    def test_absorbing_linear(self, absorbing):
        rep = hitting.occupation_identity_check(HittingSampler(absorbing, C0, master_seed=1), 0, "s", 20_000)
        assert rep.passed
        row = rep.rows[0]
        assert abs(row["left"] - 1.0) <= 3 * row["left_se"]
        assert row["right"] == pytest.approx(1.0, abs=1e-12)

    def test_zero_function(self, two_state):
        rep = hitting.occupation_identity_check(HittingSampler(two_state, C0), 1, "zero", 1000)
        assert rep.passed
        assert rep.rows[0]["left"] == 0.0 and rep.rows[0]["right"] == 0.0

    def test_two_state_all_functions(self, two_state, sqrt_profile):
        rep = hitting.occupation_identity_check(HittingSampler(two_state, C0, master_seed=2), 1,
                                                ["s", "one_minus_exp", "h_inv_minus_one"], 20_000, sqrt_profile)
        assert rep.passed, rep.violations

    def test_discounted_integral_closed_form_matches_quadrature(self, two_state, sqrt_profile):
        # one_minus_exp has a closed form; the same integral by Gauss rules must agree
        s = HittingSampler(two_state, C0, r=1.3, master_seed=4)
        run, _ = hitting._discounted_run(s, 1, 200)
        exact = hitting.probe_function("one_minus_exp")
        numeric = hitting.ProbeFunction("numeric", exact.f, exact.df)
        a = hitting.discounted_integral(run, 200, exact, s.r, s.horizon_cap)
        b = hitting.discounted_integral(run, 200, numeric, s.r, s.horizon_cap)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    def test_unknown_probe(self):
        with pytest.raises(ConfigError):
            hitting.probe_function("cube")
        with pytest.raises(ConfigError):
            hitting.probe_function("h_inv_minus_one")


class TestPsiViaHitting:
    def test_absorbing_value(self, absorbing, sqrt_profile):
        s = HittingSampler(absorbing, C0, master_seed=3)
        psi = hitting.psi_via_hitting(s, sqrt_profile, [0.0, 1.0], [0], 100_000)
        se = psi.se_table[0, 0]
        assert abs(psi(0.0, 0) - 2.5) <= 3 * se
        assert psi.kappa_sup == pytest.approx(psi(0.0, 0) + 3 * se)
        assert psi.eta == sqrt_profile.phi1

    def test_doubled_form_constants(self, absorbing, sqrt_profile):
        s = HittingSampler(absorbing, C0, master_seed=3)
        m = hitting.psi_via_hitting(s, sqrt_profile, [0.0], [0], 10_000)
        d = hitting.psi_via_hitting(s, sqrt_profile, [0.0], [0], 10_000, form="doubled")
        assert d(0.0, 0) == pytest.approx(2 * m(0.0, 0) - 1, rel=1e-12)
        assert d(3.0, 0) == pytest.approx(2 * m(3.0, 0) - float(sqrt_profile.h_inv(3.0)), rel=1e-12)
        assert d.eta == 2 * sqrt_profile.phi1
        assert d.kappa_drift == pytest.approx(s.r * (d.kappa_sup - 1))
        with pytest.raises(ConfigError):
            hitting.psi_via_hitting(s, sqrt_profile, [0.0], [0], 100, form="median")

    @pytest.mark.parametrize("form", ["expectation", "doubled"])
    def test_envelope(self, two_state, sqrt_profile, form):
        s = HittingSampler(two_state, C0, master_seed=5)
        psi = hitting.psi_via_hitting(s, sqrt_profile, np.linspace(0, 20, 41), [0, 1], 20_000, form=form)
        rep = hitting.check_psi_envelope(psi, sqrt_profile)
        assert rep.passed, rep.violations

    def test_doubled_form_meets_condition2(self, two_state, sqrt_profile):
        s = HittingSampler(two_state, C0, r=2.0, master_seed=5)
        grid = np.linspace(0, 20, 201)
        psi = hitting.psi_via_hitting(s, sqrt_profile, grid, [0, 1], 20_000, form="doubled")
        rep = drift.check_condition2(two_state, psi, sqrt_profile, C0, grid)
        assert rep.passed, rep.violations[:3]

    def test_expectation_form_is_harmonic_off_target(self, two_state, sqrt_profile):
        s = HittingSampler(two_state, C0, r=2.0, master_seed=5)
        grid = np.linspace(0, 20, 201)
        psi = hitting.psi_via_hitting(s, sqrt_profile, grid, [0, 1], 20_000)
        rep = drift.check_condition2(two_state, psi, sqrt_profile, C0, grid)
        assert not rep.passed
        assert {v["x"] for v in rep.violations if v["clause"] == "space_time_drift"} == {1}

    def test_unreliable_target_cells_refuse(self, two_state, sqrt_profile):
        s = HittingSampler(two_state, C0, horizon_cap=0.05, master_seed=5)
        with pytest.raises(UnreliableEstimate):
            hitting.psi_via_hitting(s, sqrt_profile, [0.0], [0, 1], 1000)

    def test_unsampled_state(self, absorbing, sqrt_profile):
        psi = hitting.psi_via_hitting(HittingSampler(absorbing, C0), sqrt_profile, [0.0], [0], 200)
        with pytest.raises(ValueError):
            psi(0.0, 3)


class TestTau1:
    def test_absorbing_thresholds(self, absorbing):
        assert hitting.sample_tau1(absorbing, 0, C0, 1.0) == 0.5
        assert hitting.sample_tau1(absorbing, 0, C0, 4.0) == 0.125

    def test_after_first_entry(self, two_state):
        seed = 13
        tau = hitting.sample_tau1_batch(two_state, 1, C0, 1.0, 500, seed=seed)
        for i in range(500):
            path = models.sample_path(two_state, 1, 200.0, seed=seed, path_index=i)
            first_entry = path.jump_times[np.argmax(path.states == 0)]
            assert tau[i] >= first_entry + 0.5 - 1e-12

    def test_kappa_positive(self, absorbing):
        with pytest.raises(ConfigError):
            hitting.sample_tau1(absorbing, 0, C0, 0.0)


class TestStepBounds:
    def test_step1_from_v(self, two_state, sqrt_profile, psi_from_v):
        rep = hitting.check_step1_bound(two_state, C0, psi_from_v, sqrt_profile, [0, 1], 20_000, seed=2)
        assert rep.passed, rep.rows

    def test_step1_absorbing_deterministic(self, absorbing, sqrt_profile):
        psi = hitting.psi_via_hitting(HittingSampler(absorbing, C0, master_seed=1), sqrt_profile, [0.0], [0],
                                      100_000)
        rep = hitting.check_step1_bound(absorbing, C0, psi, sqrt_profile, [0], 1000)
        row = rep.rows[0]
        assert row["mean"] == pytest.approx(float(sqrt_profile.h_inv(1 / (2 * psi.kappa))), rel=1e-14)
        assert row["std_error"] < 1e-15 and row["bound"] <= 5.0 + 6 * psi.se_table[0, 0]
        assert rep.passed

    def test_step1_floor_is_not_vacuous(self, absorbing, sqrt_profile):
        psi = constant_psi(1.0)
        rep = hitting.check_step1_bound(absorbing, C0, psi, sqrt_profile, [0], 100)
        assert rep.rows[0]["bound"] == 2.0 and rep.rows[0]["mean"] >= 1.0
        assert rep.passed

    def test_calibrate_closed_form(self, two_state, sqrt_profile):
        assert hitting.calibrate_r(two_state, C0, constant_psi(1.0), sqrt_profile) == pytest.approx(2 * math.log(4))
        assert hitting.calibrate_r(two_state, C0, constant_psi(4.0), sqrt_profile) == pytest.approx(8 * math.log(16))

    def test_step3_at_calibrated_rate(self, two_state, sqrt_profile, psi_from_v):
        r0 = hitting.calibrate_r(two_state, C0, psi_from_v, sqrt_profile)
        assert r0 == pytest.approx(16 * math.log(32))
        assert hitting.check_step3_gate(two_state, C0, psi_from_v, sqrt_profile, r0, 20_000).passed

    def test_tightened_rate_is_smaller_and_holds(self, two_state, sqrt_profile, psi_from_v):
        r0 = hitting.calibrate_r(two_state, C0, psi_from_v, sqrt_profile)
        r1 = hitting.calibrate_r(two_state, C0, psi_from_v, sqrt_profile, n_paths=5000, tighten=True)
        assert r1 < r0
        assert hitting.check_step3_gate(two_state, C0, psi_from_v, sqrt_profile, r1, 5000).passed

    def test_A_absorbing(self, absorbing, sqrt_profile):
        est = hitting.estimate_A_functional(absorbing, 0, C0, 1.0, 0.0, sqrt_profile, 200)
        # int_0^inf exp(-s) (1 + s/2) ds
        assert est.mean == pytest.approx(1.5, rel=1e-9)

    def test_A_laplace_limit(self, absorbing, sqrt_profile):
        rho = 1e6
        est = hitting.estimate_A_functional(absorbing, 0, C0, 1.0, rho, sqrt_profile, 200)
        assert est.mean == pytest.approx(sqrt_profile.phi1 * math.sqrt(math.pi / rho) / 2, rel=2e-3)

    def test_A_tail_guard(self, two_state, sqrt_profile):
        with pytest.raises(TailBoundError):
            hitting.estimate_A_functional(two_state, 1, C0, 1.0, 0.0, sqrt_profile, 200, s_horizon=2.0)
        with pytest.raises(ConfigError):
            hitting.estimate_A_functional(two_state, 1, C0, 1.0, -1.0, sqrt_profile, 200)

    def test_step4_from_v(self, two_state, sqrt_profile, psi_from_v):
        r0 = hitting.calibrate_r(two_state, C0, psi_from_v, sqrt_profile)
        rep = hitting.check_step4_bound(two_state, C0, psi_from_v, sqrt_profile, r0, 20_000)
        assert rep.passed and rep.rows[0]["mean"] <= 4 * psi_from_v.kappa

    def test_tau_delta_absorbing(self, absorbing, sqrt_profile):
        rep = hitting.check_tau_delta_bound(absorbing, 0, C0, constant_psi(1.0, 2.5), sqrt_profile, 1.0, 200)
        assert rep.rows[0]["mean"] == pytest.approx(1.25, rel=1e-14)
        assert rep.passed

    def test_tau_delta_small_delta(self, absorbing, sqrt_profile):
        rep = hitting.check_tau_delta_bound(absorbing, 0, C0, constant_psi(1.0), sqrt_profile, 1e-9, 200)
        assert rep.rows[0]["mean"] == pytest.approx(1e-9, rel=1e-6)
        with pytest.raises(ConfigError):
            hitting.check_tau_delta_bound(absorbing, 0, C0, constant_psi(1.0), sqrt_profile, 0.0, 200)

    def test_tau_delta_two_state(self, two_state, sqrt_profile, psi_from_v):
        rep = hitting.check_tau_delta_bound(two_state, 1, C0, psi_from_v, sqrt_profile, 1.0, 20_000)
        assert rep.passed


def test_append_result(tmp_path):
    path = tmp_path / "results.csv"
    est = MomentEstimate(2.5, 0.01, 1000, 0.0)
    hitting.append_result(path, "demo", "hitting_moment", 0, 1.0, est, bound=None, passed=True)
    hitting.append_result(path, "demo", "step1", 1, None, None, bound=5.0, passed=False,
                          row={"mean": 3.0, "std_error": 0.5, "n_paths": 10})
    rows = list(csv.reader(path.open()))
    assert rows[0] == hitting.RESULTS_HEADER
    assert rows[1][:2] == ["demo", "hitting_moment"] and rows[1][-1] == "True"
    assert rows[2][1] == "step1" and rows[2][8] == "5.0" and rows[2][-1] == "False"
    assert len(rows) == 3

"""Admission-gate calibration, verdicts, and budgeted selection."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coregate.errors import ConfigError, DataError
from coregate.gating import (
    Candidate,
    GateCalibration,
    calibrate,
    gate,
    select,
)


def no_u_calib(mu_s=0.0, sigma_s=1.0):
    return GateCalibration(mu_s=mu_s, sigma_s=sigma_s, mu_u=0.0, sigma_u=0.0,
                           use_u=False)


def dual_calib(mu_s=0.0, sigma_s=1.0, mu_u=0.0, sigma_u=1.0):
    return GateCalibration(mu_s=mu_s, sigma_s=sigma_s, mu_u=mu_u,
                           sigma_u=sigma_u, use_u=True)


class TestCalibrate:
    def test_hand_trace(self):
        calib = calibrate([1.0, 2.0, 3.0], [0.5, 0.5, 0.5])
        assert calib.mu_s == pytest.approx(2.0)
        assert calib.sigma_s == pytest.approx(np.sqrt(2.0 / 3.0))
        assert calib.mu_u == pytest.approx(0.5)
        assert calib.sigma_u == 0.0
        assert calib.use_u is False

    def test_uncertainty_gate_arms_on_spread(self):
        calib = calibrate([1.0, 2.0], [0.1, 0.3])
        assert calib.use_u is True
        assert calib.sigma_u == pytest.approx(0.1)

    def test_tiny_uncert_spread_keeps_gate_off(self):
        calib = calibrate([1.0, 2.0], [0.1, 0.1 + 1e-9])
        assert calib.use_u is False

    def test_degenerate_scores_floor_sigma(self):
        with pytest.warns(UserWarning, match="degenerate"):
            calib = calibrate([2.0, 2.0, 2.0], [0.0, 0.0])
        assert calib.sigma_s == 1e-12

    def test_empty_inputs(self):
        with pytest.raises(DataError):
            calibrate([], [1.0])

    def test_round_trip_dict(self):
        calib = calibrate([1.0, 2.0, 4.0], [0.1, 0.2, 0.4])
        back = GateCalibration.from_dict(calib.to_dict())
        assert back == calib


class TestGate:
    def test_inclusive_boundary(self):
        calib = no_u_calib()
        assert gate(1.0, 0.0, calib, tau=1.0).admitted  # z_s == tau exactly
        assert not gate(1.0 + 1e-9, 0.0, calib, tau=1.0).admitted

    def test_dual_gate_requires_both(self):
        calib = dual_calib()
        assert gate(0.5, 0.5, calib, tau=1.0).admitted
        assert not gate(0.5, 2.0, calib, tau=1.0).admitted
        assert not gate(2.0, 0.5, calib, tau=1.0).admitted

    def test_disabled_uncertainty_gate_ignores_u(self):
        calib = no_u_calib()
        v = gate(0.0, 1e9, calib, tau=1.0)
        assert v.admitted and v.z_u == 0.0

    def test_z_values(self):
        calib = dual_calib(mu_s=2.0, sigma_s=0.5, mu_u=1.0, sigma_u=0.25)
        v = gate(3.0, 0.5, calib)
        assert v.z_s == pytest.approx(2.0)
        assert v.z_u == pytest.approx(-2.0)

    @given(score=st.floats(-1e6, 1e6), uncert=st.floats(-1e6, 1e6),
           tau=st.floats(-10, 10))
    @settings(max_examples=200, deadline=None)
    def test_total_on_finite_inputs(self, score, uncert, tau):
        v = gate(score, uncert, dual_calib(), tau=tau)
        assert v.admitted in (True, False)
        assert np.isfinite(v.z_s) and np.isfinite(v.z_u)

    @given(st.floats(-100, 100), st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_monotone_in_score(self, a, b):
        # admission is monotone: lowering the score never revokes it
        lo, hi = min(a, b), max(a, b)
        calib = dual_calib()
        if gate(hi, 0.0, calib).admitted:
            assert gate(lo, 0.0, calib).admitted

    @given(st.floats(-50, 50), st.floats(0.1, 10), st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_affine_invariance(self, shift, scale, score):
        # z-scores are invariant to an affine re-expression of the raw scale
        base = dual_calib(mu_s=1.0, sigma_s=2.0)
        moved = dual_calib(mu_s=1.0 * scale + shift, sigma_s=2.0 * scale)
        v0 = gate(score, 0.0, base)
        v1 = gate(score * scale + shift, 0.0, moved)
        assert v0.z_s == pytest.approx(v1.z_s, rel=1e-9, abs=1e-9)
        assert v0.admitted == v1.admitted


class TestSelect:
    def _cands(self, rows):
        return [Candidate(id=i, score=s, uncert=u) for i, s, u in rows]

    def test_boundary_ranks_score_descending(self):
        cands = self._cands([(0, 0.1, 0.0), (1, 0.9, 0.0), (2, 0.5, 0.0)])
        ids, tau = select(cands, no_u_calib(), budget=2)
        assert ids == [1, 2]
        assert tau == 1.0

    def test_budget_truncates(self):
        cands = self._cands([(i, -float(i), 0.0) for i in range(10)])
        ids, _ = select(cands, no_u_calib(), budget=3)
        assert ids == [0, 1, 2]

    def test_tie_breaks_by_id(self):
        cands = self._cands([(5, 0.5, 0.0), (2, 0.5, 0.0), (9, 0.5, 0.0)])
        ids, _ = select(cands, no_u_calib(), budget=3)
        assert ids == [2, 5, 9]

    def test_relaxation_trace(self):
        # all candidates sit between tau and the relaxed tau
        cands = self._cands([(0, 1.2, 0.0), (1, 1.4, 0.0)])
        ids, tau = select(cands, no_u_calib(), budget=2)
        assert tau == 1.5
        assert ids == [1, 0]

    def test_no_relaxation_when_safe_set_nonempty(self):
        cands = self._cands([(0, 0.5, 0.0), (1, 1.2, 0.0)])
        ids, tau = select(cands, no_u_calib(), budget=2)
        assert tau == 1.0
        assert ids == [0]  # 1.2 stays outside the un-relaxed gate

    def test_empty_after_relaxation(self):
        cands = self._cands([(0, 5.0, 0.0), (1, 9.0, 0.0)])
        ids, tau = select(cands, no_u_calib(), budget=2)
        assert ids == [] and tau == 1.5

    def test_uncert_mode_ranks_z_u_descending(self):
        cands = self._cands([(0, 0.0, 0.2), (1, 0.0, 0.9), (2, 0.0, 0.5)])
        ids, _ = select(cands, dual_calib(), budget=3, mode="uncert")
        assert ids == [1, 2, 0]

    def test_uncert_mode_warns_when_gate_disabled(self):
        cands = self._cands([(0, 0.0, 0.0)])
        with pytest.warns(UserWarning, match="uncert ranking"):
            select(cands, no_u_calib(), budget=1, mode="uncert")

    def test_dual_gate_filters_high_uncertainty(self):
        cands = self._cands([(0, 0.0, 0.0), (1, 0.0, 5.0)])
        ids, _ = select(cands, dual_calib(), budget=2)
        assert ids == [0]

    def test_bad_budget_and_mode(self):
        cands = self._cands([(0, 0.0, 0.0)])
        with pytest.raises(ConfigError):
            select(cands, no_u_calib(), budget=0)
        with pytest.raises(ConfigError, match="invalid mode"):
            select(cands, no_u_calib(), budget=1, mode="score")

    def test_selection_subset_of_gate_passers(self):
        rng = np.random.default_rng(17)
        calib = dual_calib()
        for _ in range(50):
            cands = self._cands([
                (i, float(rng.normal()), float(rng.normal()))
                for i in range(20)
            ])
            ids, tau = select(cands, calib, budget=5)
            for c in cands:
                v = gate(c.score, c.uncert, calib, tau)
                if c.id in ids:
                    assert v.admitted
            assert len(ids) <= 5


class TestSeedSelfAdmission:
    def test_seed_population_admission_rate(self, rng):
        # on the calibration population itself, a one-sided z <= 1 gate
        # admits roughly Phi(1) of the mass
        scores = rng.normal(5.0, 2.0, size=4000)
        uncerts = rng.normal(0.1, 0.02, size=4000)
        calib = calibrate(scores, uncerts)
        admitted = sum(
            gate(s, u, calib).admitted for s, u in zip(scores, uncerts)
        )
        rate = admitted / scores.size
        assert 0.6 <= rate <= 0.95

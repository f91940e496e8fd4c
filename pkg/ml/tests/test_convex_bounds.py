"""
Tests for the tangent-bound construction over the negative entropy.
"""

import json
import math

import numpy as np
import pytest

from ml.errors import BeliefValidationError, BoundApplicabilityError, ShapeError
from ml.inference.convex_bounds import (
    BeliefVector,
    GridSampler,
    PredictionRewardSpec,
    RandomSampler,
    RewardVectorFamily,
    abstain_family,
    approximation_error_01,
    closed_form_01_bound,
    entropy,
    log_sum_exp,
    max_error_locus,
    multi_tangent_bound,
    normalize_belief,
    parse_sampler,
    prediction_lower_bound,
    reward_vectors_01,
    sample_beliefs,
    simplex_grid,
    softmax,
    tangent_value,
    theorem_bound,
    verify_bound_sweep,
)

LN2 = math.log(2.0)
LN_E_PLUS_1 = math.log(math.e + 1.0)


@pytest.fixture
def binary_spec():
    return PredictionRewardSpec(r_correct=1.0, r_incorrect=0.0, n_y=2)


@pytest.fixture
def binary_family(binary_spec):
    return reward_vectors_01(binary_spec)


class TestBeliefVector:
    def test_rejects_bad_sum(self):
        """A vector that does not sum to one is rejected, not renormalized"""
        with pytest.raises(BeliefValidationError):
            BeliefVector([0.5, 0.4])

    def test_rejects_negative_entries(self):
        with pytest.raises(BeliefValidationError):
            BeliefVector([1.2, -0.2])

    def test_rejects_single_entry(self):
        with pytest.raises(BeliefValidationError):
            BeliefVector([1.0])

    def test_tolerates_rounding(self):
        b = BeliefVector([0.5, 0.5 + 1e-12])
        assert b.n_y == 2

    def test_probs_are_read_only(self):
        b = BeliefVector([0.3, 0.7])
        with pytest.raises(ValueError):
            b.probs[0] = 0.9

    def test_normalize_is_explicit(self):
        b = normalize_belief([2.0, 6.0])
        assert b.tolist() == pytest.approx([0.25, 0.75])

    def test_normalize_rejects_zero_weights(self):
        with pytest.raises(BeliefValidationError):
            normalize_belief([0.0, 0.0])


class TestEntropyAndLogSumExp:
    def test_uniform_entropy(self):
        assert entropy([0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    def test_degenerate_entropy(self):
        assert entropy([1.0, 0.0]) == 0.0

    def test_hand_computed_entropy(self):
        assert entropy([0.8182, 0.1818]) == pytest.approx(0.47412, abs=2e-4)

    def test_entropy_validates(self):
        with pytest.raises(BeliefValidationError):
            entropy([0.6, 0.6])

    @pytest.mark.parametrize("x,expected", [
        ([0.0, 0.0], 0.693147),
        ([1.0, 0.0], 1.313262),
        ([1000.0, 1000.0], 1000.693147),
    ])
    def test_log_sum_exp(self, x, expected):
        """Large inputs must not overflow"""
        assert log_sum_exp(x) == pytest.approx(expected, abs=1e-6)

    def test_log_sum_exp_empty(self):
        with pytest.raises(ShapeError):
            log_sum_exp([])


class TestRewardVectors:
    def test_binary_family(self, binary_family):
        assert binary_family.labels == (0, 1)
        np.testing.assert_array_equal(binary_family.matrix, [[1, 0], [0, 1]])

    def test_three_label_family(self):
        family = reward_vectors_01(PredictionRewardSpec(2.0, 1.0, 3))
        np.testing.assert_array_equal(family.matrix, [[2, 1, 1], [1, 2, 1], [1, 1, 2]])

    def test_zero_margin_family(self):
        family = reward_vectors_01(PredictionRewardSpec(1.0, 1.0, 2))
        np.testing.assert_array_equal(family.matrix, np.ones((2, 2)))

    def test_negative_margin_rejected(self):
        with pytest.raises(BoundApplicabilityError):
            PredictionRewardSpec(0.0, 1.0, 2)

    def test_single_label_rejected(self):
        with pytest.raises(BeliefValidationError):
            PredictionRewardSpec(1.0, 0.0, 1)

    def test_mixed_lengths_rejected(self):
        with pytest.raises(ShapeError):
            RewardVectorFamily.from_pairs([('a', [1.0, 0.0]), ('b', [1.0, 0.0, 0.0])])

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ShapeError):
            RewardVectorFamily(labels=('a', 'a'), matrix=np.eye(2))


class TestTangentValue:
    def test_hand_evaluation(self):
        assert tangent_value([0.5, 0.5], [1.0, 0.0]) == pytest.approx(-0.813262, abs=1e-6)

    def test_tangency_point(self):
        """At softmax(r) the tangent touches -H"""
        b = softmax([1.0, 0.0])
        assert b.tolist() == pytest.approx([0.731059, 0.268941], abs=1e-6)
        assert tangent_value(b, [1.0, 0.0]) == pytest.approx(-0.582203, abs=1e-6)
        assert tangent_value(b, [1.0, 0.0]) == pytest.approx(-entropy(b), abs=1e-9)

    def test_constant_vector(self):
        assert tangent_value([1.0, 0.0], [0.0, 0.0]) == pytest.approx(-LN2)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            tangent_value([0.5, 0.5], [1.0, 0.0, 0.0])

    def test_tangency_random(self, rng):
        for _ in range(200):
            r = rng.normal(scale=3.0, size=rng.integers(2, 8))
            b = softmax(r)
            assert tangent_value(b, r) == pytest.approx(-entropy(b), abs=1e-9)


class TestPredictionLowerBound:
    def test_enumeration(self, binary_family):
        value, label = prediction_lower_bound([0.7, 0.3], binary_family)
        assert value == pytest.approx(-0.613262, abs=1e-6)
        assert label == 0

    def test_tie_goes_to_first_label(self, binary_family):
        value, label = prediction_lower_bound([0.5, 0.5], binary_family)
        assert value == pytest.approx(-0.813262, abs=1e-6)
        assert label == 0

    def test_vertex_selects_own_class(self, binary_family):
        value, label = prediction_lower_bound([0.0, 1.0], binary_family)
        assert value == pytest.approx(1.0 - LN_E_PLUS_1)
        assert label == 1

    def test_empty_family(self):
        empty = RewardVectorFamily.from_pairs([])
        with pytest.raises(ShapeError):
            prediction_lower_bound([0.5, 0.5], empty)

    def test_never_exceeds_negative_entropy(self, rng):
        for n_y in range(2, 8):
            family = RewardVectorFamily.from_pairs(
                (j, rng.normal(scale=2.0, size=n_y)) for j in range(5)
            )
            for b in rng.dirichlet(np.ones(n_y), size=200):
                value, _ = prediction_lower_bound(b, family)
                assert value <= -entropy(b) + 1e-9

    def test_shift_keeps_label_and_value(self, rng):
        """Every conjugate moves with the shift, so the tangent is unchanged"""
        family = reward_vectors_01(PredictionRewardSpec(2.0, 0.5, 4))
        for b in rng.dirichlet(np.ones(4), size=100):
            value, label = prediction_lower_bound(b, family)
            shifted_value, shifted_label = prediction_lower_bound(b, family.shifted(3.7))
            assert shifted_label == label
            assert shifted_value == pytest.approx(value, abs=1e-9)


class TestClosedForm:
    def test_binary(self, binary_spec):
        assert closed_form_01_bound([0.7, 0.3], binary_spec) == pytest.approx(0.7 - LN_E_PLUS_1)

    def test_uniform_four(self):
        spec = PredictionRewardSpec(1.0, 0.0, 4)
        expected = 0.25 - math.log(math.e + 3.0)
        assert closed_form_01_bound([0.25] * 4, spec) == pytest.approx(expected)
        assert expected == pytest.approx(-1.493, abs=1e-3)

    def test_vertex(self, binary_spec):
        assert closed_form_01_bound([1.0, 0.0], binary_spec) == pytest.approx(1.0 - LN_E_PLUS_1)

    def test_matches_enumeration(self, rng):
        for n_y in range(2, 11):
            spec = PredictionRewardSpec(float(rng.uniform(0.5, 3.0)), float(rng.uniform(-1.0, 0.5)), n_y)
            family = reward_vectors_01(spec)
            for b in rng.dirichlet(np.ones(n_y), size=1000):
                value, _ = prediction_lower_bound(b, family)
                assert closed_form_01_bound(b, spec) == pytest.approx(value, abs=1e-12)

    def test_length_mismatch(self, binary_spec):
        with pytest.raises(ShapeError):
            closed_form_01_bound([0.2, 0.3, 0.5], binary_spec)


class TestApproximationError:
    def test_uniform(self, binary_spec):
        assert approximation_error_01([0.5, 0.5], binary_spec) == pytest.approx(0.120115, abs=1e-6)

    def test_vertex(self, binary_spec):
        assert approximation_error_01([1.0, 0.0], binary_spec) == pytest.approx(LN_E_PLUS_1 - 1.0)

    def test_vanishes_at_tangency_point(self, binary_spec):
        assert approximation_error_01(softmax([1.0, 0.0]), binary_spec) == pytest.approx(0.0, abs=1e-12)

    def test_vertex_tightness_unit_margin(self):
        for n_y in range(2, 11):
            spec = PredictionRewardSpec(1.0, 0.0, n_y)
            for k in range(n_y):
                vertex = np.eye(n_y)[k]
                assert approximation_error_01(vertex, spec) == pytest.approx(theorem_bound(spec), abs=1e-9)


class TestTheoremBound:
    def test_binary(self, binary_spec):
        assert theorem_bound(binary_spec) == pytest.approx(0.313262, abs=1e-6)

    def test_ten_labels(self):
        assert theorem_bound(PredictionRewardSpec(1.0, 0.0, 10)) == pytest.approx(1.46125, abs=1e-5)

    def test_larger_margin(self):
        spec = PredictionRewardSpec(2.0, 0.0, 3)
        eps_1 = math.log(0.5) - 1.0
        eps_2 = math.log(1.0 / 3.0) - 2.0 / 3.0
        assert eps_1 > eps_2
        expected = eps_1 + math.log(math.e ** 2 + 2.0)
        assert theorem_bound(spec) == pytest.approx(expected, abs=1e-12)
        assert theorem_bound(spec) == pytest.approx(0.5464, abs=1e-4)

    def test_independent_of_shift(self):
        base = theorem_bound(PredictionRewardSpec(1.5, 0.0, 4))
        assert theorem_bound(PredictionRewardSpec(3.5, 2.0, 4)) == pytest.approx(base, abs=1e-12)

    @pytest.mark.parametrize("r_correct,n_y", [(0.5, 3), (4.0, 3)])
    def test_outside_applicability(self, r_correct, n_y):
        with pytest.raises(BoundApplicabilityError):
            theorem_bound(PredictionRewardSpec(r_correct, 0.0, n_y))

    def test_max_error_locus(self):
        assert max_error_locus(PredictionRewardSpec(1.0, 0.0, 3)).tolist() == [1.0, 0.0, 0.0]
        locus = max_error_locus(PredictionRewardSpec(3.0, 0.0, 3))
        spec = PredictionRewardSpec(3.0, 0.0, 3)
        assert approximation_error_01(locus, spec) == pytest.approx(theorem_bound(spec), abs=1e-9)


class TestSamplers:
    def test_parse(self):
        assert parse_sampler('grid:0.01') == GridSampler(0.01)
        assert parse_sampler('random:100', seed=4) == RandomSampler(100, 4)

    @pytest.mark.parametrize("text", ['grid:0', 'grid:abc', 'random:0', 'lattice:3', 'random'])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            parse_sampler(text)

    def test_grid_enumerates_compositions(self):
        grid = simplex_grid(3, 0.5)
        assert len(grid) == 6
        np.testing.assert_allclose(grid.sum(axis=1), 1.0)
        assert grid[0].tolist() == [1.0, 0.0, 0.0]
        assert len({tuple(row) for row in grid}) == 6

    def test_grid_rejects_non_divisor(self):
        with pytest.raises(ValueError):
            simplex_grid(2, 0.3)

    def test_grid_point_limit(self):
        with pytest.raises(ValueError, match='random sampler'):
            simplex_grid(10, 0.01)

    def test_random_includes_anchors(self):
        beliefs = sample_beliefs(4, RandomSampler(50, seed=1))
        assert len(beliefs) == 55
        np.testing.assert_allclose(beliefs[-1], 0.25)
        np.testing.assert_array_equal(beliefs[50:54], np.eye(4))

    def test_random_is_seeded(self):
        a = sample_beliefs(3, RandomSampler(20, seed=9))
        b = sample_beliefs(3, RandomSampler(20, seed=9))
        np.testing.assert_array_equal(a, b)


class TestVerifyBoundSweep:
    def test_binary_grid(self, binary_spec):
        report = verify_bound_sweep(binary_spec, GridSampler(0.01))
        assert report.holds
        assert report.samples_checked == 101
        assert report.max_error == pytest.approx(0.313262, abs=1e-6)
        assert report.argmax_belief.tolist() == [1.0, 0.0]
        assert report.min_error >= -1e-12

    def test_five_labels_random(self):
        report = verify_bound_sweep(PredictionRewardSpec(1.0, 0.0, 5), RandomSampler(100_000, seed=0))
        assert report.holds
        assert report.max_error <= report.theorem_bound + 1e-9

    def test_shifted_family_grid(self):
        report = verify_bound_sweep(PredictionRewardSpec(2.0, 1.0, 3), GridSampler(0.02))
        assert report.holds

    def test_parallel_matches_serial(self):
        spec = PredictionRewardSpec(1.5, 0.0, 4)
        sampler = RandomSampler(120_000, seed=2)
        serial = verify_bound_sweep(spec, sampler)
        parallel = verify_bound_sweep(spec, sampler, n_jobs=2)
        assert parallel.max_error == serial.max_error
        assert parallel.argmax_belief.tolist() == serial.argmax_belief.tolist()

    @pytest.mark.parametrize("r_correct,n_y", [(1.0, 3), (2.0, 3), (3.0, 3), (1.5, 2)])
    def test_fine_grids(self, r_correct, n_y):
        report = verify_bound_sweep(PredictionRewardSpec(r_correct, 0.0, n_y), GridSampler(0.01))
        assert report.holds

    @pytest.mark.parametrize("n_y", [6, 8, 10])
    def test_random_sweeps(self, n_y):
        spec = PredictionRewardSpec(float(n_y) / 2.0, -1.0, n_y)
        assert verify_bound_sweep(spec, RandomSampler(100_000, seed=n_y)).holds

    def test_violation_is_reported(self, binary_spec, mocker):
        """A bound that is too small must come back with holds=False"""
        mocker.patch('ml.inference.convex_bounds.theorem_bound', return_value=0.1)
        report = verify_bound_sweep(binary_spec, GridSampler(0.1))
        assert not report.holds
        assert report.max_error > report.theorem_bound

    def test_inapplicable_spec(self):
        with pytest.raises(BoundApplicabilityError):
            verify_bound_sweep(PredictionRewardSpec(0.5, 0.0, 2), GridSampler(0.1))

    def test_report_save(self, binary_spec, tmp_path):
        report = verify_bound_sweep(binary_spec, GridSampler(0.1))
        path = tmp_path / 'reports' / 'bound.json'
        report.save(str(path))
        data = json.loads(path.read_text())
        assert data['holds'] is True
        assert data['sampler'] == 'grid:0.1'
        assert set(data) == {'n_y', 'r_correct', 'r_incorrect', 'theorem_bound', 'max_error',
                             'argmax_belief', 'holds', 'samples_checked', 'min_error', 'sampler'}


class TestMultiTangentBound:
    @pytest.fixture
    def families(self, binary_family):
        return [binary_family, abstain_family(2, value=-LN2)]

    def test_abstain_touches_uniform(self, families):
        value = multi_tangent_bound([0.5, 0.5], families)
        assert value == pytest.approx(-LN2)
        assert -entropy([0.5, 0.5]) - value == pytest.approx(0.0, abs=1e-12)

    def test_abstain_dominated_at_vertex(self, families, binary_family):
        value = multi_tangent_bound([1.0, 0.0], families)
        assert value == pytest.approx(1.0 - LN_E_PLUS_1)
        assert value == pytest.approx(prediction_lower_bound([1.0, 0.0], binary_family)[0])

    def test_singleton_equals_family_bound(self, binary_family, rng):
        for b in rng.dirichlet(np.ones(2), size=50):
            assert multi_tangent_bound(b, [binary_family]) == pytest.approx(
                prediction_lower_bound(b, binary_family)[0])

    def test_empty_sequence(self):
        with pytest.raises(ShapeError):
            multi_tangent_bound([0.5, 0.5], [])

    def test_refinement_is_monotone(self):
        n_y = 3
        beliefs = sample_beliefs(n_y, GridSampler(0.05))
        families = [reward_vectors_01(PredictionRewardSpec(1.0, 0.0, n_y))]
        previous = np.inf
        for extra in [abstain_family(n_y, -math.log(n_y)),
                      RewardVectorFamily.from_pairs([('pair01', [0.5, 0.5, -1.0]), ('pair12', [-1.0, 0.5, 0.5])]),
                      reward_vectors_01(PredictionRewardSpec(3.0, 0.0, n_y))]:
            families.append(extra)
            gap = max(-entropy(b) - multi_tangent_bound(b, families) for b in beliefs)
            assert gap <= previous + 1e-12
            previous = gap

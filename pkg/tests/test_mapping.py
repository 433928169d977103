import itertools
import math

import numpy as np
import pytest
from scipy.stats import chisquare

from otguide.core import CostMatrix, DegenerateInputError, DiscreteMeasure, PointAttrs, TransportPlan
from otguide.costs import CostSpec
from otguide.datagen import gen_interval, gen_vertical_lines
from otguide.mapping import (
    REPORTED_MISMATCH_GUIDED,
    REPORTED_MISMATCH_UNGUIDED,
    DeterministicMap,
    ReferenceMap,
    assignment_plan,
    azimuth_readout,
    barycentric_projection,
    extract_assignment,
    mismatching_degree,
    nearest_neighbor_map,
    random_bijection,
    reference_map,
)
from otguide.solvers import SinkhornConfig, solve_exact, solve_sinkhorn

from conftest import random_pair, sq_cost

SQ = CostSpec("sq_euclidean")


def perm_plan(perm):
    n = len(perm)
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1 / n
    return TransportPlan(P, np.full(n, 1 / n), np.full(n, 1 / n))


class TestBarycentricProjection:
    def test_permutation_is_exact(self, rng):
        nu = DiscreteMeasure.uniform(rng.normal(size=(5, 3)))
        perm = rng.permutation(5)
        assert np.array_equal(barycentric_projection(perm_plan(perm), nu), nu.points[perm])

    def test_midpoint(self):
        nu = DiscreteMeasure.uniform([[0.0], [10.0]])
        plan = TransportPlan([[0.5, 0.5]], [1.0], [0.5, 0.5])
        assert barycentric_projection(plan, nu).tolist() == [[5.0]]

    def test_weighted_sum_oracle(self, rng):
        P = rng.random((4, 4))
        P /= P.sum()
        nu = DiscreteMeasure.uniform(rng.normal(size=(4, 2)))
        ours = barycentric_projection(TransportPlan(P, P.sum(1), P.sum(0)), nu)
        for i in range(4):
            row = sum(P[i, j] / P[i].sum() * nu.points[j] for j in range(4))
            assert np.max(np.abs(ours[i] - row)) <= 1e-12

    def test_zero_row_named(self):
        nu = DiscreteMeasure.uniform([[0.0], [1.0]])
        plan = TransportPlan([[0.5, 0.5], [0.0, 0.0]], [1.0, 0.0], [0.5, 0.5])
        with pytest.raises(DegenerateInputError, match="row 1"):
            barycentric_projection(plan, nu)

    def test_translation_equivariance(self, rng):
        mu, nu = random_pair(rng, 5, 4)
        plan = solve_exact(mu, nu, sq_cost(mu, nu)).plan
        t = np.array([3.25, -1.5])
        shifted = DiscreteMeasure(nu.points + t, nu.weights)
        diff = barycentric_projection(plan, shifted) - barycentric_projection(plan, nu)
        assert np.allclose(diff, t, atol=1e-12)


class TestReferenceMap:
    def test_identical_measures(self, rng):
        mu = DiscreteMeasure.uniform(rng.normal(size=(6, 2)))
        ref = reference_map(mu, mu, SQ)
        assert np.array_equal(ref.source_to_target, mu.points)
        assert np.array_equal(ref.target_to_source, mu.points)

    def test_line_instance(self):
        ref = reference_map(gen_interval(0, 3, 4), gen_interval(4, 7, 4), SQ)
        assert ref.source_to_target.ravel().tolist() == [4.0, 5.0, 6.0, 7.0]
        assert ref.target_to_source.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]

    def test_unequal_sizes_give_convex_combination(self):
        mu = gen_interval(0, 1, 2)
        nu = gen_interval(0, 3, 4)
        ref = reference_map(mu, nu, SQ)
        assert not np.all(np.isin(ref.source_to_target.ravel(), nu.points.ravel()))

    def test_jsonl_round_trip(self, rng):
        ref = ReferenceMap(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), "x")
        back = ReferenceMap.from_jsonl(ref.to_jsonl())
        assert np.array_equal(back.source_to_target, ref.source_to_target)
        assert np.array_equal(back.target_to_source, ref.target_to_source)

    def test_provenance_records_plan_and_spec(self):
        ref = reference_map(gen_interval(0, 3, 4), gen_interval(4, 7, 4), SQ)
        assert ref.provenance.endswith(SQ.spec_id)


class TestMismatchingDegree:
    def test_optimal_plan_equals_objective(self, rng):
        mu, nu = random_pair(rng, 5, 6)
        C = sq_cost(mu, nu)
        res = solve_exact(mu, nu, C)
        assert mismatching_degree(res.plan, mu, nu, C) == pytest.approx(res.objective, abs=1e-12)

    def test_reported_constants_kept(self):
        assert REPORTED_MISMATCH_UNGUIDED == 1.026e4
        assert REPORTED_MISMATCH_GUIDED[200] == 0.2788e4

    def test_line_bijections(self):
        mu, nu = gen_interval(0, 3, 4), gen_interval(4, 7, 4)
        C = sq_cost(mu, nu)
        scores = [mismatching_degree(DeterministicMap(p, True), mu, nu, C) for p in itertools.permutations(range(4))]
        assert min(scores) == 16.0
        assert sum(s > 16.0 for s in scores) == 23

    @pytest.mark.parametrize("n", [3, 4, 5, 6])
    def test_optimal_beats_every_bijection(self, rng, n):
        mu, nu = random_pair(rng, n, n)
        mu = DiscreteMeasure.uniform(mu.points)
        nu = DiscreteMeasure.uniform(nu.points)
        C = sq_cost(mu, nu)
        best = mismatching_degree(solve_exact(mu, nu, C).plan, mu, nu, C)
        for p in itertools.permutations(range(n)):
            assert best <= mismatching_degree(DeterministicMap(p, True), mu, nu, C) + 1e-12

    def test_callable_is_snapped(self):
        mu, nu = gen_interval(0, 3, 4), gen_interval(4, 7, 4)
        shift = lambda x: x + 4.1
        assert mismatching_degree(shift, mu, nu, SQ) == 16.0

    def test_rejects_unknown_mapping(self):
        mu = gen_interval(0, 3, 4)
        with pytest.raises(TypeError):
            mismatching_degree("nope", mu, mu, SQ)


class TestNearestNeighbour:
    def test_interval_collapse(self):
        mu, nu = gen_interval(0, 31, 32), gen_interval(32, 63, 32)
        nn = nearest_neighbor_map(mu, nu, SQ)
        assert nn.assignment.tolist() == [0] * 32
        assert nn.image_size == 1 and not nn.bijective

    def test_identical_supports(self, rng):
        mu = DiscreteMeasure.uniform(rng.normal(size=(7, 2)))
        nn = nearest_neighbor_map(mu, mu, SQ)
        assert nn.assignment.tolist() == list(range(7)) and nn.bijective

    def test_four_point_costs(self):
        mu, nu = gen_interval(0, 3, 4), gen_interval(4, 7, 4)
        nn = nearest_neighbor_map(mu, nu, SQ)
        assert mismatching_degree(nn, mu, nu, SQ) == 7.5
        assert nn.image_size == 1


class TestRandomBijection:
    def test_n1(self):
        assert random_bijection(1, 3).assignment.tolist() == [0]

    def test_seeded(self):
        assert np.array_equal(random_bijection(20, 7).assignment, random_bijection(20, 7).assignment)

    def test_uniform_over_permutations(self):
        perms = {p: k for k, p in enumerate(itertools.permutations(range(5)))}
        counts = np.zeros(120)
        for seed in range(10_000):
            counts[perms[tuple(random_bijection(5, seed).assignment)]] += 1
        expected = 10_000 / 120
        sigma = math.sqrt(expected * (1 - 1 / 120))
        assert np.all(np.abs(counts - expected) <= 5 * sigma)
        assert chisquare(counts).pvalue > 1e-4


class TestExtractAssignment:
    def test_permutation(self):
        m = extract_assignment(perm_plan([2, 0, 1]))
        assert m.assignment.tolist() == [2, 0, 1] and m.bijective

    def test_outer_product_flagged(self):
        P = np.full((4, 4), 1 / 16)
        assert not extract_assignment(TransportPlan(P, P.sum(1), P.sum(0))).bijective

    def test_small_epsilon_sinkhorn_line(self):
        mu, nu = gen_interval(0, 3, 4), gen_interval(4, 7, 4)
        C = sq_cost(mu, nu)
        res = solve_sinkhorn(mu, nu, C, SinkhornConfig(1e-3 * C.entries.max()))
        m = extract_assignment(res.plan)
        assert m.assignment.tolist() == [0, 1, 2, 3] and m.bijective

    def test_vertical_lines_in_sequence(self):
        _, a = gen_vertical_lines(32, 64, "A")
        _, b = gen_vertical_lines(32, 64, "B")
        m = extract_assignment(solve_exact(a, b, sq_cost(a, b)).plan)
        assert m.assignment.tolist() == list(range(32)) and m.bijective

    def test_assignment_plan_round_trip(self):
        mu = gen_interval(0, 3, 4)
        plan = assignment_plan(DeterministicMap([3, 1, 0, 2], True), mu, 4)
        assert extract_assignment(plan).assignment.tolist() == [3, 1, 0, 2]


class TestReadout:
    def _nu(self):
        attrs = [PointAttrs(f"t{i}", angle=float(30 * i)) for i in range(4)]
        return DiscreteMeasure.uniform(np.array([[0.0], [1.0], [2.0], [4.0]]), attrs)

    def test_exact_hit(self):
        assert azimuth_readout([[2.0]], self._nu()) == [60.0]

    def test_midpoint_goes_to_smaller_index(self):
        assert azimuth_readout([[0.5], [3.0]], self._nu()) == [0.0, 60.0]

    def test_small_perturbation(self, rng):
        nu = self._nu()
        gap = np.min(np.diff(np.sort(nu.points.ravel())))
        noisy = nu.points + rng.uniform(-0.49, 0.49, size=nu.points.shape) * gap
        assert azimuth_readout(noisy, nu) == [a.angle for a in nu.attrs]

    def test_other_attributes(self):
        nu = self._nu()
        assert azimuth_readout([[3.9]], nu, "id") == ["t3"]
        assert azimuth_readout([[3.9]], nu, "feature0") == [4.0]

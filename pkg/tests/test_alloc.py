import numpy as np
import pytest

from fairshare import (
    Allocation,
    AllocObjective,
    bmf_conditions,
    bmf_oracle,
    check_properties,
    normalize,
    solve,
    solve_bmf,
    solve_drf,
    solve_pf,
)
from conftest import random_instance

FIG_MATRIX = [[0.1, 1.0], [1.0, 0.1], [1.0, 1.0]]
DUO = [[0.5, 1.0], [1.0, 0.5]]
THREE_RESOURCE = [[1.0, 1.0, 1.0], [1.0, 0.5, 0.75], [0.5, 1.0, 0.75]]


def waterfill_bruteforce(req, mult, step):
    """Independent progressive-filling oracle: raise unfrozen rates by a fixed
    step; when a step would overflow a resource, freeze its users instead."""
    A = np.asarray(req.a)
    n = np.asarray(mult, dtype=float)
    K = A.shape[0]
    phi = np.zeros(K)
    frozen = np.zeros(K, dtype=bool)
    while not frozen.all():
        trial = phi + np.where(frozen, 0.0, step)
        usage = (n * trial) @ A
        over = usage > 1.0
        if over.any():
            frozen |= (A[:, over] > 0).any(axis=1)
        else:
            phi = trial
    return phi


class TestDRF:
    def test_single_resource_even_split(self):
        req = normalize([[1.0], [1.0]])
        assert np.allclose(solve_drf(req).phi, [0.5, 0.5])

    def test_symmetric_saturation(self):
        req = normalize(FIG_MATRIX)
        alloc = solve_drf(req)
        assert np.allclose(alloc.phi, [1 / 2.1] * 3, atol=1e-12)
        assert alloc.bottlenecks == {0, 1}

    def test_symmetric_saturation_matches_bruteforce_waterfill(self):
        req = normalize(FIG_MATRIX)
        brute = waterfill_bruteforce(req, [1, 1, 1], 1e-6)
        assert np.abs(solve_drf(req).phi - brute).max() < 1e-5

    def test_disjoint_resources_fill_completely(self):
        req = normalize([[1.0, 0.0], [0.0, 1.0]])
        assert np.allclose(solve_drf(req).phi, [1.0, 1.0])

    def test_random_instances_match_bruteforce(self, rng):
        for _ in range(10):
            req, mult = random_instance(rng, 4, 4, zeros=True, mult_high=3)
            brute = waterfill_bruteforce(req, mult, 1e-4)
            assert np.abs(solve_drf(req, mult).phi - brute).max() < 2e-3

    def test_multiplicities_shrink_shares(self):
        req = normalize([[1.0]])
        assert np.allclose(solve_drf(req, [4]).phi, [0.25])


class TestPF:
    def test_symmetric_duo(self):
        alloc = solve_pf(normalize(DUO))
        assert np.abs(alloc.phi - 2 / 3).max() < 1e-10
        assert np.allclose(alloc.duals, [1.0, 1.0], atol=1e-9)

    def test_inflated_requirement_shifts_rates(self):
        alloc = solve_pf(normalize([[2 / 3, 1.0], [1.0, 0.5]]))
        assert np.abs(alloc.phi - [0.75, 0.5]).max() < 1e-10

    def test_trio_truthful_and_inflated(self):
        truthful = solve_pf(normalize(DUO), [1, 2])
        assert np.abs(truthful.phi - [2 / 3, 1 / 3]).max() < 1e-10
        inflated = solve_pf(normalize([[2 / 3, 1.0], [1.0, 0.5]]), [1, 2])
        assert np.abs(inflated.phi - [0.5, 1 / 3]).max() < 1e-10

    def test_three_class_two_resource_point(self):
        # stationarity of 2*log(x) + log(1 - 1.1 x) gives x = 2/3.3
        alloc = solve_pf(normalize(FIG_MATRIX))
        assert np.abs(alloc.phi - [2 / 3.3, 2 / 3.3, 1 / 3]).max() < 1e-10

    def test_kkt_conditions_attach_to_result(self):
        req = normalize(FIG_MATRIX)
        alloc = solve_pf(req)
        report = check_properties(req, alloc)
        assert report.kkt_stationarity <= 1e-10
        assert report.kkt_slackness <= 1e-10

    def test_no_feasible_perturbation_improves_log_welfare(self, rng):
        for raw, mult in [(DUO, [1, 1]), (FIG_MATRIX, [1, 1, 1]), (THREE_RESOURCE, [2, 1, 3])]:
            req = normalize(raw)
            mult = np.asarray(mult)
            phi = solve_pf(req, mult).phi
            accepted = 0
            while accepted < 1000:
                deltas = rng.uniform(-0.3, 0.3, (4000, len(mult))) * phi
                trials = phi + deltas
                usage = (mult * trials) @ req.a
                ok = (trials > 0).all(axis=1) & (usage <= 1 + 1e-12).all(axis=1)
                for trial in trials[ok][: 1000 - accepted]:
                    change = float((mult * (trial - phi) / phi).sum())
                    assert change <= 1e-9
                    accepted += 1

    def test_empty_problem(self):
        alloc = solve_pf(normalize([]))
        assert alloc.phi.shape == (0,)


class TestBMF:
    def test_three_resource_point_and_mapping(self):
        req = normalize(THREE_RESOURCE)
        alloc, mapping = solve_bmf(req)
        assert np.allclose(alloc.phi, [0.4, 0.4, 0.4], atol=1e-12)
        assert not mapping.heuristic
        for k, j in enumerate(mapping.assignment):
            assert j in alloc.bottlenecks
            shares = alloc.phi * req.a[:, j]
            assert alloc.phi[k] * req.a[k, j] >= shares.max() - 1e-9

    def test_checker_accepts_both_named_points(self):
        req = normalize(THREE_RESOURCE)
        for point in ([0.4, 0.4, 0.4], [1 / 3, 4 / 9, 4 / 9]):
            ok, mapping = bmf_conditions(req, Allocation(point, [1, 1, 1]))
            assert ok and None not in mapping

    def test_checker_accepts_the_whole_continuum(self):
        req = normalize(THREE_RESOURCE)
        for x in np.linspace(0.0, 1.0, 11):
            point = [0.4 - x / 15, 0.4 + 2 * x / 45, 0.4 + 2 * x / 45]
            ok, _ = bmf_conditions(req, Allocation(point, [1, 1, 1]))
            assert ok, f"continuum point at x={x} rejected"

    def test_checker_rejects_interior_point(self):
        req = normalize(THREE_RESOURCE)
        ok, _ = bmf_conditions(req, Allocation([0.2, 0.2, 0.2], [1, 1, 1]))
        assert not ok

    def test_coincides_with_pf_on_two_by_two(self):
        req = normalize(DUO)
        alloc, _ = solve_bmf(req)
        assert np.abs(alloc.phi - solve_pf(req).phi).max() < 1e-9

    def test_single_resource_split_with_multiplicity(self):
        alloc, mapping = solve_bmf(normalize([[1.0]]), [3])
        assert np.allclose(alloc.phi, [1 / 3])
        assert mapping.assignment == (0,)

    def test_disjoint_resources(self):
        alloc, _ = solve_bmf(normalize([[1.0, 0.0], [0.0, 1.0]]))
        assert np.allclose(alloc.phi, [1.0, 1.0])

    def test_empty_problem(self):
        alloc, mapping = solve_bmf(normalize([]))
        assert alloc.phi.shape == (0,)
        assert mapping.assignment == ()

    def test_waterfill_fallback_agrees_with_enumeration(self, rng):
        for _ in range(20):
            req, mult = random_instance(rng, 3, 2, mult_high=2)
            exact, _ = solve_bmf(req, mult)
            forced, mapping = solve_bmf(req, mult, mapping_budget=0)
            assert mapping.heuristic
            # two resources admit a unique BMF point, so both routes find it
            assert np.abs(exact.phi - forced.phi).max() < 1e-7


class TestBMFOracle:
    def test_three_resource_grid_contains_both_named_points(self):
        req = normalize(THREE_RESOURCE)
        points = bmf_oracle(req, grid_step=1 / 90)
        for target in ([0.4, 0.4, 0.4], [1 / 3, 4 / 9, 4 / 9]):
            dist = np.abs(points - np.asarray(target)).max(axis=1).min()
            assert dist < 1e-12

    @staticmethod
    def cluster_count(points, step):
        cells = {tuple(int(round(x / step)) for x in p) for p in points}
        seen: set = set()
        clusters = 0
        for cell in cells:
            if cell in seen:
                continue
            clusters += 1
            frontier = [cell]
            seen.add(cell)
            while frontier:
                cur = frontier.pop()
                for other in cells:
                    if other not in seen and max(abs(a - b) for a, b in zip(cur, other)) <= 1:
                        seen.add(other)
                        frontier.append(other)
        return clusters

    def test_two_resource_instances_have_one_cluster(self, rng):
        found = 0
        for _ in range(6):
            req, mult = random_instance(rng, 3, 2)
            if req.num_resources != 2:
                continue
            points = bmf_oracle(req, mult, grid_step=1 / 60)
            assert len(points) > 0
            assert self.cluster_count(points, 1 / 60) == 1
            found += 1
        assert found >= 3

    def test_single_resource_cluster_is_the_even_split(self):
        req = normalize([[1.0], [1.0]])
        points = bmf_oracle(req, grid_step=1 / 50)
        assert self.cluster_count(points, 1 / 50) == 1
        # the acceptance band is grid-scaled: saturation slack plus the
        # 2-step share tolerance keeps every accepted point near the split
        assert np.abs(points - 0.5).max() <= 2 / 50 + 1e-12
        assert np.abs(points - 0.5).max(axis=1).min() <= 1 / 50 + 1e-12

    def test_rejects_large_instances(self):
        req = normalize(np.ones((4, 2)))
        with pytest.raises(ValueError):
            bmf_oracle(req, grid_step=0.1)


class TestSharedProperties:
    def test_capacity_pareto_sharing_on_random_instances(self, rng):
        for _ in range(120):
            req, mult = random_instance(rng, 5, 5, zeros=True, mult_high=3)
            for objective in AllocObjective:
                alloc = solve(objective, req, mult)
                report = check_properties(req, alloc)
                assert report.capacity_ok, (objective, req.a, mult)
                assert report.pareto_ok, (objective, req.a, mult)
                assert report.sharing_incentive_ok, (objective, req.a, mult)

    def test_single_resource_fairness_for_all_objectives(self, rng):
        for _ in range(20):
            req, mult = random_instance(rng, 5, 1, mult_high=3)
            total = int(mult.sum())
            for objective in AllocObjective:
                alloc = solve(objective, req, mult)
                shares = alloc.phi * req.a[:, 0]
                assert np.abs(shares - 1 / total).max() <= 1e-9

    def test_solver_dispatch_accepts_strings(self):
        req = normalize(DUO)
        assert np.allclose(solve("drf", req).phi, solve_drf(req).phi)

    def test_report_flags_dominated_point(self):
        req = normalize(DUO)
        report = check_properties(req, Allocation([0.1, 0.1], [1, 1]))
        assert report.capacity_ok
        assert not report.pareto_ok

    def test_sharing_incentive_margin_on_pf_point(self):
        req = normalize(FIG_MATRIX)
        report = check_properties(req, solve_pf(req))
        # min dominant share is exactly 1/3 = 1/n here
        assert abs(report.min_share_margin) < 1e-9
        assert report.sharing_incentive_ok

    def test_zero_multiplicity_classes_are_absent(self):
        req = normalize(FIG_MATRIX)
        for objective in AllocObjective:
            alloc = solve(objective, req, [2, 0, 1])
            assert alloc.phi[1] == 0.0
            assert alloc.usage(req).max() <= 1 + 1e-9

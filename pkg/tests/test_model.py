import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairshare import (
    Allocation,
    RequirementMatrix,
    SystemState,
    ValidationError,
    WorkloadSpec,
    check_stability,
    normalize,
)


class TestNormalize:
    def test_divides_rows_by_their_maximum(self):
        req = normalize([[0.5, 1.0], [2.0, 1.0]])
        assert np.allclose(req.a, [[0.5, 1.0], [1.0, 0.5]])
        assert np.allclose(req.row_scales, [1.0, 2.0])

    def test_already_normalized_row_is_untouched(self):
        req = normalize([[1.0, 1.0]])
        assert np.allclose(req.a, [[1.0, 1.0]])
        assert np.allclose(req.row_scales, [1.0])

    def test_all_zero_row_is_rejected_naming_the_row(self):
        with pytest.raises(ValidationError, match="row 0"):
            normalize([[0.0, 0.0], [1.0, 1.0]])

    def test_negative_entry_rejected(self):
        with pytest.raises(ValidationError, match="negative"):
            normalize([[1.0, -0.1]])

    def test_empty_matrix_allowed(self):
        req = normalize([])
        assert req.num_classes == 0

    def test_matrix_is_immutable(self):
        req = normalize([[0.5, 1.0]])
        with pytest.raises(ValueError):
            req.a[0, 0] = 2.0


rows = st.lists(
    st.lists(st.floats(0.0, 10.0), min_size=1, max_size=4),
    min_size=1,
    max_size=4,
).filter(
    lambda m: len({len(r) for r in m}) == 1 and all(max(r) > 1e-6 for r in m)
)


@given(rows)
@settings(max_examples=60, deadline=None)
def test_normalize_is_idempotent(matrix):
    once = normalize(matrix)
    twice = normalize(once.a)
    assert np.allclose(once.a, twice.a, atol=1e-12)
    assert np.allclose(twice.row_scales, 1.0)


class TestStability:
    def test_balanced_three_class_load(self):
        req = normalize([[0.1, 1.0], [1.0, 0.1], [1.0, 1.0]])
        load = WorkloadSpec([0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
        report = check_stability(req, load)
        assert np.allclose(report.resource_loads, [0.63, 0.63])
        assert report.stable

    def test_zero_demand_is_stable(self):
        req = normalize([[1.0, 1.0]])
        report = check_stability(req, WorkloadSpec([0.0], [1.0]))
        assert np.allclose(report.resource_loads, [0.0, 0.0])
        assert report.stable

    def test_unit_load_is_unstable(self):
        req = normalize([[1.0]])
        report = check_stability(req, WorkloadSpec([1.0], [1.0]))
        assert np.allclose(report.resource_loads, [1.0])
        assert not report.stable

    def test_dimension_mismatch_rejected(self):
        req = normalize([[1.0]])
        with pytest.raises(ValidationError):
            check_stability(req, WorkloadSpec([0.1, 0.1], [1.0, 1.0]))


@given(
    st.floats(0.01, 0.99),
    st.floats(1.0, 50.0),
)
@settings(max_examples=40, deadline=None)
def test_scaling_demand_up_never_restores_stability(base_rate, factor):
    req = normalize([[0.3, 1.0], [1.0, 0.7]])
    lo = WorkloadSpec([base_rate, base_rate], [1.0, 1.0])
    hi = WorkloadSpec([base_rate * factor, base_rate * factor], [1.0, 1.0])
    if check_stability(req, hi).stable:
        assert check_stability(req, lo).stable


class TestTypes:
    def test_workload_derived_load(self):
        load = WorkloadSpec([0.5, 2.0], [2.0, 0.25])
        assert np.allclose(load.rho, [1.0, 0.5])
        assert np.allclose(load.completion_rates, [0.5, 4.0])

    def test_workload_rejects_nonpositive_work(self):
        with pytest.raises(ValidationError):
            WorkloadSpec([1.0], [0.0])

    def test_system_state_rejects_negative_counts(self):
        with pytest.raises(ValidationError):
            SystemState([1, -1])
        assert SystemState([2, 0]).as_tuple() == (2, 0)

    def test_allocation_usage_and_capacity(self):
        req = normalize([[0.5, 1.0], [1.0, 0.5]])
        alloc = Allocation([2 / 3, 2 / 3], [1, 1])
        assert np.allclose(alloc.usage(req), [1.0, 1.0])

    def test_allocation_rejects_negative_rate(self):
        with pytest.raises(ValidationError):
            Allocation([-0.5], [1])

import math

import pytest
from hypothesis import given, strategies as st

from codesign.errors import MissingParameter, NonFiniteValue, NonPositiveVolume
from codesign.model import (
    EvaluationResult,
    MorphologySchema,
    ParamSpec,
    RunConfig,
    SchemaError,
    UnknownParameter,
    efficiency,
    make_result,
    validate_morphology,
)


def schema_of(*params):
    template = " ".join("{%s}" % p[0] for p in params)
    return MorphologySchema(
        name="test",
        params=tuple(ParamSpec(*p) for p in params),
        structure_template=template,
    )


ONE = schema_of(("l1", 0.05, 1.0))
TWO = schema_of(("l1", 0.05, 1.0), ("r1", 0.01, 0.2))


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            MorphologySchema(
                name="bad",
                params=(ParamSpec("a", 0, 1), ParamSpec("a", 0, 1)),
                structure_template="{a} {a}",
            )

    def test_inverted_bounds_rejected(self):
        with pytest.raises(SchemaError):
            schema_of(("a", 1.0, 0.5))

    def test_template_must_mention_every_param(self):
        with pytest.raises(SchemaError):
            MorphologySchema(
                name="bad",
                params=(ParamSpec("a", 0, 1), ParamSpec("b", 0, 1)),
                structure_template="{a}",
            )

    def test_template_extra_placeholder_rejected(self):
        with pytest.raises(SchemaError):
            MorphologySchema(
                name="bad",
                params=(ParamSpec("a", 0, 1),),
                structure_template="{a} {ghost}",
            )


class TestValidateMorphology:
    def test_in_bounds_identity(self):
        values, violations = validate_morphology(ONE, {"l1": 0.5})
        assert values == {"l1": 0.5}
        assert violations == []

    def test_clamp_to_upper_bound(self):
        values, violations = validate_morphology(ONE, {"l1": 2.0})
        assert values == {"l1": 1.0}
        assert len(violations) == 1 and "l1" in violations[0]

    def test_clamp_to_lower_bound(self):
        values, _ = validate_morphology(ONE, {"l1": -3.0})
        assert values == {"l1": 0.05}

    def test_missing_parameter(self):
        with pytest.raises(MissingParameter) as err:
            validate_morphology(TWO, {"l1": 0.5})
        assert "r1" in str(err.value)

    def test_non_finite_value(self):
        with pytest.raises(NonFiniteValue):
            validate_morphology(ONE, {"l1": float("nan")})

    def test_unknown_parameter(self):
        with pytest.raises(UnknownParameter):
            validate_morphology(ONE, {"l1": 0.5, "zz": 1.0})


class TestEfficiency:
    def test_direct_formula(self):
        assert efficiency(10.0, 2.0) == 5.0

    def test_zero_fitness(self):
        assert efficiency(0.0, 0.3) == 0.0

    def test_benchmark_cell_by_long_division(self):
        # volume derived by dividing a published fitness by its efficiency
        assert abs(efficiency(165.18, 5.3218e-3) - 31038.4) <= 0.5

    def test_non_positive_volume(self):
        with pytest.raises(NonPositiveVolume):
            efficiency(1.0, 0.0)
        with pytest.raises(NonPositiveVolume):
            efficiency(1.0, -2.0)

    def test_non_finite(self):
        with pytest.raises(NonFiniteValue):
            efficiency(float("inf"), 1.0)
        with pytest.raises(NonFiniteValue):
            efficiency(1.0, float("nan"))


class TestEvaluationResult:
    def test_ok_requires_consistent_efficiency(self):
        with pytest.raises(Exception):
            EvaluationResult(
                pair=("m1", "r1"), status="ok", fitness=10.0, volume=2.0, efficiency=7.0
            )

    def test_non_ok_carries_no_efficiency(self):
        with pytest.raises(Exception):
            EvaluationResult(pair=("m1", "r1"), status="timeout", efficiency=1.0)

    def test_sentinel_ordering_key(self):
        bad = make_result("m1", "r1", "timeout")
        good = make_result("m1", "r1", "ok", fitness=1.0, volume=1.0)
        assert bad.efficiency_key() == float("-inf")
        assert good.efficiency_key() == 1.0

    def test_make_result_downgrades_nonfinite(self):
        res = make_result("m1", "r1", "ok", fitness=float("nan"), volume=1.0)
        assert res.status == "nonfinite"
        assert res.efficiency is None

    def test_make_result_zero_volume_is_runtime_error(self):
        res = make_result("m1", "r1", "ok", fitness=1.0, volume=0.0)
        assert res.status == "runtime_error"

    @given(
        fitness=st.floats(-1e6, 1e6, allow_nan=False),
        volume=st.floats(1e-9, 1e3, allow_nan=False),
    )
    def test_efficiency_times_volume_recovers_fitness(self, fitness, volume):
        res = make_result("m", "r", "ok", fitness=fitness, volume=volume)
        assert res.status == "ok"
        assert abs(res.efficiency * res.volume - res.fitness) <= 1e-9 * max(
            1.0, abs(res.fitness)
        )


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.n_morphologies == 25
        assert cfg.n_rewards == 5
        assert cfg.top_k_fraction == 0.05
        assert cfg.fine_max_iterations == 10
        assert cfg.training_budget == 500_000
        assert cfg.retrain_budget == 1_000_000

    def test_bad_counts_rejected(self):
        with pytest.raises(Exception):
            RunConfig(n_morphologies=0)
        with pytest.raises(Exception):
            RunConfig(top_k_fraction=0.0)
        with pytest.raises(Exception):
            RunConfig(top_k_fraction=1.5)

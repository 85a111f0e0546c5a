import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvadsim.cohort import (
    SCENARIO_NAMES,
    TEST,
    TRAIN,
    ScenarioSpec,
    Transition,
    apply_scenario,
    load_cohort,
    make_cohort,
    patient_from_multipliers,
    resistance_from_dyne,
    save_cohort,
    scenario,
    scenario_value,
    to_schedule,
)
from lvadsim.cvs import TABLE_I_NAMES, CvsParameters, CvsState
from lvadsim.kernel import schedule_value


def test_cohort_is_deterministic_and_splits_disjoint(tmp_path):
    a = make_cohort(5, TRAIN, root_seed=7)
    b = make_cohort(5, TRAIN, root_seed=7)
    t = make_cohort(5, TEST, root_seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.multipliers, y.multipliers)
    assert not any(np.array_equal(x.multipliers, y.multipliers) for x in a for y in t)
    save_cohort(a, tmp_path / "c.json")
    back = load_cohort(tmp_path / "c.json")
    assert [p.params for p in back] == [p.params for p in a]
    assert [p.id for p in back] == [f"train{i:03d}" for i in range(5)]


def test_multipliers_bounded_and_exact():
    for p in make_cohort(10, TRAIN, root_seed=1):
        assert len(p.multipliers) == 43
        assert np.all((p.multipliers >= 0.8) & (p.multipliers <= 1.2))
        nominal = CvsParameters()
        for name, m in zip(TABLE_I_NAMES, p.multipliers):
            assert getattr(p.params, name) == getattr(nominal, name) * m


def test_multipliers_out_of_range_rejected():
    m = np.ones(43)
    m[4] = 1.3
    with pytest.raises(ValueError):
        patient_from_multipliers(m)


def test_six_named_scenarios():
    assert SCENARIO_NAMES == ("rising_Rpa", "falling_Rpa", "rising_Rsa", "falling_Rsa", "rest_to_exercise",
                              "postural_change")
    with pytest.raises(KeyError):
        scenario("bogus")


def test_step_and_first_order_values():
    s = scenario("rising_Rsa", onset=70)
    assert scenario_value(s, "svr", 69.99) == 1300
    assert scenario_value(s, "svr", 70.0) == 2600
    ex = scenario("rest_to_exercise", onset=70)
    assert scenario_value(ex, "hr", 70.0) == 60
    assert scenario_value(ex, "hr", 80.0) == pytest.approx(60 + 20 * (1 - np.exp(-1)))
    assert scenario_value(ex, "hr", 200.0) == pytest.approx(80, abs=1e-4)
    with pytest.raises(ValueError):
        scenario_value(s, "svr", -1.0)


def test_resistance_conversion():
    p = CvsParameters()
    assert resistance_from_dyne("svr", 1300.0, p) == pytest.approx(p.Rsa)
    assert resistance_from_dyne("pvr", 100.0, p) == pytest.approx(p.Rpa)
    assert resistance_from_dyne("svr", 2600.0, p) - p.Rsa == pytest.approx(1300 / 1333.22)


def test_schedule_matches_scenario_values():
    p = CvsParameters()
    for kind in SCENARIO_NAMES:
        spec = scenario(kind, 70.0)
        sched = to_schedule(spec, p)
        for row, tr in zip(sched, spec.transitions):
            if tr.target == "svr":
                for t in (50.0, 70.0, 75.0, 110.0):
                    assert schedule_value(row, t) == pytest.approx(
                        resistance_from_dyne("svr", scenario_value(spec, "svr", t), p))


def test_net_volume_change():
    assert scenario("postural_change").net_volume_change() == -300
    assert scenario("rest_to_exercise").net_volume_change() == 0
    assert scenario("postural_change").volume_change_at(70 + 1e6) == pytest.approx(-300)


def test_apply_scenario_guards_negative_volume():
    p = CvsParameters()
    s = CvsState.initial(p)
    spec = ScenarioSpec("drain", 0.0, (Transition("volume", 0.0, 10_000.0, "first_order", 10.0, src="sa"),))
    with pytest.raises(ValueError):
        apply_scenario(spec, p, s, 1.0)
    pt, rates = apply_scenario(scenario("rising_Rsa", 70.0), p, s, 80.0)
    assert pt.svr == 2600.0


@given(st.floats(0.0, 100.0))
def test_relative_scaling_for_non_nominal_patients(t):
    p = CvsParameters(svr=1500.0)
    spec = scenario("rising_Rsa", 0.0)
    pt, _ = apply_scenario(spec, p, CvsState.initial(p), t)
    assert pt.svr == pytest.approx(3000.0)


def test_scenario_json_roundtrip(tmp_path):
    spec = scenario("rest_to_exercise", 70.0)
    (tmp_path / "s.json").write_text(__import__("json").dumps(spec.to_dict()))
    assert ScenarioSpec.from_json(tmp_path / "s.json") == spec

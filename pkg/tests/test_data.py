import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchboot.data import (
    ColumnSchema,
    Dataset,
    MSchedule,
    gamma_exponent,
    load_dataset,
    resolve_m,
    write_dataset,
)
from matchboot.errors import (
    DegenerateGroupError,
    InfeasibleMError,
    SchemaError,
    ValidationError,
)


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_four_rows(tmp_path):
    p = write(tmp_path, "x,d,y\n0.0,1,3.0\n1.0,1,5.0\n0.2,0,1.0\n0.9,0,2.0\n")
    ds = load_dataset(p)
    assert (ds.n, ds.n0, ds.n1, ds.d) == (4, 2, 2, 1)
    np.testing.assert_array_equal(ds.x[:, 0], [0.0, 1.0, 0.2, 0.9])
    np.testing.assert_array_equal(ds.d_treat, [1, 1, 0, 0])
    np.testing.assert_array_equal(ds.y, [3.0, 5.0, 1.0, 2.0])


def test_bad_treatment_names_row(tmp_path):
    p = write(tmp_path, "x,d,y\n0.0,1,3.0\n1.0,2,5.0\n0.2,0,1.0\n")
    with pytest.raises(ValidationError, match="row 2"):
        load_dataset(p)


def test_non_finite_names_row(tmp_path):
    p = write(tmp_path, "x,d,y\n0.0,1,3.0\n1.0,0,nan\n")
    with pytest.raises(ValidationError, match="row 2"):
        load_dataset(p)


def test_empty_file_is_degenerate(tmp_path):
    with pytest.raises(DegenerateGroupError):
        load_dataset(write(tmp_path, ""))
    with pytest.raises(DegenerateGroupError):
        load_dataset(write(tmp_path, "x,d,y\n", "header_only.csv"))


def test_single_group_is_degenerate(tmp_path):
    with pytest.raises(DegenerateGroupError):
        load_dataset(write(tmp_path, "x,d,y\n0.0,1,3.0\n1.0,1,5.0\n"))


def test_missing_column(tmp_path):
    p = write(tmp_path, "x,treat,y\n0.0,1,3.0\n1.0,0,5.0\n")
    with pytest.raises(SchemaError, match="'d'"):
        load_dataset(p)
    ds = load_dataset(p, ColumnSchema(d_col="treat"))
    assert ds.n1 == 1


def test_explicit_covariate_columns(tmp_path):
    p = write(tmp_path, "a,b,junk,d,y\n0,1,9,1,3\n1,2,9,0,4\n")
    ds = load_dataset(p, ColumnSchema(x_cols=("b", "a")))
    np.testing.assert_array_equal(ds.x, [[1, 0], [2, 1]])


def test_dataset_is_read_only(four_unit):
    with pytest.raises(ValueError):
        four_unit.y[0] = 1.0


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite, st.integers(0, 1), finite), min_size=2, max_size=30))
def test_round_trip(tmp_path_factory, rows):
    treat = [r[2] for r in rows]
    if len(set(treat)) < 2:
        return
    ds = Dataset([r[:2] for r in rows], treat, [r[3] for r in rows])
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    write_dataset(ds, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.d_treat, ds.d_treat)
    np.testing.assert_array_equal(back.y, ds.y)


def balanced(n):
    return Dataset(np.arange(n, dtype=float)[:, None], np.arange(n) % 2, np.zeros(n))


def test_resolve_m_power_rule():
    assert resolve_m(MSchedule.power(0.4), balanced(1000)) == 16  # round(15.85)


def test_resolve_m_fixed():
    assert resolve_m(MSchedule.fixed(1), balanced(2)) == 1
    with pytest.raises(InfeasibleMError):
        resolve_m(MSchedule.fixed(50), balanced(20))


def test_resolve_m_power_clamped():
    # min group 3 -> at most 2
    assert resolve_m(MSchedule.power(0.9), balanced(6)) == 2
    assert resolve_m(MSchedule.power(0.9), balanced(2)) == 1


def test_resolve_m_monotone_in_n():
    sched = MSchedule.power(0.4)
    ms = [resolve_m(sched, balanced(n)) for n in range(4, 3000, 7)]
    assert all(a <= b for a, b in zip(ms, ms[1:]))


def test_gamma_exponent():
    assert gamma_exponent(1, {}) == pytest.approx(0.5)
    # d = 2: min(1 - (1/2 - g1) * 2, 1 - 1/2)
    assert gamma_exponent(2, {1: 0.4}) == pytest.approx(0.5)
    assert gamma_exponent(2, {1: 0.1}) == pytest.approx(0.2)
    # d = 4: l in {1, 2}; structural term 1 - 2/3
    assert gamma_exponent(4, {1: 0.45, 2: 0.3}) == pytest.approx(min(1 - 0.05 * 4, 1 - 0.2 * 2, 1 / 3))
    with pytest.raises(ValidationError):
        gamma_exponent(4, {1: 0.3})


def test_gamma_warning_only():
    ds = Dataset(np.random.default_rng(0).uniform(size=(100, 2)), np.arange(100) % 2, np.zeros(100))
    with pytest.warns(UserWarning, match="bias-correction limit"):
        m = resolve_m(MSchedule.power(0.6, gamma_inputs={1: 0.1}), ds)
    assert m == round(100 ** 0.6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        resolve_m(MSchedule.power(0.1, gamma_inputs={1: 0.4}), ds)


def test_schedule_validation():
    with pytest.raises(ValidationError):
        MSchedule.power(1.2)
    with pytest.raises(ValidationError):
        MSchedule(mode="fixed")

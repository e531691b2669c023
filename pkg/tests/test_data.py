from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmsm.data import (Schema, TrajectoryDataset, TreatmentSupport, history, history_matrix, load_csv,
                       write_csv)
from lmsm.errors import ContractError, DataParseError, SchemaError


def _write(path, header, rows):
    path.write_text(",".join(header) + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")


def test_load_four_time_five_level_file(tmp_path, ref_cfg):
    ds = ref_cfg.draw(300, 0)
    f = tmp_path / "sim.csv"
    write_csv(ds, f)
    back = load_csv(f, Schema.default(4))
    assert back.tau == 4
    assert back.support.levels == tuple((0, 1, 2, 3, 4) for _ in range(4))


def test_single_row_file(tmp_path):
    f = tmp_path / "one.csv"
    _write(f, ["L1", "A1", "Y"], [[0.5, 1, 1.0]])
    ds = load_csv(f, Schema.default(1))
    assert ds.n == 1 and ds.tau == 1


def test_non_integer_treatment_names_column(tmp_path):
    f = tmp_path / "bad.csv"
    _write(f, ["L1", "A1", "L2", "A2", "Y"], [[1, 0, 0, 1, 0], [1, 1, 0, 1.5, 1]])
    with pytest.raises(DataParseError, match="A2"):
        load_csv(f, Schema.default(2))


def test_missing_column_is_schema_error(tmp_path):
    f = tmp_path / "cols.csv"
    _write(f, ["L1", "A1", "Y"], [[1, 0, 0]])
    with pytest.raises(SchemaError):
        load_csv(f, Schema.default(2))


def test_missing_outcome_reports_row(tmp_path):
    f = tmp_path / "miss.csv"
    f.write_text("L1,A1,Y\n1,0,1\n2,1,\n")
    with pytest.raises(DataParseError, match="row 1"):
        load_csv(f, Schema.default(1))


def test_history_examples():
    ds = TrajectoryDataset.from_arrays([[3.0], [1.0]], [[2, 0]], [1.0],
                                       support=TreatmentSupport.uniform(2, range(5)))
    np.testing.assert_array_equal(history(ds, 0, 2), [2.0, 3.0, 1.0])
    np.testing.assert_array_equal(history(ds, 0, 1), [3.0])
    with pytest.raises(ContractError):
        history(ds, 0, 3)


def test_history_full_length(ref_cfg):
    ds = ref_cfg.draw(10, 1)
    assert history_matrix(ds, 4).shape == (10, 4 + 3)


def test_history_prefix_consistent(ref_cfg):
    ds = ref_cfg.draw(50, 2)
    for t in range(2, 5):
        Ht, Hp = history_matrix(ds, t), history_matrix(ds, t - 1)
        # treatments block grows by A_{t-1}, covariate block by L_t
        np.testing.assert_array_equal(Ht[:, : t - 2], Hp[:, : t - 2])
        np.testing.assert_array_equal(Ht[:, t - 1: 2 * t - 2], Hp[:, t - 2:])


def test_support_rejects_unknown_codes():
    with pytest.raises(ContractError):
        TrajectoryDataset.from_arrays([[0.0]], [[7]], [0.0], support=TreatmentSupport.uniform(1, [0, 1]))


def test_dataset_is_read_only(ref_cfg):
    ds = ref_cfg.draw(5, 0)
    with pytest.raises(ValueError):
        ds.treatments[0, 0] = 1


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 20), st.integers(0, 10**6))
def test_csv_round_trip_bit_exact(tmp_path_factory, tau, n, seed):
    rng = np.random.default_rng(seed)
    covs = [rng.normal(size=(n, 2)) * 10.0 ** rng.integers(-5, 5) for _ in range(tau)]
    A = rng.integers(0, 3, size=(n, tau))
    Y = rng.normal(size=n)
    ds = TrajectoryDataset.from_arrays(covs, A, Y, support=TreatmentSupport.uniform(tau, [0, 1, 2]))
    f = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(ds, f)
    back = load_csv(f, ds.schema)
    for a, b in zip(ds.covariates, back.covariates):
        assert np.array_equal(a, b)
    assert np.array_equal(ds.treatments, back.treatments)
    assert np.array_equal(ds.outcome, back.outcome)

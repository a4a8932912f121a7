"""
Tests for the data module.
"""

import os
import tempfile
import unittest

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose, assert_array_equal

from fusion_select.data import DataTable, fit_scale, from_frame, make_folds, read_csv, trim_to_rct_support
from fusion_select.exceptions import DataError


def small_table(n_rct=40, n_ext=30, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n_rct + n_ext, 2))
    S = np.r_[np.zeros(n_rct), np.ones(n_ext)]
    A = np.r_[rng.binomial(1, 0.5, n_rct), np.zeros(n_ext)]
    Y = W[:, 0] + A + rng.normal(size=n_rct + n_ext)
    return DataTable(W=W, S=S, A=A, Y=Y, covariate_names=("W1", "W2"))


class TestDataTable(unittest.TestCase):
    """Test cases for DataTable validation and views."""

    def test_treated_external_row_rejected(self):
        """Test that A=1 outside the trial raises a DataError naming the row."""
        with self.assertRaises(DataError) as ctx:
            DataTable(W=np.zeros((3, 1)), S=[0, 0, 1], A=[0, 1, 1], Y=[1.0, 2.0, 3.0], covariate_names=("W1",))
        self.assertEqual(ctx.exception.row, 2)
        self.assertEqual(ctx.exception.column, "A")

    def test_missing_outcome_needs_delta(self):
        """Test that a NaN outcome without DELTA is rejected."""
        with self.assertRaises(DataError):
            DataTable(W=np.zeros((2, 1)), S=[0, 0], A=[0, 1], Y=[1.0, np.nan], covariate_names=("W1",))

    def test_missing_outcome_with_delta(self):
        """Test that DELTA=0 rows may carry a missing outcome."""
        data = DataTable(W=np.zeros((2, 1)), S=[0, 0], A=[0, 1], Y=[1.0, np.nan],
                         covariate_names=("W1",), delta=[1, 0])
        self.assertTrue(data.has_missingness)
        assert_array_equal(data.observed, [1, 0])

    def test_no_trial_rows(self):
        """Test that a table without S=0 rows is rejected."""
        with self.assertRaises(DataError):
            DataTable(W=np.zeros((2, 1)), S=[1, 1], A=[0, 0], Y=[1.0, 2.0], covariate_names=("W1",))

    def test_experiment_mask_and_sources(self):
        """Test experiment views for the trial alone and trial plus dataset 2."""
        data = DataTable(W=np.zeros((4, 1)), S=[0, 1, 2, 0], A=[1, 0, 0, 0], Y=[1.0, 2.0, 3.0, 4.0],
                         covariate_names=("W1",))
        self.assertEqual(data.external_sources, (1, 2))
        assert_array_equal(data.experiment_mask(0), [True, False, False, True])
        assert_array_equal(data.experiment_mask(2), [True, False, True, True])

    def test_columns_are_read_only(self):
        """Test that stored columns cannot be written."""
        data = small_table()
        with self.assertRaises(ValueError):
            data.Y[0] = 1.0

    def test_csv_round_trip_and_bad_cell(self):
        """Test reading a CSV and the row reported for a non-numeric covariate."""
        data = small_table()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "data.csv")
            data.to_frame().to_csv(path, index=False)
            loaded = read_csv(path)
            self.assertEqual(loaded.covariate_names, ("W1", "W2"))
            assert_allclose(loaded.Y, data.Y)

            frame = pd.DataFrame({"W1": ["0.1", "x"], "S": [0, 0], "A": [0, 1], "Y": [1.0, 2.0]})
            with self.assertRaises(DataError) as ctx:
                from_frame(frame)
            self.assertEqual(ctx.exception.row, 1)


class TestTrimming(unittest.TestCase):
    """Test cases for positivity trimming."""

    def test_trim_continuous_and_discrete(self):
        """Test that external rows outside the trial range or levels are dropped."""
        frame = pd.DataFrame({
            "W1": [0.0, 1.0, 0.5, 2.0, 0.5],
            "G": [1, 2, 1, 1, 3],
            "S": [0, 0, 1, 1, 1],
            "A": [0, 1, 0, 0, 0],
            "Y": [1.0, 2.0, 3.0, 4.0, 5.0],
        })
        trimmed = trim_to_rct_support(from_frame(frame))
        assert_allclose(trimmed.Y, [1.0, 2.0, 3.0])

    def test_trim_emptied_dataset_warns(self):
        """Test that a fully trimmed external dataset is reported in warnings."""
        frame = pd.DataFrame({"W1": [0.0, 1.0, 5.0], "S": [0, 0, 1], "A": [0, 1, 0], "Y": [1.0, 2.0, 3.0]})
        trimmed = trim_to_rct_support(from_frame(frame))
        self.assertEqual(trimmed.external_sources, ())
        self.assertEqual(len(trimmed.warnings), 1)

    def test_trial_rows_never_dropped(self):
        """Test that trimming keeps every trial row."""
        data = small_table()
        trimmed = trim_to_rct_support(data)
        self.assertEqual(int((trimmed.S == 0).sum()), 40)


class TestFolds(unittest.TestCase):
    """Test cases for stratified fold assignment."""

    def test_stratum_balance(self):
        """Test that fold sizes within each stratum differ by at most one."""
        data = small_table(n_rct=43, n_ext=31)
        plan = make_folds(data, 5, seed=3)
        for s in (0, 1):
            counts = np.bincount(plan.labels[data.S == s], minlength=6)[1:]
            self.assertLessEqual(counts.max() - counts.min(), 1)
        self.assertEqual(set(np.unique(plan.labels)), {1, 2, 3, 4, 5})

    def test_deterministic(self):
        """Test that equal seeds give equal labels and selection is the complement."""
        data = small_table()
        a = make_folds(data, 4, seed=11)
        b = make_folds(data, 4, seed=11)
        assert_array_equal(a.labels, b.labels)
        assert_array_equal(a.selection(2), ~a.estimation(2))

    def test_trial_labels_ignore_external_rows(self):
        """Test that trial fold labels do not depend on the external rows."""
        data = small_table()
        trial_only = data.subset(data.S == 0)
        full = make_folds(data, 5, seed=2).labels[data.S == 0]
        assert_array_equal(full, make_folds(trial_only, 5, seed=2).labels)

    def test_too_few_rows(self):
        """Test that a stratum smaller than V is rejected."""
        data = small_table(n_rct=40, n_ext=3)
        with self.assertRaises(DataError):
            make_folds(data, 5, seed=0)


class TestScale(unittest.TestCase):
    """Test cases for outcome scaling."""

    def test_scale_and_invert(self):
        """Test the min-max map and its inverse."""
        scale = fit_scale([2.0, 4.0, np.nan, 6.0])
        assert_allclose(scale.apply([2.0, 6.0]), [0.0, 1.0])
        assert_allclose(scale.invert(0.5), 4.0)
        assert_allclose(scale.invert_difference(0.25), 1.0)

    def test_constant_outcome(self):
        """Test that a constant outcome cannot be scaled."""
        with self.assertRaises(DataError):
            fit_scale([1.0, 1.0, 1.0])


if __name__ == '__main__':
    unittest.main()

"""Early stopping and learning-rate sweeps (src/training.py)."""

import unittest

import numpy as np

from src.errors import ConfigError
from src.models import TrainingRecord
from src.numeric import ParameterStore
from src.training import fit_early_stopping, lr_sweep, minibatches, sample_learning_rates


def _record(name, score, lr=1e-4):
    return TrainingRecord(name=name, lr=lr, best_epoch=1, best_score=score, epochs_run=1,
                          stopped_early=False)


class MinibatchTests(unittest.TestCase):
    def test_batches_cover_every_index_once(self):
        batches = list(minibatches(10, 4, np.random.default_rng(0)))
        self.assertEqual([len(b) for b in batches], [4, 4, 2])
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(10))

    def test_invalid_batch_size(self):
        with self.assertRaises(ValueError):
            list(minibatches(10, 0, np.random.default_rng(0)))


class EarlyStoppingTests(unittest.TestCase):
    def test_best_epoch_parameters_are_restored(self):
        store = ParameterStore.from_arrays({"w": np.zeros(1)})
        scores = iter([0.6, 0.9, 0.7, 0.8, 0.5, 0.4])

        def train_epoch(epoch):
            store.set("w", np.array([float(epoch)]))
            return 1.0 / epoch

        record = fit_early_stopping("t", store, train_epoch, lambda: next(scores), lr=1e-3,
                                    max_epochs=6, patience=3)
        self.assertEqual(record.best_epoch, 2)
        self.assertEqual(record.best_score, 0.9)
        self.assertEqual(record.epochs_run, 5)
        self.assertTrue(record.stopped_early)
        self.assertEqual(float(store["w"][0]), 2.0)
        self.assertEqual([h.epoch for h in record.history], [1, 2, 3, 4, 5])

    def test_ties_keep_the_earliest_epoch(self):
        store = ParameterStore.from_arrays({"w": np.zeros(1)})
        record = fit_early_stopping("t", store, lambda e: 0.0, lambda: 0.5, lr=1e-3,
                                    max_epochs=10, patience=2)
        self.assertEqual(record.best_epoch, 1)
        self.assertEqual(record.epochs_run, 3)

    def test_runs_to_budget_without_patience_exhaustion(self):
        store = ParameterStore.from_arrays({"w": np.zeros(1)})
        scores = iter(np.linspace(0.5, 0.9, 5))
        record = fit_early_stopping("t", store, lambda e: 0.0, lambda: next(scores), lr=1e-3,
                                    max_epochs=5, patience=2)
        self.assertFalse(record.stopped_early)
        self.assertEqual(record.best_epoch, 5)


class SweepTests(unittest.TestCase):
    def test_learning_rates_within_bounds_and_seeded(self):
        lrs = sample_learning_rates((1e-5, 1e-3), 200, seed=3)
        self.assertTrue(all(1e-5 <= lr <= 1e-3 for lr in lrs))
        self.assertEqual(lrs, sample_learning_rates((1e-5, 1e-3), 200, seed=3))
        self.assertNotEqual(lrs, sample_learning_rates((1e-5, 1e-3), 200, seed=4))
        # Log-uniform: roughly half the draws fall below the geometric midpoint.
        below = sum(lr < 1e-4 for lr in lrs)
        self.assertGreater(below, 70)
        self.assertLess(below, 130)

    def test_invalid_sweeps_and_bounds(self):
        with self.assertRaises(ConfigError):
            sample_learning_rates((1e-5, 1e-3), 0, seed=0)
        with self.assertRaises(ConfigError):
            sample_learning_rates((1e-3, 1e-5), 3, seed=0)
        with self.assertRaises(ConfigError):
            sample_learning_rates((0.0, 1e-3), 3, seed=0)

    def test_single_sweep_is_returned_unconditionally(self):
        result = lr_sweep(lambda lr, s: ("only", _record("x", 0.1, lr)), sweeps=1, seed=0)
        self.assertEqual(result.best, "only")
        self.assertEqual(len(result.members), 1)

    def test_best_by_validation_score(self):
        scores = [0.6, 0.8, 0.7, 0.8]
        seen = []

        def trainer(lr, member_seed):
            i = len(seen)
            seen.append(member_seed)
            return f"model{i}", _record(f"m{i}", scores[i], lr)

        result = lr_sweep(trainer, sweeps=4, seed=2)
        self.assertEqual(result.best, "model1")
        self.assertEqual(result.best_record.best_score, 0.8)
        self.assertEqual(seen, [2000, 2001, 2002, 2003])
        self.assertEqual([m for m, _ in result.top(3)], ["model1", "model3", "model2"])


if __name__ == "__main__":
    unittest.main()

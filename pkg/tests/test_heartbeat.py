"""Tests for the epoch-progress heartbeat registry (src/_heartbeat.py).

The contract that matters: a heartbeat must NEVER break training.
``None`` disables emission, and a callback that raises is swallowed.
"""

import unittest

import numpy as np

from src import _heartbeat
from src._heartbeat import _emit_heartbeat, set_epoch_heartbeat
from src.numeric import ParameterStore
from src.training import fit_early_stopping


class HeartbeatRegistryTests(unittest.TestCase):
    def tearDown(self):
        set_epoch_heartbeat(None)

    def test_registered_callback_receives_stage_done_and_total(self):
        beats = []
        set_epoch_heartbeat(lambda stage, done, total: beats.append((stage, done, total)))
        _emit_heartbeat("pretrain:EHR", 3, 10)
        self.assertEqual(beats, [("pretrain:EHR", 3, 10)])

    def test_none_disables_emission(self):
        beats = []
        set_epoch_heartbeat(lambda stage, done, total: beats.append(done))
        set_epoch_heartbeat(None)
        _emit_heartbeat("x", 1, 2)
        self.assertEqual(beats, [])

    def test_default_state_is_disabled(self):
        self.assertIsNone(_heartbeat._callback)
        _emit_heartbeat("x", 1, 2)  # must not raise

    def test_raising_callback_does_not_propagate(self):
        def boom(stage, done, total):
            raise RuntimeError("sink exploded")

        set_epoch_heartbeat(boom)
        _emit_heartbeat("x", 1, 2)  # must not raise

    def test_training_loop_beats_once_per_epoch(self):
        beats = []
        set_epoch_heartbeat(lambda stage, done, total: beats.append((stage, done, total)))
        store = ParameterStore()
        store.add("w", np.zeros(1))
        fit_early_stopping("demo", store, lambda epoch: 0.0, lambda: 0.5,
                           lr=1e-3, max_epochs=4, patience=10)
        self.assertEqual(beats, [("demo", e, 4) for e in range(1, 5)])


if __name__ == "__main__":
    unittest.main()

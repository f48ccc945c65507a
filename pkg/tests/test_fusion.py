"""Missingness head, late fusion, fusion loss, ablations and training (src/fusion.py)."""

import math
import unittest

import numpy as np

from src.errors import AbsentOutputError, ConfigError, ShapeError
from src.fusion import (
    AlphaWeights,
    BetaWeights,
    FusionInputs,
    FusionOutputs,
    MedPatchModel,
    MissingnessHead,
    ablation_variant,
    derived_predictions,
    late_fuse,
    missingness_predict,
    total_loss,
    train_medpatch,
)
from src.numeric import Tape, adam_step, backward, grad_check, sigmoid
from src.patching import PatchedSplit

MODALITIES = ("EHR", "CXR", "RR")


def _inputs(n, C=1, d=3, seed=0, all_missing_but_anchor=False, informative=True):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, C)) < 0.4).astype(np.float64)
    a = (rng.random((n, len(MODALITIES))) < 0.7).astype(np.float64)
    a[:, 0] = 1.0
    if all_missing_but_anchor:
        a[:, 1:] = 0.0
    shift = (2 * labels - 1)[:, :, None] if informative else 0.0
    high, low, unimodal = {}, {}, {}
    for j, m in enumerate(MODALITIES):
        present = a[:, j][:, None, None]
        high[m] = present * (0.8 * shift + 0.3 * rng.standard_normal((n, C, d)))
        low[m] = present * rng.standard_normal((n, C, d))
        uni = sigmoid(0.5 * (2 * labels - 1) + rng.standard_normal((n, C)))
        unimodal[m] = np.where(a[:, j][:, None] == 1, uni, 0.5)
    patched = PatchedSplit(MODALITIES, high, low, a, labels)
    return FusionInputs(MODALITIES, unimodal, a, labels, patched)


def _model(setting=0, C=1, per_class=False, low_target="low", seed=0):
    return MedPatchModel(MODALITIES, C, {m: 3 for m in MODALITIES}, d_proj=4,
                         variant=ablation_variant(setting), per_class_heads=per_class,
                         low_target=low_target, seed=seed)


class MissingnessTests(unittest.TestCase):
    def test_zero_head(self):
        head = MissingnessHead(np.zeros((2, 4)), np.zeros(2))
        np.testing.assert_array_equal(missingness_predict([1, 0, 1, 1], head), [0.5, 0.5])

    def test_hand_value(self):
        head = MissingnessHead(np.array([[0.5, -0.25, 0.1, 0.2]]), np.array([-0.3]))
        expected = 1.0 / (1.0 + math.exp(-(0.5 - 0.25 + 0.1 + 0.2 - 0.3)))
        self.assertAlmostEqual(float(missingness_predict([1, 1, 1, 1], head)[0]), expected)

    def test_identical_patterns_identical_predictions(self):
        rng = np.random.default_rng(0)
        head = MissingnessHead(rng.standard_normal((3, 4)), rng.standard_normal(3))
        out = missingness_predict(np.array([[1, 0, 1, 0], [1, 0, 1, 0]]), head)
        np.testing.assert_array_equal(out[0], out[1])

    def test_rejects_non_binary_and_wrong_length(self):
        head = MissingnessHead(np.zeros((1, 4)), np.zeros(1))
        with self.assertRaises(ValueError):
            missingness_predict([1, 0.5, 1, 1], head)
        with self.assertRaises(ShapeError):
            missingness_predict([1, 1, 1], head)


class LateFusionTests(unittest.TestCase):
    def test_uniform_alpha_is_the_mean(self):
        out = late_fuse(np.array([[0.2], [0.4], [0.6]]), AlphaWeights(np.zeros((3, 1))))
        self.assertAlmostEqual(float(out[0]), 0.4)

    def test_one_hot_limit(self):
        raw = np.zeros((3, 1))
        raw[1, 0] = 20.0
        out = late_fuse(np.array([[0.2], [0.9], [0.6]]), AlphaWeights(raw))
        self.assertAlmostEqual(float(out[0]), 0.9, delta=1e-8)

    def test_equal_predictions_pass_through(self):
        rng = np.random.default_rng(0)
        out = late_fuse(np.full((5, 2), 0.37), AlphaWeights(rng.standard_normal((5, 2))))
        np.testing.assert_allclose(out, [0.37, 0.37], atol=1e-15)

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            K, C = int(rng.integers(1, 8)), int(rng.integers(1, 4))
            preds = rng.random((K, C))
            out = late_fuse(preds, AlphaWeights(3.0 * rng.standard_normal((K, C))))
            self.assertTrue(np.all(out >= preds.min(axis=0) - 1e-12))
            self.assertTrue(np.all(out <= preds.max(axis=0) + 1e-12))

    def test_argmax_invariant_to_column_shift(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((6, 3))
        shifted = raw.copy()
        shifted[:, 1] += 42.0
        np.testing.assert_array_equal(AlphaWeights(raw).effective().argmax(axis=0),
                                      AlphaWeights(shifted).effective().argmax(axis=0))

    def test_weight_count_mismatch(self):
        with self.assertRaises(ConfigError):
            late_fuse(np.zeros((3, 1)), AlphaWeights(np.zeros((4, 1))))
        with self.assertRaises(ConfigError):
            AlphaWeights(np.zeros((0, 1))).effective()


class TotalLossTests(unittest.TestCase):
    def test_uniform_beta_at_half(self):
        loss = total_loss([1], [0.5], [0.5], [0.5], BetaWeights(np.zeros(3)))
        self.assertAlmostEqual(loss, math.log(2.0))

    def test_late_one_hot_limit(self):
        beta = BetaWeights(np.array([40.0, 0.0, 0.0]))
        loss = total_loss([1], [0.8], [0.1], [0.3], beta)
        self.assertAlmostEqual(loss, -math.log(0.8), delta=1e-6)

    def test_swapping_high_and_low_with_beta(self):
        beta = np.array([0.1, 0.7, -0.4])
        a = total_loss([1, 0], [0.6, 0.3], [0.9, 0.2], [0.4, 0.5], BetaWeights(beta))
        b = total_loss([1, 0], [0.6, 0.3], [0.4, 0.5], [0.9, 0.2], BetaWeights(beta[[0, 2, 1]]))
        self.assertAlmostEqual(a, b, delta=1e-15)

    def test_literal_low_target_uses_late(self):
        beta = BetaWeights(np.zeros(3))
        loss = total_loss([1], [0.5], [0.5], [0.01], beta, low_target="late")
        self.assertAlmostEqual(loss, math.log(2.0))


class AblationTests(unittest.TestCase):
    def test_predictor_sets(self):
        self.assertEqual(ablation_variant(0).predictors(MODALITIES),
                         ["high", "low", "miss", "EHR", "CXR", "RR"])
        self.assertEqual(len(ablation_variant(1).predictors(MODALITIES)), 3)
        self.assertEqual(ablation_variant(2).predictors(MODALITIES),
                         ["high", "low", "EHR", "CXR", "RR"])
        self.assertFalse(ablation_variant(3).calibrated)
        self.assertEqual(ablation_variant(4).predictors(MODALITIES), ["miss", "EHR", "CXR", "RR"])
        self.assertFalse(ablation_variant(4).uses_patching)

    def test_unknown_setting(self):
        for setting in (5, -1, "x"):
            with self.assertRaises(ConfigError):
                ablation_variant(setting)

    def test_setting_four_has_no_high_output(self):
        model = _model(setting=4)
        outputs = model.predict(_inputs(10))
        with self.assertRaises(AbsentOutputError):
            outputs.require("high")
        with self.assertRaises(KeyError):
            derived_predictions(outputs)
        self.assertNotIn("beta", model.store)


class DerivedPredictionTests(unittest.TestCase):
    def test_values(self):
        out = FusionOutputs(high=np.array([0.6]), low=np.array([0.6]), late=np.array([0.6]))
        combined, reduced = derived_predictions(out)
        self.assertAlmostEqual(float(combined[0]), 0.6)
        self.assertAlmostEqual(float(reduced[0]), 0.6)
        out = FusionOutputs(high=np.array([0.9]), low=np.array([0.3]), late=np.array([0.6]))
        combined, reduced = derived_predictions(out)
        self.assertAlmostEqual(float(combined[0]), 0.6)
        self.assertAlmostEqual(float(reduced[0]), 0.75)

    def test_components_include_derived_and_unimodal(self):
        out = FusionOutputs(unimodal={"EHR": np.array([0.2])}, high=np.array([0.9]),
                            low=np.array([0.3]), miss=np.array([0.5]), late=np.array([0.6]))
        self.assertEqual(set(out.components()),
                         {"late", "high", "low", "miss", "combined", "reduced", "EHR"})
        np.testing.assert_array_equal(out.require("EHR"), [0.2])


class MedPatchModelTests(unittest.TestCase):
    def test_untrained_alpha_is_uniform(self):
        model = _model()
        np.testing.assert_allclose(model.alpha().effective(), np.full((6, 1), 1 / 6))
        np.testing.assert_allclose(model.beta().effective(), np.full(3, 1 / 3))

    def test_full_loss_gradients(self):
        inputs = _inputs(5, C=2, seed=1)
        for per_class in (False, True):
            model = _model(C=2, per_class=per_class, seed=3)
            rng = np.random.default_rng(4)
            model.store.set("alpha", rng.standard_normal(model.store["alpha"].shape))
            model.store.set("beta", rng.standard_normal(3))
            error = grad_check(lambda tape: model.loss(tape, inputs), model.store)
            self.assertLess(error, 1e-4)

    def test_late_only_loss_gradients(self):
        inputs = _inputs(6, seed=2)
        model = _model(setting=4, seed=1)
        self.assertLess(grad_check(lambda tape: model.loss(tape, inputs), model.store), 1e-4)

    def test_weights_stay_on_simplex_after_steps(self):
        inputs = _inputs(32, C=2, seed=5)
        model = _model(C=2)
        for _ in range(20):
            tape = Tape(model.store)
            backward(tape, model.loss(tape, inputs))
            adam_step(model.store, 0.05)
            alpha = model.alpha().effective()
            beta = model.beta().effective()
            self.assertTrue(np.all(alpha > 0) and np.all(beta > 0))
            np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-12)
            self.assertAlmostEqual(float(beta.sum()), 1.0, delta=1e-12)

    def test_all_non_anchor_missing_still_gives_probabilities(self):
        inputs = _inputs(20, seed=6, all_missing_but_anchor=True)
        for setting in range(5):
            outputs = _model(setting=setting).predict(inputs)
            self.assertEqual(outputs.late.shape, (20, 1))
            self.assertTrue(np.all((outputs.late >= 0.0) & (outputs.late <= 1.0)))

    def test_block_prediction_matches_single_pass(self):
        from src import fusion
        inputs = _inputs(13, seed=7)
        model = _model()
        full = model.forward(Tape(model.store), inputs)["late"].value
        original = fusion.EVAL_BLOCK
        fusion.EVAL_BLOCK = 4
        try:
            blocked = model.predict(inputs).late
        finally:
            fusion.EVAL_BLOCK = original
        np.testing.assert_allclose(blocked, full, atol=1e-15)

    def test_patching_variant_needs_pools(self):
        inputs = _inputs(4)
        inputs.patched = None
        with self.assertRaises(ConfigError):
            _model().predict(inputs)

    def test_unknown_low_target(self):
        with self.assertRaises(ConfigError):
            _model(low_target="high")


class TrainMedPatchTests(unittest.TestCase):
    def test_training_is_deterministic(self):
        train, val = _inputs(64, seed=8), _inputs(32, seed=9)
        records = []
        for _ in range(2):
            model = _model(seed=2)
            records.append(train_medpatch(model, train, val, lr=0.01, max_epochs=4,
                                          patience=4, seed=3))
        self.assertEqual(records[0].model_dump(), records[1].model_dump())

    def test_training_learns_informative_inputs(self):
        train, val = _inputs(200, seed=10), _inputs(100, seed=11)
        model = _model(seed=0)
        record = train_medpatch(model, train, val, lr=0.01, max_epochs=15, patience=5)
        self.assertGreater(record.best_score, 0.8)
        self.assertEqual(record.name, "fusion:0")


if __name__ == "__main__":
    unittest.main()
